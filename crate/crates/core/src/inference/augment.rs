//! The fixed set of test-time views used for task identification.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One test-time transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    /// `p → μ_c + factor·(p − μ_c)` with `μ_c` the channel mean.
    Contrast { factor: f32 },
    /// Shift right by `⌈W / divisor⌉` pixels, zero fill.
    TranslateX { divisor: usize },
    /// Shift down by `⌈H / divisor⌉` pixels, zero fill.
    TranslateY { divisor: usize },
    /// `p + amount·(p − boxblur₃(p))`
    Sharpen { amount: f32 },
    /// Per-channel histogram equalization over 256 bins.
    Equalize,
    Invert,
    /// Keep the top `bits` of the 8-bit quantized value.
    Posterize { bits: u8 },
    Brightness { factor: f32 },
}

/// The ten default views, in order.
pub const DEFAULT_AUGMENTATIONS: [Augmentation; 10] = [
    Augmentation::Contrast { factor: 1.5 },
    Augmentation::TranslateX { divisor: 8 },
    Augmentation::TranslateY { divisor: 8 },
    Augmentation::Sharpen { amount: 1.0 },
    Augmentation::Equalize,
    Augmentation::Invert,
    Augmentation::Posterize { bits: 4 },
    Augmentation::Brightness { factor: 1.3 },
    Augmentation::Brightness { factor: 1.6 },
    Augmentation::Sharpen { amount: 2.0 },
];

/// Pick `count` transforms from `pool`: the whole pool when sizes match,
/// a seeded sample without replacement when fewer, cycling when more.
pub fn select_augmentations(pool: &[Augmentation], count: usize, seed: u64) -> Vec<Augmentation> {
    if count <= pool.len() {
        if count == pool.len() {
            return pool.to_vec();
        }
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut chosen = idx[..count].to_vec();
        chosen.sort_unstable();
        chosen.into_iter().map(|i| pool[i]).collect()
    } else {
        pool.iter().cycle().take(count).copied().collect()
    }
}

fn check_unit_range(image: &Tensor<f32>) -> Result<()> {
    if image.rank() != 3 {
        return Err(Error::Data(format!("expected a C×H×W image, got shape {:?}", image.shape())));
    }
    if let Some((i, v)) = image.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("pixel {i} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// Apply every transform in `augs` to `image` (values in `[0, 1]`).
pub fn augment_views(image: &Tensor<f32>, augs: &[Augmentation]) -> Result<Vec<Tensor<f32>>> {
    check_unit_range(image)?;
    Ok(augs.iter().map(|a| a.apply(image)).collect())
}

impl Augmentation {
    /// Apply to a `C × H × W` image in `[0, 1]`; output stays in `[0, 1]`.
    pub fn apply(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let &[c, h, w] = image.shape() else { panic!("augment expects C×H×W") };
        let plane = h * w;
        let mut out = image.clone();
        let data = out.data_mut();
        let src = image.data();
        match *self {
            Augmentation::Contrast { factor } => {
                for ch in 0..c {
                    let p = &mut data[ch * plane..(ch + 1) * plane];
                    let mean = p.iter().sum::<f32>() / plane as f32;
                    p.iter_mut().for_each(|v| *v = clamp(mean + factor * (*v - mean)));
                }
            }
            Augmentation::TranslateX { divisor } => {
                let s = w.div_ceil(divisor);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let i = ch * plane + y * w + x;
                            data[i] = if x >= s { src[i - s] } else { 0.0 };
                        }
                    }
                }
            }
            Augmentation::TranslateY { divisor } => {
                let s = h.div_ceil(divisor);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let i = ch * plane + y * w + x;
                            data[i] = if y >= s { src[i - s * w] } else { 0.0 };
                        }
                    }
                }
            }
            Augmentation::Sharpen { amount } => {
                for ch in 0..c {
                    let blur = box_blur3(&src[ch * plane..(ch + 1) * plane], h, w);
                    for (v, b) in data[ch * plane..(ch + 1) * plane].iter_mut().zip(blur) {
                        *v = clamp(*v + amount * (*v - b));
                    }
                }
            }
            Augmentation::Equalize => {
                for ch in 0..c {
                    equalize(&mut data[ch * plane..(ch + 1) * plane]);
                }
            }
            Augmentation::Invert => data.iter_mut().for_each(|v| *v = 1.0 - *v),
            Augmentation::Posterize { bits } => {
                let mask = (0xFFu16 << (8 - bits.min(8))) as u8;
                data.iter_mut().for_each(|v| *v = (to_u8(*v) & mask) as f32 / 255.0);
            }
            Augmentation::Brightness { factor } => data.iter_mut().for_each(|v| *v = clamp(*v * factor)),
        }
        out
    }
}

fn clamp(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// 3×3 mean over the in-bounds neighbourhood.
fn box_blur3(p: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; p.len()];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += p[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = s / n;
        }
    }
    out
}

fn equalize(p: &mut [f32]) {
    let mut hist = [0usize; 256];
    for &v in p.iter() {
        hist[to_u8(v) as usize] += 1;
    }
    let total = p.len();
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (i, &count) in hist.iter().enumerate() {
        acc += count;
        cdf[i] = acc;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if total == cdf_min {
        return;
    }
    let denom = (total - cdf_min) as f32;
    for v in p.iter_mut() {
        let c = cdf[to_u8(*v) as usize];
        *v = ((c.saturating_sub(cdf_min)) as f32 / denom * 255.0).round() / 255.0;
    }
}
