use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Template-plus-noise classification data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Noise standard deviation is `1 / separation`.
    pub separation: f64,
    #[serde(default = "default_blobs")]
    pub blobs: usize,
    #[serde(default)]
    pub style: TemplateStyle,
    /// Bump standard deviation as a fraction of the shorter image side.
    #[serde(default = "default_bump_width")]
    pub bump_width: f64,
    /// Per-pixel RMS of a signed pattern around its background.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_bump_width() -> f64 {
    1.0 / 6.0
}

fn default_amplitude() -> f64 {
    0.15
}

/// How class templates are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateStyle {
    /// Independent bright Gaussian bumps on a dark background.
    #[default]
    Blobs,
    /// Classes `2r` and `2r + 1` are mid-gray plus and minus one smooth,
    /// zero-mean pattern. Patterns of different pairs are orthogonal, so a
    /// sample of one pair projects to zero on every other pair's direction.
    Antipodal,
    /// Like `Antipodal`, but the signed patterns ride on a shared bright
    /// carrier over a dark background instead of flat mid-gray.
    Carrier,
}

fn default_blobs() -> usize {
    3
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            train_per_class: 100,
            test_per_class: 50,
            channels: 1,
            height: 16,
            width: 16,
            separation: 4.0,
            blobs: default_blobs(),
            style: TemplateStyle::Blobs,
            bump_width: default_bump_width(),
            amplitude: default_amplitude(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: Dataset,
    pub test: Dataset,
    pub templates: Vec<Tensor<f32>>,
}

fn bumps(spec: &SynthSpec, rng: &mut ChaCha8Rng, signed: bool) -> Tensor<f32> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let sigma = h.min(w) * spec.bump_width;
    let mut t = Tensor::zeros([spec.channels, spec.height, spec.width]);
    for c in 0..spec.channels {
        for _ in 0..spec.blobs {
            let (cy, cx) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
            let mut amp = rng.random_range(0.5..1.0);
            if signed && rng.random_bool(0.5) {
                amp = -amp;
            }
            let plane = &mut t.data_mut()[c * spec.height * spec.width..(c + 1) * spec.height * spec.width];
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    plane[y * spec.width + x] += (amp * (-d2 / (2.0 * sigma * sigma)).exp()) as f32;
                }
            }
        }
    }
    t
}

/// Shared bright center for `Carrier` templates, `None` for other styles.
fn carrier(spec: &SynthSpec) -> Option<Vec<f64>> {
    if spec.style != TemplateStyle::Carrier {
        return None;
    }
    let (h, w) = (spec.height as f64, spec.width as f64);
    let sigma = 0.28 * h.min(w);
    let mut out = Vec::with_capacity(spec.channels * spec.height * spec.width);
    for _ in 0..spec.channels {
        for y in 0..spec.height {
            for x in 0..spec.width {
                let d2 = (y as f64 + 0.5 - h / 2.0).powi(2) + (x as f64 + 0.5 - w / 2.0).powi(2);
                out.push(0.6 * (-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    Some(out)
}

fn remove_component(v: &mut [f64], dir: &[f64]) {
    let dd: f64 = dir.iter().map(|x| x * x).sum();
    let dot: f64 = v.iter().zip(dir).map(|(x, y)| x * y).sum();
    v.iter_mut().zip(dir).for_each(|(x, y)| *x -= dot / dd * y);
}

fn templates(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Tensor<f32>> {
    if spec.style == TemplateStyle::Blobs {
        return (0..spec.classes).map(|_| bumps(spec, rng, false).map(|v: f32| v.min(1.0))).collect();
    }
    let carrier = carrier(spec);
    // Patterns are orthogonal to the background, so both signs carry equal energy.
    let background = carrier.clone().unwrap_or_else(|| vec![1.0; spec.channels * spec.height * spec.width]);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.classes.div_ceil(2));
    let mut out = Vec::with_capacity(spec.classes);
    while out.len() < spec.classes {
        let raw = bumps(spec, rng, true);
        let mut v: Vec<f64> = raw.data().iter().map(|&x| x as f64).collect();
        if let Some(c) = &carrier {
            v.iter_mut().zip(c).for_each(|(x, c)| *x *= c);
        }
        remove_component(&mut v, &background);
        for b in &basis {
            remove_component(&mut v, b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let scale = (v.len() as f64).sqrt() * spec.amplitude;
        for sign in [1.0, -1.0] {
            if out.len() < spec.classes {
                let data = v
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let base = carrier.as_ref().map_or(0.5, |c| c[i]);
                        (base + sign * scale * x).clamp(0.0, 1.0) as f32
                    })
                    .collect();
                out.push(Tensor::new(raw.shape().to_vec(), data).expect("same shape"));
            }
        }
        basis.push(v);
    }
    out
}

fn sample(templates: &[Tensor<f32>], per_class: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut images = Vec::with_capacity(templates.len() * per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for _ in 0..per_class {
        for (label, t) in templates.iter().enumerate() {
            images.push(t.map(|v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32));
            labels.push(label);
        }
    }
    Dataset::new(images, labels, templates.len())
}

/// Draw templates and noisy train/test samples from a single seed.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    if !(spec.separation > 0.0) {
        return Err(Error::Config(format!("separation must be positive, got {}", spec.separation)));
    }
    if spec.classes == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::Config("synthetic spec needs classes and samples".into()));
    }
    if spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("synthetic image dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = templates(spec, &mut rng);
    let std = 1.0 / spec.separation;
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(1);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(2);
    Ok(SynthData {
        train: sample(&templates, spec.train_per_class, std, &mut train_rng)?,
        test: sample(&templates, spec.test_per_class, std, &mut test_rng)?,
        templates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest(templates: &[Tensor<f32>], x: &Tensor<f32>) -> usize {
        let dist = |t: &Tensor<f32>| -> f64 {
            t.data().iter().zip(x.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum()
        };
        (0..templates.len())
            .min_by(|&a, &b| dist(&templates[a]).total_cmp(&dist(&templates[b])))
            .unwrap()
    }

    fn oracle_accuracy(d: &SynthData) -> f64 {
        let hits = d
            .test
            .images
            .iter()
            .zip(&d.test.labels)
            .filter(|(x, &l)| nearest(&d.templates, x) == l)
            .count();
        hits as f64 / d.test.len() as f64
    }

    #[test]
    fn noiseless_is_perfectly_separable() {
        let spec = SynthSpec {
            separation: f64::INFINITY,
            ..SynthSpec::default()
        };
        assert_eq!(oracle_accuracy(&synth_dataset(&spec, 1).unwrap()), 1.0);
    }

    #[test]
    fn two_class_oracle_at_separation_five() {
        let spec = SynthSpec {
            classes: 2,
            train_per_class: 10,
            test_per_class: 500,
            height: 8,
            width: 8,
            separation: 5.0,
            ..SynthSpec::default()
        };
        assert!(oracle_accuracy(&synth_dataset(&spec, 7).unwrap()) >= 0.99);
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let spec = SynthSpec::default();
        let a = synth_dataset(&spec, 5).unwrap();
        assert_eq!(a, synth_dataset(&spec, 5).unwrap());
        assert_ne!(a.train.images, synth_dataset(&spec, 6).unwrap().train.images);
        assert!(a.train.images.iter().flat_map(|t| t.data()).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_nonpositive_separation() {
        let spec = SynthSpec {
            separation: 0.0,
            ..SynthSpec::default()
        };
        assert!(synth_dataset(&spec, 0).is_err());
    }
}
