use rand::Rng;

use crate::autodiff::Tensor;

/// Reflect-pad every plane of a `C × H × W` image by `pad` pixels.
pub fn reflect_pad(image: &Tensor<f32>, pad: usize) -> Tensor<f32> {
    let &[c, h, w] = image.shape() else {
        panic!("reflect_pad expects C×H×W");
    };
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if n == 1 {
            return 0;
        }
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let src = image.data();
    Tensor::from_fn([c, ph, pw], |idx| {
        let ch = idx / (ph * pw);
        let y = reflect((idx / pw % ph) as isize - pad as isize, h);
        let x = reflect((idx % pw) as isize - pad as isize, w);
        src[(ch * h + y) * w + x]
    })
}

pub fn hflip(image: &Tensor<f32>) -> Tensor<f32> {
    let &[_, _, w] = image.shape() else {
        panic!("hflip expects C×H×W");
    };
    let src = image.data();
    Tensor::from_fn(image.shape().to_vec(), |idx| {
        let x = idx % w;
        src[idx - x + (w - 1 - x)]
    })
}

fn crop(image: &Tensor<f32>, oy: usize, ox: usize, h: usize, w: usize) -> Tensor<f32> {
    let &[c, ph, pw] = image.shape() else {
        unreachable!()
    };
    debug_assert!(oy + h <= ph && ox + w <= pw);
    let src = image.data();
    Tensor::from_fn([c, h, w], |idx| {
        let ch = idx / (h * w);
        let (y, x) = (idx / w % h, idx % w);
        src[(ch * ph + oy + y) * pw + ox + x]
    })
}

/// Pad-and-crop plus horizontal flip for natural images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainTransform {
    pub enabled: bool,
    pub pad: usize,
}

impl Default for TrainTransform {
    fn default() -> Self {
        TrainTransform { enabled: true, pad: 4 }
    }
}

impl TrainTransform {
    pub const DISABLED: TrainTransform = TrainTransform { enabled: false, pad: 4 };

    /// Returns the transformed image with the crop offset and flip that were drawn.
    pub fn apply_traced(&self, image: &Tensor<f32>, rng: &mut impl Rng) -> (Tensor<f32>, (usize, usize), bool) {
        if !self.enabled {
            return (image.clone(), (self.pad, self.pad), false);
        }
        let &[_, h, w] = image.shape() else {
            panic!("train transform expects C×H×W");
        };
        let padded = reflect_pad(image, self.pad);
        let oy = rng.random_range(0..=2 * self.pad);
        let ox = rng.random_range(0..=2 * self.pad);
        let flip = rng.random_bool(0.5);
        let mut out = crop(&padded, oy, ox, h, w);
        if flip {
            out = hflip(&out);
        }
        (out, (oy, ox), flip)
    }

    pub fn apply(&self, image: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
        self.apply_traced(image, rng).0
    }
}
