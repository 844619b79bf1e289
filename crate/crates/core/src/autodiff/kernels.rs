//! Slice-level forward and backward kernels shared by the tape and by
//! gradient-free evaluation paths.

use crate::autodiff::Scalar;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// `da += dc · bᵀ`, `db += aᵀ · dc`
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    dc: &[T],
    m: usize,
    k: usize,
    n: usize,
    da: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(da) = da {
        for i in 0..m {
            let dcrow = &dc[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let s: T = dcrow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                da[i * k + p] = da[i * k + p] + s;
            }
        }
    }
    if let Some(db) = db {
        for i in 0..m {
            let dcrow = &dc[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let dbrow = &mut db[p * n..(p + 1) * n];
                for (d, &g) in dbrow.iter_mut().zip(dcrow) {
                    *d = *d + av * g;
                }
            }
        }
    }
}

/// Single-channel cross-correlation with zero padding `(k-1)/2`; output
/// has the input's shape. `k` must be odd.
pub fn conv2d_same<T: Scalar>(input: &[T], rows: usize, cols: usize, kernel: &[T], k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = T::zero();
            for a in 0..k {
                let r = i as isize + a as isize - pad;
                if r < 0 || r >= rows as isize {
                    continue;
                }
                let xrow = &input[r as usize * cols..(r as usize + 1) * cols];
                let krow = &kernel[a * k..(a + 1) * k];
                for (b, &kv) in krow.iter().enumerate() {
                    let c = j as isize + b as isize - pad;
                    if c < 0 || c >= cols as isize {
                        continue;
                    }
                    acc = acc + kv * xrow[c as usize];
                }
            }
            out[i * cols + j] = acc;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_same_backward<T: Scalar>(
    input: &[T],
    rows: usize,
    cols: usize,
    kernel: &[T],
    k: usize,
    dout: &[T],
    dinput: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
) {
    let pad = (k / 2) as isize;
    let mut dinput = dinput;
    let mut dkernel = dkernel;
    for i in 0..rows {
        for j in 0..cols {
            let g = dout[i * cols + j];
            if g == T::zero() {
                continue;
            }
            for a in 0..k {
                let r = i as isize + a as isize - pad;
                if r < 0 || r >= rows as isize {
                    continue;
                }
                for b in 0..k {
                    let c = j as isize + b as isize - pad;
                    if c < 0 || c >= cols as isize {
                        continue;
                    }
                    let xi = r as usize * cols + c as usize;
                    if let Some(dx) = dinput.as_deref_mut() {
                        dx[xi] = dx[xi] + kernel[a * k + b] * g;
                    }
                    if let Some(dk) = dkernel.as_deref_mut() {
                        dk[a * k + b] = dk[a * k + b] + input[xi] * g;
                    }
                }
            }
        }
    }
}

/// Geometry of a strided 2-D window operation over a `channels × height × width` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    /// Output extent along one axis, or `None` when it collapses to zero.
    pub fn out_extent(&self, extent: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

/// Multi-channel convolution (cross-correlation). `weight` is `out_c × in_c × k × k`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    input: &[T],
    in_c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    out_c: usize,
    win: Window,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let k = win.kernel;
    let mut out = vec![T::zero(); out_c * oh * ow];
    for o in 0..out_c {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..in_c {
            let x = &input[c * h * w..(c + 1) * h * w];
            let kw = &weight[(o * in_c + c) * k * k..(o * in_c + c + 1) * k * k];
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = T::zero();
                    for a in 0..k {
                        let r = (y * win.stride + a) as isize - win.padding as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for b in 0..k {
                            let cc = (xo * win.stride + b) as isize - win.padding as isize;
                            if cc < 0 || cc >= w as isize {
                                continue;
                            }
                            acc = acc + kw[a * k + b] * x[r as usize * w + cc as usize];
                        }
                    }
                    plane[y * ow + xo] = plane[y * ow + xo] + acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    in_c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    out_c: usize,
    win: Window,
    oh: usize,
    ow: usize,
    dout: &[T],
    mut dinput: Option<&mut [T]>,
    mut dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let k = win.kernel;
    if let Some(db) = dbias {
        for o in 0..out_c {
            let s: T = dout[o * oh * ow..(o + 1) * oh * ow].iter().copied().sum();
            db[o] = db[o] + s;
        }
    }
    for o in 0..out_c {
        for c in 0..in_c {
            let wbase = (o * in_c + c) * k * k;
            for y in 0..oh {
                for xo in 0..ow {
                    let g = dout[o * oh * ow + y * ow + xo];
                    if g == T::zero() {
                        continue;
                    }
                    for a in 0..k {
                        let r = (y * win.stride + a) as isize - win.padding as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for b in 0..k {
                            let cc = (xo * win.stride + b) as isize - win.padding as isize;
                            if cc < 0 || cc >= w as isize {
                                continue;
                            }
                            let xi = c * h * w + r as usize * w + cc as usize;
                            let wi = wbase + a * k + b;
                            if let Some(dx) = dinput.as_deref_mut() {
                                dx[xi] = dx[xi] + weight[wi] * g;
                            }
                            if let Some(dw) = dweight.as_deref_mut() {
                                dw[wi] = dw[wi] + input[xi] * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling; returns outputs and the flat input index each output came from.
pub fn max_pool2d<T: Scalar>(
    input: &[T],
    channels: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut argmax = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for a in 0..win.kernel {
                    let r = (y * win.stride + a) as isize - win.padding as isize;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    for b in 0..win.kernel {
                        let cc = (x * win.stride + b) as isize - win.padding as isize;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let i = c * h * w + r as usize * w + cc as usize;
                        if best_i == usize::MAX || input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
    }
    (out, argmax)
}

/// Softmax along `axis` of a tensor viewed as `outer × len × inner`.
pub fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut m = T::neg_infinity();
            for a in 0..len {
                m = m.max(x[idx(a)]);
            }
            let mut s = T::zero();
            for a in 0..len {
                let e = (x[idx(a)] - m).exp();
                y[idx(a)] = e;
                s = s + e;
            }
            for a in 0..len {
                y[idx(a)] = y[idx(a)] / s;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], outer: usize, len: usize, inner: usize, dx: &mut [T]) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let dot: T = (0..len).map(|a| dy[idx(a)] * y[idx(a)]).sum();
            for a in 0..len {
                let j = idx(a);
                dx[j] = dx[j] + y[j] * (dy[j] - dot);
            }
        }
    }
}

/// Layer norm over the trailing `d` entries; returns `(y, xhat, rstd)`.
pub fn layer_norm<T: Scalar>(x: &[T], d: usize, gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let dn = T::lit(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x[r * d..(r + 1) * d];
        let mean = xs.iter().copied().sum::<T>() / dn;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let h = (xs[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    (y, xhat, rstd)
}

pub fn gelu<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + (x / T::SQRT_2()).erf())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x / T::SQRT_2()).erf());
    let pdf = (-(x * x) / T::lit(2.0)).exp() / (T::lit(2.0) * T::PI()).sqrt();
    cdf + x * pdf
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
