//! Forward and backward kernels for each layer kind. Activations are NCHW
//! (or N×F for dense layers); every backward is the exact adjoint of its
//! forward.

use rand::Rng;

use super::tensor::{axpy, dot, Real, Tensor};
use super::NnError;

fn dims4<T: Real>(t: &Tensor<T>, what: &str) -> Result<[usize; 4], NnError> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(NnError::ShapeMismatch(format!(
            "{what} expects N×C×H×W input, got {s:?}"
        ))),
    }
}

fn dims2<T: Real>(t: &Tensor<T>, what: &str) -> Result<[usize; 2], NnError> {
    match *t.shape() {
        [n, f] => Ok([n, f]),
        ref s => Err(NnError::ShapeMismatch(format!(
            "{what} expects N×F input, got {s:?}"
        ))),
    }
}

/// Output side of a strided window over a padded input, or `None` when the
/// window does not fit.
pub fn window_output(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn new(c: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self, NnError> {
        let out_h = window_output(h, kernel, stride, pad);
        let out_w = window_output(w, kernel, stride, pad);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) => Ok(Self {
                channels: c,
                height: h,
                width: w,
                kernel,
                stride,
                pad,
                out_h,
                out_w,
            }),
            _ => Err(NnError::ShapeMismatch(format!(
                "kernel {kernel} (stride {stride}, pad {pad}) does not fit {h}×{w}"
            ))),
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source index of column `(oy, ox)` for kernel row `(c, ky, kx)`.
    fn source(&self, c: usize, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then(|| (c * self.height + y) * self.width + x)
    }

    fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let p = self.cols();
        for c in 0..self.channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = ((c * self.kernel + ky) * self.kernel + kx) * p;
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            cols[row + oy * self.out_w + ox] = self
                                .source(c, ky, kx, oy, ox)
                                .map_or(T::zero(), |i| image[i]);
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let p = self.cols();
        for c in 0..self.channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = ((c * self.kernel + ky) * self.kernel + kx) * p;
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some(i) = self.source(c, ky, kx, oy, ox) {
                                image[i] += cols[row + oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeometry), NnError> {
    let [n, c, h, w] = dims4(input, "conv2d")?;
    let (out_c, k) = match *weight.shape() {
        [o, wc, kh, kw] if wc == c && kh == kw => (o, kh),
        ref s => {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d weight {s:?} incompatible with {c}-channel input"
            )))
        }
    };
    if bias.shape() != [out_c] {
        return Err(NnError::ShapeMismatch(format!(
            "conv2d bias {:?} should be [{out_c}]",
            bias.shape()
        )));
    }
    Ok((n, out_c, ConvGeometry::new(c, h, w, k, stride, pad)?))
}

/// Cross-correlation of `N×C×H×W` input with `O×C×K×K` weights.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, NnError> {
    let (n, out_c, g) = conv_geometry(input, weight, bias, stride, pad)?;
    let (rows, p) = (g.rows(), g.cols());
    let in_len = g.channels * g.height * g.width;
    let mut out = Tensor::zeros(&[n, out_c, g.out_h, g.out_w]);
    let mut cols = vec![T::zero(); rows * p];
    for s in 0..n {
        g.im2col(&input.data()[s * in_len..(s + 1) * in_len], &mut cols);
        let out_s = &mut out.data_mut()[s * out_c * p..(s + 1) * out_c * p];
        for o in 0..out_c {
            let out_row = &mut out_s[o * p..(o + 1) * p];
            out_row.fill(bias.data()[o]);
            let w_row = &weight.data()[o * rows..(o + 1) * rows];
            for (r, &wv) in w_row.iter().enumerate() {
                axpy(wv, &cols[r * p..(r + 1) * p], out_row);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>, NnError> {
    let (n, out_c, g) = conv_geometry(input, weight, bias, stride, pad)?;
    if grad_out.shape() != [n, out_c, g.out_h, g.out_w] {
        return Err(NnError::ShapeMismatch(format!(
            "conv2d output gradient {:?} should be {:?}",
            grad_out.shape(),
            [n, out_c, g.out_h, g.out_w]
        )));
    }
    let (rows, p) = (g.rows(), g.cols());
    let in_len = g.channels * g.height * g.width;
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = Tensor::zeros(bias.shape());
    let mut cols = vec![T::zero(); rows * p];
    let mut grad_cols = vec![T::zero(); rows * p];
    for s in 0..n {
        g.im2col(&input.data()[s * in_len..(s + 1) * in_len], &mut cols);
        grad_cols.fill(T::zero());
        let go = &grad_out.data()[s * out_c * p..(s + 1) * out_c * p];
        for o in 0..out_c {
            let go_row = &go[o * p..(o + 1) * p];
            grad_b.data_mut()[o] += go_row.iter().copied().sum::<T>();
            let gw_row = &mut grad_w.data_mut()[o * rows..(o + 1) * rows];
            for (r, gw) in gw_row.iter_mut().enumerate() {
                *gw += dot(go_row, &cols[r * p..(r + 1) * p]);
            }
            let w_row = &weight.data()[o * rows..(o + 1) * rows];
            for (r, &wv) in w_row.iter().enumerate() {
                axpy(wv, go_row, &mut grad_cols[r * p..(r + 1) * p]);
            }
        }
        g.col2im(&grad_cols, &mut grad_in.data_mut()[s * in_len..(s + 1) * in_len]);
    }
    Ok(ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    })
}

/// Max pooling without padding. Returns the pooled tensor and, per output
/// element, the flat input index that produced it (first maximum in scan
/// order wins ties).
pub fn maxpool_forward<T: Real>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>), NnError> {
    let [n, c, h, w] = dims4(input, "maxpool")?;
    let (oh, ow) = match (window_output(h, window, stride, 0), window_output(w, window, stride, 0)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(NnError::ShapeMismatch(format!(
                "pool window {window} (stride {stride}) does not fit {h}×{w}"
            )))
        }
    };
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let src = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out.data_mut()[o] = src[best];
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    if argmax.len() != grad_out.len() {
        return Err(NnError::ShapeMismatch(format!(
            "maxpool gradient has {} values for {} pooled outputs",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut grad_in = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        grad_in.data_mut()[i] += g;
    }
    Ok(grad_in)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnParams {
    pub depth_radius: usize,
    pub alpha: f64,
    pub beta: f64,
    pub bias: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            depth_radius: 2,
            alpha: 1e-4,
            beta: 0.75,
            bias: 2.0,
        }
    }
}

/// Cross-channel local response normalization:
/// `y_c = x_c / (bias + alpha · Σ_{|c'-c| ≤ r} x_{c'}²)^beta`.
/// Also returns the per-element denominator base for the backward pass.
pub fn lrn_forward<T: Real>(input: &Tensor<T>, p: LrnParams) -> Result<(Tensor<T>, Tensor<T>), NnError> {
    let [n, c, h, w] = dims4(input, "lrn")?;
    let plane = h * w;
    let (alpha, beta, bias) = (T::of(p.alpha), T::of(p.beta), T::of(p.bias));
    let x = input.data();
    let mut scale = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for s in 0..n {
        for ch in 0..c {
            let lo = ch.saturating_sub(p.depth_radius);
            let hi = (ch + p.depth_radius).min(c - 1);
            for i in 0..plane {
                let mut sum = T::zero();
                for k in lo..=hi {
                    let v = x[(s * c + k) * plane + i];
                    sum += v * v;
                }
                let idx = (s * c + ch) * plane + i;
                let base = bias + alpha * sum;
                scale.data_mut()[idx] = base;
                out.data_mut()[idx] = x[idx] * base.powf(-beta);
            }
        }
    }
    Ok((out, scale))
}

pub fn lrn_backward<T: Real>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    p: LrnParams,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let [n, c, h, w] = dims4(input, "lrn")?;
    if grad_out.shape() != input.shape() || scale.shape() != input.shape() {
        return Err(NnError::ShapeMismatch("lrn gradient shape differs from input".into()));
    }
    let plane = h * w;
    let (alpha, beta) = (T::of(p.alpha), T::of(p.beta));
    let two = T::of(2.0);
    let (x, s, g) = (input.data(), scale.data(), grad_out.data());
    let mut grad_in = Tensor::zeros(input.shape());
    for b in 0..n {
        for ch in 0..c {
            let lo = ch.saturating_sub(p.depth_radius);
            let hi = (ch + p.depth_radius).min(c - 1);
            for i in 0..plane {
                let idx = (b * c + ch) * plane + i;
                let mut cross = T::zero();
                for k in lo..=hi {
                    let j = (b * c + k) * plane + i;
                    cross += g[j] * x[j] * s[j].powf(-beta - T::one());
                }
                grad_in.data_mut()[idx] = g[idx] * s[idx].powf(-beta) - two * alpha * beta * x[idx] * cross;
            }
        }
    }
    Ok(grad_in)
}

/// Affine map `y = x Wᵀ + b` for `N×F` input and `O×F` weights.
pub fn dense_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let [n, f] = dims2(input, "dense")?;
    let out_f = dense_out(weight, bias, f)?;
    let mut out = Tensor::zeros(&[n, out_f]);
    for s in 0..n {
        let x = &input.data()[s * f..(s + 1) * f];
        for o in 0..out_f {
            out.data_mut()[s * out_f + o] = dot(x, &weight.data()[o * f..(o + 1) * f]) + bias.data()[o];
        }
    }
    Ok(out)
}

fn dense_out<T: Real>(weight: &Tensor<T>, bias: &Tensor<T>, f: usize) -> Result<usize, NnError> {
    match *weight.shape() {
        [o, wf] if wf == f && bias.shape() == [o] => Ok(o),
        ref s => Err(NnError::ShapeMismatch(format!(
            "dense weight {s:?} / bias {:?} incompatible with {f} input features",
            bias.shape()
        ))),
    }
}

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>, NnError> {
    let [n, f] = dims2(input, "dense")?;
    let out_f = dense_out(weight, bias, f)?;
    if grad_out.shape() != [n, out_f] {
        return Err(NnError::ShapeMismatch(format!(
            "dense output gradient {:?} should be [{n}, {out_f}]",
            grad_out.shape()
        )));
    }
    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(bias.shape());
    for s in 0..n {
        let x = &input.data()[s * f..(s + 1) * f];
        for o in 0..out_f {
            let g = grad_out.data()[s * out_f + o];
            gb.data_mut()[o] += g;
            axpy(g, x, &mut gw.data_mut()[o * f..(o + 1) * f]);
            axpy(g, &weight.data()[o * f..(o + 1) * f], &mut gi.data_mut()[s * f..(s + 1) * f]);
        }
    }
    Ok(DenseGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x.max(T::zero()))
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if input.shape() != grad_out.shape() {
        return Err(NnError::ShapeMismatch("relu gradient shape differs from input".into()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Inverted dropout mask: each unit is zeroed with probability `p`,
/// survivors are scaled by `1 / (1 - p)`.
pub fn dropout_mask<T: Real>(len: usize, p: f64, rng: &mut impl Rng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect()
}

pub fn apply_mask<T: Real>(input: &Tensor<T>, mask: &[T]) -> Result<Tensor<T>, NnError> {
    if mask.len() != input.len() {
        return Err(NnError::ShapeMismatch("dropout mask length differs from input".into()));
    }
    let data = input.data().iter().zip(mask).map(|(&x, &m)| x * m).collect();
    Tensor::from_vec(input.shape(), data)
}

/// Softmax cross-entropy over `N×C` logits.
pub struct LossOutput<T> {
    pub loss: T,
    pub probabilities: Tensor<T>,
    /// `(p - onehot) / N`
    pub grad: Tensor<T>,
}

pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let [n, c] = dims2(logits, "softmax")?;
    let mut probs = Tensor::zeros(&[n, c]);
    for s in 0..n {
        let row = &logits.data()[s * c..(s + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let out = &mut probs.data_mut()[s * c..(s + 1) * c];
        let mut sum = T::zero();
        for (o, &z) in out.iter_mut().zip(row) {
            *o = (z - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(probs)
}

pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossOutput<T>, NnError> {
    let [n, c] = dims2(logits, "softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(NnError::BadLabel { label: bad, classes: c });
    }
    let probs = softmax_rows(logits)?;
    let inv_n = T::of(1.0 / n as f64);
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits.data()[s * c..(s + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let log_sum = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        loss += log_sum - (row[label] - max);
        grad.data_mut()[s * c + label] -= T::one();
    }
    for g in grad.data_mut() {
        *g *= inv_n;
    }
    Ok(LossOutput {
        loss: loss * inv_n,
        probabilities: probs,
        grad,
    })
}
