use rayon::prelude::*;

use super::graph::{Graph, Var};
use super::linalg::{gemm, gemm_acc_strided};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<u32>,
    },
    Relu {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Softmax {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        mask: Vec<u8>,
        weights: Vec<T>,
        total_weight: T,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        coeffs: Vec<T>,
    },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::ConvTranspose2d {
                input, weight, bias,
            } => {
                let mut v = vec![input, weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::Concat { a, b } => vec![a, b],
            Op::MaxPool2d { input, .. }
            | Op::Relu { input }
            | Op::Softmax { input }
            | Op::Sum { input }
            | Op::WeightedSum { input, .. } => vec![input],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

/// Per-pixel supervision for [`Graph::masked_cross_entropy`]. All slices are
/// laid out `N×H×W` in row-major order.
#[derive(Clone, Copy, Debug)]
pub struct CrossEntropyTarget<'a, T> {
    pub labels: &'a [u8],
    pub mask: &'a [u8],
    pub weights: &'a [T],
}

fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    pad: usize,
    (ho, wo): (usize, usize),
    col: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let src_plane = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let lo = pad.saturating_sub(j).min(wo);
                let hi = (w + pad).saturating_sub(j).min(wo);
                for oy in 0..ho {
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = (oy + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &src_plane[iy as usize * w..(iy as usize + 1) * w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if lo < hi {
                        drow[lo..hi].copy_from_slice(&src[lo + j - pad..hi + j - pad]);
                    }
                }
            }
        }
    }
}

/// [`im2col`] restricted to output rows `oy0..oy1`, written with leading
/// dimension `ld` (one column-matrix row per kernel tap).
#[allow(clippy::too_many_arguments)]
fn im2col_rows<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    pad: usize,
    wo: usize,
    (oy0, oy1): (usize, usize),
    ld: usize,
    col: &mut [T],
) {
    for ci in 0..c {
        let src_plane = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let dst = &mut col[row * ld..];
                let lo = pad.saturating_sub(j).min(wo);
                let hi = (w + pad).saturating_sub(j).min(wo);
                for oy in oy0..oy1 {
                    let drow = &mut dst[(oy - oy0) * wo..(oy - oy0 + 1) * wo];
                    let iy = (oy + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &src_plane[iy as usize * w..(iy as usize + 1) * w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if lo < hi {
                        drow[lo..hi].copy_from_slice(&src[lo + j - pad..hi + j - pad]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    col: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let dst_plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let src = &col[row * plane..(row + 1) * plane];
                let lo = pad.saturating_sub(j).min(wo);
                let hi = (w + pad).saturating_sub(j).min(wo);
                for oy in 0..ho {
                    let iy = (oy + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst_plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for ox in lo..hi {
                        drow[ox + j - pad] += srow[ox];
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Per-pixel channel maxima and log-sum-exp for one `K×P` sample.
fn log_sum_exp_plane<T: Scalar>(x: &[T], k: usize, p: usize) -> Vec<T> {
    let mut max = vec![T::neg_infinity(); p];
    for c in 0..k {
        for (m, &v) in max.iter_mut().zip(&x[c * p..(c + 1) * p]) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut sum = vec![T::zero(); p];
    for c in 0..k {
        for ((s, &v), &m) in sum.iter_mut().zip(&x[c * p..(c + 1) * p]).zip(&max) {
            *s += (v - m).exp();
        }
    }
    max.iter().zip(&sum).map(|(&m, &s)| m + s.ln()).collect()
}

impl<T: Scalar> Graph<T> {
    /// 2-D cross-correlation with zero padding and stride 1.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let (n, cin, h, w) = x.dims4("conv2d")?;
        let (cout, wcin, kh, kw) = wt.dims4("conv2d")?;
        if cin != wcin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight {:?} expects {wcin}", wt.shape()),
            ));
        }
        if kh == 0 || kw == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{cout}]", self.value(b).shape()),
                ));
            }
        }
        let (ho, wo) = (h + 2 * padding - kh + 1, w + 2 * padding - kw + 1);
        let plane = ho * wo;
        let ckk = cin * kh * kw;
        let xd = x.data();
        let wd = wt.data();
        let bd = bias.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * cout * plane];
        let direct = kh == 1 && kw == 1 && padding == 0;
        out.par_chunks_mut(cout * plane)
            .enumerate()
            .for_each(|(b, o)| {
                let xb = &xd[b * cin * h * w..(b + 1) * cin * h * w];
                if direct {
                    gemm(cout, plane, ckk, wd, false, xb, false, o, false);
                } else {
                    let mut col = vec![T::zero(); ckk * plane];
                    im2col(xb, (cin, h, w), (kh, kw), padding, (ho, wo), &mut col);
                    gemm(cout, plane, ckk, wd, false, &col, false, o, false);
                }
                if let Some(bd) = bd {
                    for (co, chunk) in o.chunks_mut(plane).enumerate() {
                        let bv = bd[co];
                        chunk.iter_mut().for_each(|v| *v += bv);
                    }
                }
            });
        let value = Tensor::from_vec(&[n, cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            },
        ))
    }

    /// 2×2 transposed convolution with stride 2; weight is `[Cin, Cout, 2, 2]`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let (n, cin, h, w) = x.dims4("conv_transpose2d")?;
        let (wcin, cout, kh, kw) = wt.dims4("conv_transpose2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {cin} channels but weight {:?} expects {wcin}", wt.shape()),
            ));
        }
        if (kh, kw) != (2, 2) {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("only 2x2 kernels with stride 2 are supported, got {kh}x{kw}"),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("bias shape {:?}, expected [{cout}]", self.value(b).shape()),
                ));
            }
        }
        let hw = h * w;
        let (ho, wo) = (2 * h, 2 * w);
        let xd = x.data();
        let wd = wt.data();
        let bd = bias.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * cout * ho * wo];
        out.par_chunks_mut(cout * ho * wo)
            .enumerate()
            .for_each(|(b, o)| {
                let xb = &xd[b * cin * hw..(b + 1) * cin * hw];
                let mut tmp = vec![T::zero(); cout * 4 * hw];
                gemm(cout * 4, hw, cin, wd, true, xb, false, &mut tmp, false);
                for co in 0..cout {
                    let bv = bd.map_or(T::zero(), |bd| bd[co]);
                    let oplane = &mut o[co * ho * wo..(co + 1) * ho * wo];
                    for a in 0..2 {
                        for c in 0..2 {
                            let src = &tmp[(co * 4 + a * 2 + c) * hw..][..hw];
                            for i in 0..h {
                                let orow = &mut oplane[(2 * i + a) * wo..(2 * i + a + 1) * wo];
                                for j in 0..w {
                                    orow[2 * j + c] = src[i * w + j] + bv;
                                }
                            }
                        }
                    }
                }
            });
        let value = Tensor::from_vec(&[n, cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
            },
        ))
    }

    /// 2×2 max pooling with stride 2. Ties go to the first maximum in
    /// row-major window order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("maxpool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("spatial extents must be even, got {h}x{w}"),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2d { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { input })
    }

    /// Per-channel batch normalization.
    ///
    /// With `batch_stats` the input is normalized by its own per-channel
    /// statistics and the running estimates are blended towards them as
    /// `running ← momentum·running + (1 − momentum)·batch` (the running
    /// variance uses the unbiased estimate and is floored at `eps`). Without
    /// it the running estimates are used and left untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        momentum: f64,
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("batchnorm2d")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("{name} shape {:?}, expected [{c}]", self.value(v).shape()),
                ));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batchnorm2d",
                format!("running statistics do not have {c} channels"),
            ));
        }
        let plane = h * w;
        let count = n * plane;
        if batch_stats && count < 2 {
            return Err(Error::shape(
                "batchnorm2d",
                "batch statistics need at least two values per channel",
            ));
        }
        let xd = x.data();
        let eps_t = T::of(eps);
        let (mean, inv_std) = if batch_stats {
            let m = T::of(momentum);
            let one_m = T::of(1.0 - momentum);
            let mut mean = Vec::with_capacity(c);
            let mut inv_std = Vec::with_capacity(c);
            for ch in 0..c {
                let values = (0..n).flat_map(|b| &xd[(b * c + ch) * plane..][..plane]);
                let mu = values.clone().copied().sum::<T>() / T::of(count as f64);
                let ss: T = values.map(|&v| (v - mu) * (v - mu)).sum();
                let var = ss / T::of(count as f64);
                let unbiased = ss / T::of((count - 1) as f64);
                running_mean[ch] = m * running_mean[ch] + one_m * mu;
                running_var[ch] = (m * running_var[ch] + one_m * unbiased).max(eps_t);
                mean.push(mu);
                inv_std.push(T::one() / (var + eps_t).sqrt());
            }
            (mean, inv_std)
        } else {
            let inv_std = running_var
                .iter()
                .map(|&v| T::one() / (v + eps_t).sqrt())
                .collect();
            (running_mean.to_vec(), inv_std)
        };
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![T::zero(); xd.len()];
        for (idx, chunk) in out.chunks_mut(plane).enumerate() {
            let ch = idx % c;
            let scale = gd[ch] * inv_std[ch];
            let shift = bd[ch] - mean[ch] * scale;
            for (o, &v) in chunk.iter_mut().zip(&xd[idx * plane..(idx + 1) * plane]) {
                *o = v * scale + shift;
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Concatenates along the channel axis; `a` occupies the first channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!(
                    "cannot concatenate {:?} with {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let plane = ha * wa;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity((ca + cb) * na * plane);
        for s in 0..na {
            out.extend_from_slice(&ad[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&bd[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::from_vec(&[na, ca + cb, ha, wa], out)?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    /// Softmax over the channel axis of an `N×K×H×W` tensor.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, k, h, w) = x.dims4("softmax")?;
        let p = h * w;
        let mut out = vec![T::zero(); x.numel()];
        for b in 0..n {
            let xb = &x.data()[b * k * p..(b + 1) * k * p];
            let lse = log_sum_exp_plane(xb, k, p);
            let ob = &mut out[b * k * p..(b + 1) * k * p];
            for c in 0..k {
                for i in 0..p {
                    ob[c * p + i] = (xb[c * p + i] - lse[i]).exp();
                }
            }
        }
        let value = Tensor::from_vec(&[n, k, h, w], out)?;
        Ok(self.push(value, Op::Softmax { input }))
    }

    /// `−(1/Σw)·Σ w(x)·log p_{l(x)}(x)` over pixels with `mask(x) > 0`,
    /// evaluated through log-sum-exp.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        target: CrossEntropyTarget<'_, T>,
    ) -> Result<Var> {
        let x = self.value(logits);
        let (n, k, h, w) = x.dims4("masked_cross_entropy")?;
        let p = h * w;
        let len = n * p;
        for (name, l) in [
            ("labels", target.labels.len()),
            ("mask", target.mask.len()),
            ("weights", target.weights.len()),
        ] {
            if l != len {
                return Err(Error::shape(
                    "masked_cross_entropy",
                    format!("{name} has {l} entries, logits cover {len} pixels"),
                ));
            }
        }
        let mut total_weight = 0.0f64;
        let mut valid = 0usize;
        for i in 0..len {
            if target.mask[i] == 0 {
                continue;
            }
            valid += 1;
            let wv = target.weights[i];
            if !(wv >= T::zero()) || !wv.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "pixel weight {wv:?} at index {i} is not a finite non-negative value"
                )));
            }
            if target.labels[i] as usize >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {} at index {i} outside 0..{k}",
                    target.labels[i]
                )));
            }
            total_weight += wv.as_f64();
        }
        if valid == 0 {
            return Err(Error::InvalidArgument(
                "cross-entropy needs at least one valid pixel".into(),
            ));
        }
        if total_weight <= 0.0 {
            return Err(Error::InvalidArgument(
                "valid pixels carry zero total weight".into(),
            ));
        }
        let mut acc = 0.0f64;
        for b in 0..n {
            let xb = &x.data()[b * k * p..(b + 1) * k * p];
            let lse = log_sum_exp_plane(xb, k, p);
            for i in 0..p {
                let g = b * p + i;
                if target.mask[g] == 0 {
                    continue;
                }
                let l = target.labels[g] as usize;
                let log_p = xb[l * p + i] - lse[i];
                acc += target.weights[g].as_f64() * log_p.as_f64();
            }
        }
        let value = Tensor::scalar(T::of(-acc / total_weight));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: target.labels.to_vec(),
                mask: target.mask.to_vec(),
                weights: target.weights.to_vec(),
                total_weight: T::of(total_weight),
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    /// `Σ coeffs[i]·x[i]`, a scalar probe used by gradient checks.
    pub fn weighted_sum(&mut self, input: Var, coeffs: Vec<T>) -> Result<Var> {
        let x = self.value(input);
        if coeffs.len() != x.numel() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} coefficients for {} elements", coeffs.len(), x.numel()),
            ));
        }
        let s = x.data().iter().zip(&coeffs).map(|(&a, &c)| a * c).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input, coeffs }))
    }

    pub(crate) fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => self.conv2d_backward(input, weight, bias, padding, g, grads),
            &Op::ConvTranspose2d {
                input,
                weight,
                bias,
            } => self.conv_transpose2d_backward(input, weight, bias, g, grads),
            Op::MaxPool2d { input, argmax } => {
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for (&i, &gv) in argmax.iter().zip(g) {
                        dx[i as usize] += gv;
                    }
                }
            }
            &Op::Relu { input } => {
                if let Some(dx) = self.grad_slot(grads, input) {
                    for ((d, &o), &gv) in dx.iter_mut().zip(node.value.data()).zip(g) {
                        if o > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => self.batchnorm_backward(
                (*input, *gamma, *beta),
                mean,
                inv_std,
                *batch_stats,
                g,
                grads,
            ),
            &Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(a).dims4("concat").expect("recorded 4-D");
                let cb = self.value(b).shape()[1];
                let plane = h * w;
                if let Some(da) = self.grad_slot(grads, a) {
                    for s in 0..n {
                        let src = &g[s * (ca + cb) * plane..][..ca * plane];
                        add_into(&mut da[s * ca * plane..(s + 1) * ca * plane], src);
                    }
                }
                if let Some(db) = self.grad_slot(grads, b) {
                    for s in 0..n {
                        let src = &g[(s * (ca + cb) + ca) * plane..][..cb * plane];
                        add_into(&mut db[s * cb * plane..(s + 1) * cb * plane], src);
                    }
                }
            }
            &Op::Softmax { input } => {
                let (n, k, h, w) = node.value.dims4("softmax").expect("recorded 4-D");
                let p = h * w;
                let probs = node.value.data();
                if let Some(dx) = self.grad_slot(grads, input) {
                    for b in 0..n {
                        let base = b * k * p;
                        for i in 0..p {
                            let dot: T = (0..k)
                                .map(|c| g[base + c * p + i] * probs[base + c * p + i])
                                .sum();
                            for c in 0..k {
                                let at = base + c * p + i;
                                dx[at] += probs[at] * (g[at] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                mask,
                weights,
                total_weight,
            } => {
                let x = self.value(*logits);
                let (n, k, h, w) = x.dims4("cross_entropy").expect("recorded 4-D");
                let p = h * w;
                let upstream = g[0];
                if let Some(dx) = self.grad_slot(grads, *logits) {
                    for b in 0..n {
                        let xb = &x.data()[b * k * p..(b + 1) * k * p];
                        let lse = log_sum_exp_plane(xb, k, p);
                        for i in 0..p {
                            let px = b * p + i;
                            if mask[px] == 0 {
                                continue;
                            }
                            let scale = upstream * weights[px] / *total_weight;
                            let l = labels[px] as usize;
                            for c in 0..k {
                                let prob = (xb[c * p + i] - lse[i]).exp();
                                let onehot = if c == l { T::one() } else { T::zero() };
                                dx[b * k * p + c * p + i] += scale * (prob - onehot);
                            }
                        }
                    }
                }
            }
            &Op::Sum { input } => {
                if let Some(dx) = self.grad_slot(grads, input) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::WeightedSum { input, coeffs } => {
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for (d, &c) in dx.iter_mut().zip(coeffs) {
                        *d += g[0] * c;
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let x = self.value(input);
        let wt = self.value(weight);
        let (n, cin, h, w) = x.dims4("conv2d").expect("recorded 4-D");
        let (cout, _, kh, kw) = wt.dims4("conv2d").expect("recorded 4-D");
        let (ho, wo) = (h + 2 * padding - kh + 1, w + 2 * padding - kw + 1);
        let plane = ho * wo;
        let ckk = cin * kh * kw;
        let direct = kh == 1 && kw == 1 && padding == 0;
        let xd = x.data();

        if let Some(bias) = bias {
            if let Some(db) = self.grad_slot(grads, bias) {
                for b in 0..n {
                    for (co, d) in db.iter_mut().enumerate() {
                        let s: T = g[(b * cout + co) * plane..][..plane].iter().copied().sum();
                        *d += s;
                    }
                }
            }
        }

        let weight_partial = |b: usize, dw: &mut [T], accumulate: bool| {
            let xb = &xd[b * cin * h * w..(b + 1) * cin * h * w];
            let gb = &g[b * cout * plane..(b + 1) * cout * plane];
            if direct {
                gemm(cout, ckk, plane, gb, false, xb, true, dw, accumulate);
                return;
            }
            if !accumulate {
                dw.fill(T::zero());
            }
            // Tiles of whole output rows keep the column block cache-resident;
            // the padded leading dimension avoids power-of-two strides.
            let rows = (2048 / wo).clamp(1, ho);
            let ld = rows * wo + 16;
            let mut col = vec![T::zero(); ckk * ld];
            for oy0 in (0..ho).step_by(rows) {
                let oy1 = (oy0 + rows).min(ho);
                let p = (oy1 - oy0) * wo;
                im2col_rows(xb, (cin, h, w), (kh, kw), padding, wo, (oy0, oy1), ld, &mut col);
                // SAFETY: `gb` rows span `oy0·wo .. oy0·wo + p` within each
                // channel plane and `col` holds `ckk` rows of `ld ≥ p`.
                unsafe {
                    gemm_acc_strided(
                        (cout, ckk, p),
                        &gb[oy0 * wo..],
                        (plane, 1),
                        &col,
                        (1, ld),
                        dw,
                    );
                }
            }
        };
        if let Some(dw) = self.grad_slot(grads, weight) {
            if self.deterministic {
                for b in 0..n {
                    weight_partial(b, dw, true);
                }
            } else {
                let total = (0..n)
                    .into_par_iter()
                    .map(|b| {
                        let mut part = vec![T::zero(); cout * ckk];
                        weight_partial(b, &mut part, false);
                        part
                    })
                    .reduce_with(|mut a, b| {
                        add_into(&mut a, &b);
                        a
                    });
                if let Some(total) = total {
                    add_into(dw, &total);
                }
            }
        }

        let wd = wt.data();
        // A square kernel with padding below its size lets the input gradient
        // run as a forward correlation of `g` with the flipped kernel.
        let flipped = (!direct && kh == kw && padding < kh).then(|| {
            let mut f = vec![T::zero(); cin * cout * kh * kw];
            for co in 0..cout {
                for ci in 0..cin {
                    for i in 0..kh {
                        for j in 0..kw {
                            f[((ci * cout + co) * kh + kh - 1 - i) * kw + kw - 1 - j] =
                                wd[((co * cin + ci) * kh + i) * kw + j];
                        }
                    }
                }
            }
            f
        });
        if let Some(dx) = self.grad_slot(grads, input) {
            dx.par_chunks_mut(cin * h * w)
                .enumerate()
                .for_each(|(b, dxb)| {
                    let gb = &g[b * cout * plane..(b + 1) * cout * plane];
                    if direct {
                        gemm(ckk, plane, cout, wd, true, gb, false, dxb, true);
                    } else if let Some(f) = &flipped {
                        let k2 = cout * kh * kw;
                        let mut col = vec![T::zero(); k2 * h * w];
                        im2col(gb, (cout, ho, wo), (kh, kw), kh - 1 - padding, (h, w), &mut col);
                        gemm(cin, h * w, k2, f, false, &col, false, dxb, true);
                    } else {
                        let mut dcol = vec![T::zero(); ckk * plane];
                        gemm(ckk, plane, cout, wd, true, gb, false, &mut dcol, false);
                        col2im(&dcol, (cin, h, w), (kh, kw), padding, (ho, wo), dxb);
                    }
                });
        }
    }

    fn conv_transpose2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let x = self.value(input);
        let wt = self.value(weight);
        let (n, cin, h, w) = x.dims4("conv_transpose2d").expect("recorded 4-D");
        let cout = wt.shape()[1];
        let hw = h * w;
        let (ho, wo) = (2 * h, 2 * w);
        let xd = x.data();

        // Gather the output gradient into the `(Cout·4)×(H·W)` layout that
        // mirrors the forward product.
        let gather = |b: usize| {
            let gb = &g[b * cout * ho * wo..(b + 1) * cout * ho * wo];
            let mut out = vec![T::zero(); cout * 4 * hw];
            for co in 0..cout {
                for a in 0..2 {
                    for c in 0..2 {
                        let dst = &mut out[(co * 4 + a * 2 + c) * hw..][..hw];
                        for i in 0..h {
                            let row = &gb[co * ho * wo + (2 * i + a) * wo..][..wo];
                            for j in 0..w {
                                dst[i * w + j] = row[2 * j + c];
                            }
                        }
                    }
                }
            }
            out
        };

        if let Some(bias) = bias {
            if let Some(db) = self.grad_slot(grads, bias) {
                for b in 0..n {
                    for (co, d) in db.iter_mut().enumerate() {
                        let s: T = g[(b * cout + co) * ho * wo..][..ho * wo].iter().copied().sum();
                        *d += s;
                    }
                }
            }
        }

        if let Some(dw) = self.grad_slot(grads, weight) {
            let partial = |b: usize, dw: &mut [T], accumulate: bool| {
                let xb = &xd[b * cin * hw..(b + 1) * cin * hw];
                let gb = gather(b);
                gemm(cin, cout * 4, hw, xb, false, &gb, true, dw, accumulate);
            };
            if self.deterministic {
                for b in 0..n {
                    partial(b, dw, true);
                }
            } else {
                let total = (0..n)
                    .into_par_iter()
                    .map(|b| {
                        let mut part = vec![T::zero(); cin * cout * 4];
                        partial(b, &mut part, false);
                        part
                    })
                    .reduce_with(|mut a, b| {
                        add_into(&mut a, &b);
                        a
                    });
                if let Some(total) = total {
                    add_into(dw, &total);
                }
            }
        }

        let wd = wt.data();
        if let Some(dx) = self.grad_slot(grads, input) {
            dx.par_chunks_mut(cin * hw).enumerate().for_each(|(b, dxb)| {
                let gb = gather(b);
                gemm(cin, hw, cout * 4, wd, false, &gb, false, dxb, true);
            });
        }
    }

    fn batchnorm_backward(
        &self,
        (input, gamma, beta): (Var, Var, Var),
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("batchnorm2d").expect("recorded 4-D");
        let plane = h * w;
        let count = T::of((n * plane) as f64);
        let xd = x.data();
        let gd = self.value(gamma).data();

        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * xhat;
                }
            }
        }
        if let Some(dg) = self.grad_slot(grads, gamma) {
            add_into(dg, &sum_gx);
        }
        if let Some(db) = self.grad_slot(grads, beta) {
            add_into(db, &sum_g);
        }
        if let Some(dx) = self.grad_slot(grads, input) {
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    let scale = gd[ch] * inv_std[ch];
                    if batch_stats {
                        let mg = sum_g[ch] / count;
                        let mgx = sum_gx[ch] / count;
                        for i in off..off + plane {
                            let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                            dx[i] += scale * (g[i] - mg - xhat * mgx);
                        }
                    } else {
                        for i in off..off + plane {
                            dx[i] += scale * g[i];
                        }
                    }
                }
            }
        }
    }
}
