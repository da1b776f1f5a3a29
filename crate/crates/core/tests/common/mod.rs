//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the optimized kernels: every oracle is the
//! textbook loop (or brute force) for the quantity it checks.

#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riunet::loss::masked_weighted_cross_entropy;
use riunet::model::{ModelConfig, UNet};
use riunet::projection::ProjectionConfig;
use riunet::tensor::{CrossEntropyTarget, Graph, Mode, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Largest relative error between analytic gradients and central finite
/// differences (step 1e-5) of the scalar built by `build` over `inputs`.
/// At most `max_probes` entries per input are perturbed, spread evenly.
pub fn finite_difference_error<F>(inputs: &[Tensor<f64>], max_probes: usize, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item().unwrap()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let stride = (input.numel() / max_probes).max(1);
        for j in (0..input.numel()).step_by(stride) {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Quadruple-loop cross-correlation.
pub fn conv2d_direct(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    pad: usize,
) -> Vec<f64> {
    let s = x.shape();
    let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let ws = w.shape();
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let (ho, wo) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
    let xv = |b: usize, c: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
            0.0
        } else {
            x.data()[((b * cin + c) * h + i as usize) * wd + j as usize]
        }
    };
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |t| t.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy + ky) as isize - pad as isize;
                                let ix = (ox + kx) as isize - pad as isize;
                                acc += w.data()[((co * cin + ci) * kh + ky) * kw + kx]
                                    * xv(b, ci, iy, ix);
                            }
                        }
                    }
                    out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Scatter-accumulate 2×2 stride-2 transposed convolution.
pub fn conv_transpose_scatter(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
) -> Vec<f64> {
    let s = x.shape();
    let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let cout = w.shape()[1];
    let (ho, wo) = (2 * h, 2 * wd);
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            let bv = bias.map_or(0.0, |t| t.data()[co]);
            for p in 0..ho * wo {
                out[(b * cout + co) * ho * wo + p] = bv;
            }
        }
        for ci in 0..cin {
            for i in 0..h {
                for j in 0..wd {
                    let v = x.data()[((b * cin + ci) * h + i) * wd + j];
                    for co in 0..cout {
                        for a in 0..2 {
                            for c in 0..2 {
                                let wv = w.data()[((ci * cout + co) * 2 + a) * 2 + c];
                                out[((b * cout + co) * ho + 2 * i + a) * wo + 2 * j + c] += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-window maximum, scanning each window in row-major order.
pub fn maxpool_brute(x: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::new();
    for plane in 0..n * c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let window = [
                    x.data()[plane * h * w + 2 * i * w + 2 * j],
                    x.data()[plane * h * w + 2 * i * w + 2 * j + 1],
                    x.data()[plane * h * w + (2 * i + 1) * w + 2 * j],
                    x.data()[plane * h * w + (2 * i + 1) * w + 2 * j + 1],
                ];
                out.push(window.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    out
}

/// Direct `exp(a_k) / Σ exp(a_k')` without any shift.
pub fn softmax_direct(x: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let (n, k, p) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        for i in 0..p {
            let denom: f64 = (0..k).map(|c| x.data()[(b * k + c) * p + i].exp()).sum();
            for c in 0..k {
                out[(b * k + c) * p + i] = x.data()[(b * k + c) * p + i].exp() / denom;
            }
        }
    }
    out
}

/// Per-pixel scalar evaluation of the masked weighted cross-entropy.
pub fn cross_entropy_scalar(
    logits: &Tensor<f64>,
    labels: &[u8],
    mask: &[u8],
    weights: &[f64],
) -> f64 {
    let s = logits.shape();
    let (n, k, p) = (s[0], s[1], s[2] * s[3]);
    let probs = softmax_direct(logits);
    let (mut num, mut den) = (0.0, 0.0);
    for b in 0..n {
        for i in 0..p {
            let px = b * p + i;
            if mask[px] == 0 {
                continue;
            }
            let l = labels[px] as usize;
            num += weights[px] * probs[(b * k + l) * p + i].ln();
            den += weights[px];
        }
    }
    -num / den
}

pub fn random_labels(len: usize, k: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..len).map(|_| rng.gen_range(0..k)).collect()
}

pub fn random_mask(len: usize, p_valid: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..len).map(|_| u8::from(rng.gen_bool(p_valid))).collect()
}

/// Worst finite-difference error of every differentiable op, each checked on
/// a random weighted sum of its output (the loss directly for
/// cross-entropy).
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let coeff = |n: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    };

    let inputs = vec![
        random_tensor(&[2, 2, 5, 4], &mut r),
        random_tensor(&[3, 2, 3, 3], &mut r),
        random_tensor(&[3], &mut r),
    ];
    let c = coeff(2 * 3 * 5 * 4, &mut r);
    let err = finite_difference_error(&inputs, 60, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1).unwrap();
        g.weighted_sum(y, c.clone()).unwrap()
    });
    out.push(("conv2d", err));

    let inputs = vec![
        random_tensor(&[2, 3, 2, 3], &mut r),
        random_tensor(&[3, 2, 2, 2], &mut r),
        random_tensor(&[2], &mut r),
    ];
    let c = coeff(2 * 2 * 4 * 6, &mut r);
    let err = finite_difference_error(&inputs, 60, |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2])).unwrap();
        g.weighted_sum(y, c.clone()).unwrap()
    });
    out.push(("conv_transpose2d", err));

    let inputs = vec![random_tensor(&[2, 2, 4, 6], &mut r)];
    let c = coeff(2 * 2 * 2 * 3, &mut r);
    let err = finite_difference_error(&inputs, 96, |g, v| {
        let y = g.maxpool2d(v[0]).unwrap();
        g.weighted_sum(y, c.clone()).unwrap()
    });
    out.push(("maxpool2d", err));

    let inputs = vec![random_tensor(&[3, 7], &mut r)];
    let c = coeff(21, &mut r);
    let err = finite_difference_error(&inputs, 21, |g, v| {
        let y = g.relu(v[0]);
        g.weighted_sum(y, c.clone()).unwrap()
    });
    out.push(("relu", err));

    let inputs = vec![random_tensor(&[2, 1, 2, 3], &mut r), random_tensor(&[2, 2, 2, 3], &mut r)];
    let c = coeff(2 * 3 * 6, &mut r);
    let err = finite_difference_error(&inputs, 24, |g, v| {
        let y = g.concat_channels(v[0], v[1]).unwrap();
        g.weighted_sum(y, c.clone()).unwrap()
    });
    out.push(("concat", err));

    let inputs = vec![random_tensor(&[2, 4, 2, 3], &mut r)];
    let c = coeff(48, &mut r);
    let err = finite_difference_error(&inputs, 48, |g, v| {
        let y = g.softmax_channels(v[0]).unwrap();
        g.weighted_sum(y, c.clone()).unwrap()
    });
    out.push(("softmax", err));

    let inputs = vec![random_tensor(&[2, 3, 3, 3], &mut r)];
    let labels = random_labels(18, 3, &mut r);
    let mut mask = random_mask(18, 0.7, &mut r);
    mask[0] = 1;
    let weights: Vec<f64> = (0..18).map(|_| r.gen_range(0.5..3.0)).collect();
    let err = finite_difference_error(&inputs, 54, |g, v| {
        g.masked_cross_entropy(
            v[0],
            CrossEntropyTarget {
                labels: &labels,
                mask: &mask,
                weights: &weights,
            },
        )
        .unwrap()
    });
    out.push(("cross-entropy", err));

    let inputs = vec![
        random_tensor(&[2, 2, 3, 3], &mut r),
        Tensor::uniform(&[2], 0.5, 1.5, &mut r),
        random_tensor(&[2], &mut r),
    ];
    let c = coeff(36, &mut r);
    for (name, training) in [("batchnorm2d/train", true), ("batchnorm2d/eval", false)] {
        let err = finite_difference_error(&inputs, 100, |g, v| {
            let (mut rm, mut rv) = (vec![0.1, -0.2], vec![0.5, 2.0]);
            let y = g
                .batchnorm2d(v[0], v[1], v[2], &mut rm, &mut rv, 0.99, 1e-5, training)
                .unwrap();
            g.weighted_sum(y, c.clone()).unwrap()
        });
        out.push((name, err));
    }

    let inputs = vec![random_tensor(&[2, 3, 2], &mut r)];
    let err = finite_difference_error(&inputs, 12, |g, v| {
        let y = g.relu(v[0]);
        g.sum(y)
    });
    out.push(("sum", err));
    out
}

/// Worst relative error between backpropagated and central-difference
/// gradients of the masked loss of a depth-1, base-2, 2-class network on a
/// `2×2×8×16` input, over a spread of parameters and input entries; also
/// returns how many entries were probed.
pub fn toy_network_fd_error(seed: u64) -> (f64, usize) {
    let c = ModelConfig {
        in_channels: 2,
        num_classes: 2,
        depth_levels: 1,
        base_features: 2,
        input_height: 8,
        input_width: 16,
    };
    let model = UNet::<f64>::build(c, seed).unwrap();
    let mut r = rng(seed + 1);
    let x = Tensor::<f64>::uniform(&[2, 2, 8, 16], -1.0, 1.0, &mut r);
    let labels: Vec<u8> = (0..2 * 8 * 16).map(|_| r.gen_range(0..2)).collect();
    let mask: Vec<u8> = (0..labels.len()).map(|_| u8::from(r.gen_bool(0.8))).collect();
    let weights: Vec<f64> = (0..labels.len()).map(|_| r.gen_range(0.5..2.0)).collect();

    let loss_of = |m: &UNet<f64>, x: &Tensor<f64>| -> f64 {
        let mut m = m.clone();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pass = m.forward(&mut g, xv, Mode::Train).unwrap();
        let l = masked_weighted_cross_entropy(&mut g, pass.logits, &labels, &mask, &weights).unwrap();
        g.value(l.value).item().unwrap()
    };

    let mut m = model.clone();
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let pass = m.forward(&mut g, xv, Mode::Train).unwrap();
    let l = masked_weighted_cross_entropy(&mut g, pass.logits, &labels, &mask, &weights).unwrap();
    let mut grads = g.backward(l.value).unwrap();
    let x_grad = grads.get(xv).unwrap().clone();
    m.collect_grads(&pass, &mut grads).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (pi, p) in m.parameters().iter().enumerate() {
        let n = p.value.numel();
        for j in (0..n).step_by((n / 6).max(1)) {
            let perturbed = |delta: f64| {
                let mut q = model.clone();
                q.parameters_mut()[pi].value.data_mut()[j] += delta;
                loss_of(&q, &x)
            };
            let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let analytic = p.grad.as_ref().unwrap().data()[j];
            worst = worst.max(rel_err(analytic, numeric));
            checked += 1;
        }
    }
    for j in (0..x.numel()).step_by(17) {
        let mut xp = x.clone();
        xp.data_mut()[j] += h;
        let mut xm = x.clone();
        xm.data_mut()[j] -= h;
        let numeric = (loss_of(&model, &xp) - loss_of(&model, &xm)) / (2.0 * h);
        worst = worst.max(rel_err(x_grad.data()[j], numeric));
        checked += 1;
    }
    (worst, checked)
}

/// All-pairs distances to the nearest and second-nearest label region.
pub fn distances_brute(labels: &[u8], mask: &[u8], h: usize, w: usize) -> Vec<(f64, f64)> {
    let classes: HashSet<u8> = (0..h * w).filter(|&i| mask[i] == 1).map(|i| labels[i]).collect();
    (0..h * w)
        .map(|i| {
            let mut per_class: Vec<f64> = classes
                .iter()
                .map(|&c| {
                    (0..h * w)
                        .filter(|&j| mask[j] == 1 && labels[j] == c)
                        .map(|j| {
                            let dy = (i / w) as f64 - (j / w) as f64;
                            let dx = (i % w) as f64 - (j % w) as f64;
                            (dy * dy + dx * dx).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            per_class.sort_by(f64::total_cmp);
            per_class.resize(2, f64::INFINITY);
            (per_class[0], per_class[1])
        })
        .collect()
}

/// Column and row found by scanning the bin edges.
pub fn bin_by_scan(cfg: &ProjectionConfig, p: [f32; 3]) -> Option<(usize, usize)> {
    let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
    let d = (x * x + y * y + z * z).sqrt();
    if d == 0.0 {
        return None;
    }
    let theta = y.atan2(x);
    let phi = (z / d).asin();
    let dt = (cfg.theta_max - cfg.theta_min) / cfg.width as f64;
    let dp = (cfg.phi_max - cfg.phi_min) / cfg.height as f64;
    let col = (0..cfg.width).find(|&c| {
        let lo = cfg.theta_min + c as f64 * dt;
        theta >= lo && theta < lo + dt
    })?;
    let row = (0..cfg.height).find(|&r| {
        let hi = cfg.phi_max - r as f64 * dp;
        phi <= hi && phi > hi - dp
    })?;
    Some((row, col))
}
