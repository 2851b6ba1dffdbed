//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

pub mod cases;

use anomaly_ae::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Direct 7-loop cross-correlation over one `[C,H,W]` input.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xi = (c * h + iy as usize) * wd + ix as usize;
                            let wi = ((o * ci + c) * kh + ky) * kw + kx;
                            acc += x.data()[xi] * w.data()[wi];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).unwrap()
}

/// Transposed convolution by scattering each input pixel through the
/// kernel; `w` is `[C_in, C_out, kh, kw]`.
pub fn naive_conv_transpose2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for p in 0..oh * ow {
            out[o * oh * ow + p] = b.data()[o];
        }
    }
    for c in 0..ci {
        for y in 0..h {
            for xx in 0..wd {
                let v = x.data()[(c * h + y) * wd + xx];
                for o in 0..co {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let oy = (y * stride + ky) as isize - pad as isize;
                            let ox = (xx * stride + kx) as isize - pad as isize;
                            if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                continue;
                            }
                            let wi = ((c * co + o) * kh + ky) * kw + kx;
                            out[(o * oh + oy as usize) * ow + ox as usize] += v * w.data()[wi];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).unwrap()
}

/// Max over each non-overlapping `k × k` window, plus the flat input index
/// of the first maximum in row-major scan order.
pub fn brute_max_pool(x: &Tensor<f64>, k: usize) -> (Tensor<f64>, Vec<usize>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::new();
    let mut arg = Vec::new();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = (ch * h + y * k + dy) * w + xx * k + dx;
                        if x.data()[i] > best {
                            best = x.data()[i];
                            bi = i;
                        }
                    }
                }
                out.push(best);
                arg.push(bi);
            }
        }
    }
    (Tensor::new(vec![c, oh, ow], out).unwrap(), arg)
}

/// Fraction of (healthy, diseased) pairs with diseased > healthy, ties ½.
pub fn pairwise_auc(healthy: &[f64], diseased: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &h in healthy {
        for &d in diseased {
            acc += if d > h {
                1.0
            } else if d == h {
                0.5
            } else {
                0.0
            };
        }
    }
    acc / (healthy.len() * diseased.len()) as f64
}

/// KL(N(mu, var) ‖ N(0, 1)) by composite Simpson integration of p log(p/q).
pub fn kl_by_integration(mu: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    let (a, b) = (mu - 14.0 * sd, mu + 14.0 * sd);
    let n = 40_000;
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let logp =
            -0.5 * ((x - mu) * (x - mu) / var) - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        let logq = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
        logp.exp() * (logp - logq)
    };
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
    }
    s * h / 3.0
}

/// Nearest row of `book` (`K × C`, row-major) by exhaustive search; lowest
/// index among exact ties.
pub fn brute_nearest(book: &[f64], dim: usize, fiber: &[f64]) -> usize {
    let dists: Vec<f64> = book
        .chunks(dim)
        .map(|row| row.iter().zip(fiber).map(|(e, x)| (x - e) * (x - e)).sum())
        .collect();
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == min).unwrap()
}

/// Per-pixel channel-mean squared error with two explicit loops.
pub fn loop_pixel_errors(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for ch in 0..c {
                let i = (ch * h + y) * w + x;
                let d = a.data()[i] as f64 - b.data()[i] as f64;
                s += d * d;
            }
            out.push(s / c as f64);
        }
    }
    out
}
