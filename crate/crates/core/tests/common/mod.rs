//! Shared fixtures and brute-force oracles for the integration tests.
//! The oracles are written independently of the library kernels: direct
//! nested loops over the defining sums.
#![allow(dead_code)]

use madf_core::{Shape4, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn t(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor4<f64> {
    Tensor4::from_vec(Shape4::new(n, c, h, w), data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: Shape4, seed: u64) -> Tensor4<f64> {
    Tensor4::randn(shape, 1.0, &mut rng(seed))
}

fn padded(x: &Tensor4<f64>, n: usize, c: usize, y: isize, xx: isize) -> f64 {
    let s = x.shape();
    if y < 0 || xx < 0 || y as usize >= s.h || xx as usize >= s.w {
        0.0
    } else {
        x.at(n, c, y as usize, xx as usize)
    }
}

/// Six nested loops over `out[n, co, i, j] = Σ w[co, ci, kh, kw] · x[n, ci, i·s + kh − pad, j·s + kw − pad]`.
pub fn naive_conv2d(x: &Tensor4<f64>, w: &Tensor4<f64>, s: usize, pad: usize) -> Tensor4<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let oh = (xs.h + 2 * pad - k) / s + 1;
    let ow = (xs.w + 2 * pad - k) / s + 1;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for co in 0..ws.n {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..xs.c {
                        for kh in 0..k {
                            for kw in 0..k {
                                let y = (i * s + kh) as isize - pad as isize;
                                let xx = (j * s + kw) as isize - pad as isize;
                                acc += w.at(co, ci, kh, kw) * padded(x, n, ci, y, xx);
                            }
                        }
                    }
                    out.set(n, co, i, j, acc);
                }
            }
        }
    }
    out
}

/// Scatter-add: every input pixel deposits `x · w[ci, co]` at stride `s`
/// into an uncropped canvas, which is then cropped by `pad` per side.
/// `w` has shape `(c_in, c_out, k, k)`.
pub fn naive_conv_transpose2d(x: &Tensor4<f64>, w: &Tensor4<f64>, s: usize, pad: usize) -> Tensor4<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let full_h = (xs.h - 1) * s + k;
    let full_w = (xs.w - 1) * s + k;
    let mut canvas = Tensor4::zeros(Shape4::new(xs.n, ws.c, full_h, full_w));
    for n in 0..xs.n {
        for ci in 0..xs.c {
            for y in 0..xs.h {
                for xx in 0..xs.w {
                    for co in 0..ws.c {
                        for kh in 0..k {
                            for kw in 0..k {
                                let (cy, cx) = (y * s + kh, xx * s + kw);
                                let v = canvas.at(n, co, cy, cx) + x.at(n, ci, y, xx) * w.at(ci, co, kh, kw);
                                canvas.set(n, co, cy, cx, v);
                            }
                        }
                    }
                }
            }
        }
    }
    let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
    Tensor4::from_fn(Shape4::new(xs.n, ws.c, oh, ow), |n, c, y, xx| canvas.at(n, c, y + pad, xx + pad))
}

/// Index of tap `(ci, kh, kw, co)` inside a window kernel of length
/// `c_in·k·k·c_out`.
pub fn theta_index(ci: usize, kh: usize, kw: usize, co: usize, k: usize, c_out: usize) -> usize {
    ((ci * k + kh) * k + kw) * c_out + co
}

/// Per-window loop: window `(i, j)` of item `n` uses its own kernel
/// `theta[n, :, i, j]`.
pub fn naive_dynamic_conv(x: &Tensor4<f64>, theta: &Tensor4<f64>, k: usize, s: usize, pad: usize, c_out: usize) -> Tensor4<f64> {
    let (xs, ts) = (x.shape(), theta.shape());
    let mut out = Tensor4::zeros(Shape4::new(xs.n, c_out, ts.h, ts.w));
    for n in 0..xs.n {
        for i in 0..ts.h {
            for j in 0..ts.w {
                for co in 0..c_out {
                    let mut acc = 0.0;
                    for ci in 0..xs.c {
                        for kh in 0..k {
                            for kw in 0..k {
                                let y = (i * s + kh) as isize - pad as isize;
                                let xx = (j * s + kw) as isize - pad as isize;
                                acc += theta.at(n, theta_index(ci, kh, kw, co, k, c_out), i, j) * padded(x, n, ci, y, xx);
                            }
                        }
                    }
                    out.set(n, co, i, j, acc);
                }
            }
        }
    }
    out
}

/// Per-channel mean and biased variance over `(n, h, w)`, two passes.
pub fn channel_stats(x: &Tensor4<f64>) -> Vec<(f64, f64)> {
    let s = x.shape();
    let count = (s.n * s.h * s.w) as f64;
    (0..s.c)
        .map(|c| {
            let mut sum = 0.0;
            for n in 0..s.n {
                for y in 0..s.h {
                    for xx in 0..s.w {
                        sum += x.at(n, c, y, xx);
                    }
                }
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for n in 0..s.n {
                for y in 0..s.h {
                    for xx in 0..s.w {
                        sq += (x.at(n, c, y, xx) - mean).powi(2);
                    }
                }
            }
            (mean, sq / count)
        })
        .collect()
}

/// `(x − μ_c) / sqrt(σ²_c + eps)` with batch statistics.
pub fn naive_batch_norm(x: &Tensor4<f64>, eps: f64) -> Tensor4<f64> {
    let stats = channel_stats(x);
    Tensor4::from_fn(x.shape(), |n, c, y, xx| {
        let (m, v) = stats[c];
        (x.at(n, c, y, xx) - m) / (v + eps).sqrt()
    })
}

/// Random binary mask tensor `(n, 1, h, w)` with roughly `hole` fraction of zeros.
pub fn random_mask(n: usize, h: usize, w: usize, hole: f64, seed: u64) -> Tensor4<f64> {
    use rand::Rng;
    let mut r = rng(seed);
    Tensor4::from_fn(Shape4::new(n, 1, h, w), |_, _, _, _| if r.gen::<f64>() < hole { 0.0 } else { 1.0 })
}
