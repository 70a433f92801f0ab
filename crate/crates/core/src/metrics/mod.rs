//! PSNR, SSIM and bucketed evaluation of inpainting results.

use std::fmt;

use crate::error::{Error, Result};
use crate::losses::compose;
use crate::masks::{Bucket, ImageSample, Mask};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Images are evaluated in chunks of this many samples.
const EVAL_CHUNK: usize = 8;

fn same_shape(a: &Tensor4<f64>, b: &Tensor4<f64>) -> Result<Shape4> {
    if a.shape() != b.shape() {
        return Err(Error::validation(format!(
            "images differ in shape: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.shape())
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// `10 log10(peak² / MSE)` over every element, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor4<f64>, b: &Tensor4<f64>, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let se: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(psnr_from_mse(se / a.numel() as f64, peak))
}

/// PSNR with the MSE taken over hole pixels (`mask == 0`) of all channels
/// only; `mask` is `(n, 1, h, w)`. Returns the cap when there are no holes.
pub fn hole_psnr(a: &Tensor4<f64>, b: &Tensor4<f64>, mask: &Tensor4<f64>, peak: f64) -> Result<f64> {
    let s = same_shape(a, b)?;
    if mask.shape() != Shape4::new(s.n, 1, s.h, s.w) {
        return Err(Error::validation(format!("mask {} does not match {s}", mask.shape())));
    }
    let (mut se, mut count) = (0.0, 0usize);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    if mask.at(n, 0, y, x) == 0.0 {
                        se += (a.at(n, c, y, x) - b.at(n, c, y, x)).powi(2);
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(psnr_from_mse(se / count as f64, peak))
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        *t = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable valid-region Gaussian filter of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11x11 Gaussian window (σ = 1.5) over the
/// positions where the window fits, dynamic range 1, averaged over
/// channels and batch items.
pub fn ssim(a: &Tensor4<f64>, b: &Tensor4<f64>) -> Result<f64> {
    let s = same_shape(a, b)?;
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::validation(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            s.h, s.w
        )));
    }
    let taps = gaussian_taps();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let plane = s.plane();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            let x = &a.data()[start..start + plane];
            let y = &b.data()[start..start + plane];
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
            let (mx, my) = (filter_valid(x, s.h, s.w, &taps), filter_valid(y, s.h, s.w, &taps));
            let (sxx, syy, sxy) = (
                filter_valid(&xx, s.h, s.w, &taps),
                filter_valid(&yy, s.h, s.w, &taps),
                filter_valid(&xy, s.h, s.w, &taps),
            );
            let mut acc = 0.0;
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                    / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            }
            total += acc / mx.len() as f64;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

/// Mean metrics of one bucket, or of every sample when `bucket` is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub bucket: Option<Bucket>,
    pub psnr_db: f64,
    pub ssim: f64,
    pub count: usize,
}

impl EvalRow {
    pub fn label(&self) -> String {
        self.bucket.map_or_else(|| "ALL".to_string(), |b| b.to_string())
    }
}

/// Rows in bucket order followed by the `ALL` row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn overall(&self) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.bucket.is_none())
    }

    /// `bucket,psnr,ssim,count` lines with a header. Buckets are written
    /// as `lo-hi` so the field holds no comma.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,psnr,ssim,count\n");
        for r in &self.rows {
            let label = r.bucket.map_or_else(
                || "ALL".to_string(),
                |b| {
                    let (lo, hi) = b.bounds();
                    format!("{lo:.2}-{hi:.2}")
                },
            );
            out.push_str(&format!("{label},{:.4},{:.6},{}\n", r.psnr_db, r.ssim, r.count));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>9} {:>8} {:>6}", "bucket", "PSNR", "SSIM", "count")?;
        for r in &self.rows {
            writeln!(f, "{:<14} {:>9.3} {:>8.4} {:>6}", r.label(), r.psnr_db, r.ssim, r.count)?;
        }
        Ok(())
    }
}

/// Evaluates `predict` on every `(sample, mask)` pair. `predict` receives a
/// batch of zero-filled damaged images and their masks and returns the
/// final predictions. Metrics are computed on the prediction composed with
/// the ground truth and clamped to `[0, 1]`.
pub fn evaluate_with<F>(samples: &[ImageSample], masks: &[Mask], mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&Tensor4<f64>, &Tensor4<f64>) -> Result<Tensor4<f64>>,
{
    if samples.len() != masks.len() {
        return Err(Error::config(format!(
            "{} samples but {} masks",
            samples.len(),
            masks.len()
        )));
    }
    let mut scores: Vec<(Option<Bucket>, f64, f64)> = Vec::with_capacity(samples.len());
    for (chunk_s, chunk_m) in samples.chunks(EVAL_CHUNK).zip(masks.chunks(EVAL_CHUNK)) {
        let gts: Vec<&Tensor4<f64>> = chunk_s.iter().map(|s| &s.pixels).collect();
        let gt = crate::masks::synthetic::stack_images::<f64>(&gts)?;
        let mask = crate::masks::stack_masks::<f64>(chunk_m)?;
        let damaged = compose(&Tensor4::zeros(gt.shape()), &gt, &mask)?;
        let pred = predict(&damaged, &mask)?;
        let out = compose(&pred, &gt, &mask)?.map(|v| v.clamp(0.0, 1.0));
        let s = gt.shape();
        for (i, m) in chunk_m.iter().enumerate() {
            let item = |t: &Tensor4<f64>| Tensor4::from_vec(Shape4::new(1, s.c, s.h, s.w), t.item(i).to_vec());
            let (o, g) = (item(&out)?, item(&gt)?);
            scores.push((m.bucket(), psnr(&o, &g, 1.0)?, ssim(&o, &g)?));
        }
    }

    let mut rows = Vec::new();
    let mean_row = |bucket: Option<Bucket>, picked: Vec<&(Option<Bucket>, f64, f64)>| {
        let n = picked.len();
        EvalRow {
            bucket,
            psnr_db: picked.iter().map(|s| s.1).sum::<f64>() / n as f64,
            ssim: picked.iter().map(|s| s.2).sum::<f64>() / n as f64,
            count: n,
        }
    };
    for b in Bucket::all() {
        let picked: Vec<_> = scores.iter().filter(|s| s.0 == Some(b)).collect();
        if !picked.is_empty() {
            rows.push(mean_row(Some(b), picked));
        }
    }
    if !scores.is_empty() {
        rows.push(mean_row(None, scores.iter().collect()));
    }
    Ok(EvalReport { rows })
}

/// [`evaluate_with`] using the last decoder output of `model` in eval mode.
pub fn evaluate_set<T: Scalar>(model: &Model<T>, samples: &[ImageSample], masks: &[Mask]) -> Result<EvalReport> {
    evaluate_with(samples, masks, |img, mask| {
        let outs = model.infer(&img.cast::<T>(), &mask.cast::<T>())?;
        Ok(outs.last().expect("model yields at least one image").cast())
    })
}
