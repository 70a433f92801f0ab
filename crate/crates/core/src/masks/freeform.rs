use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Bucket, Mask, MaskSpec};

/// Upper bound on full redraws before giving up.
pub const MAX_ATTEMPTS: usize = 1000;
/// Overshooting shapes discarded within one attempt before it restarts.
const MAX_RETRIES_PER_ATTEMPT: usize = 24;
/// Shapes drawn in one attempt are capped here.
pub const MAX_SHAPES: usize = 200;
/// Probability that a shape is an ellipse rather than a stroke.
const ELLIPSE_PROB: f64 = 0.2;

/// A generated free-form mask with drawing statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct FreeformDraw {
    pub mask: Mask,
    pub strokes: usize,
    pub ellipses: usize,
    /// Redraws used, starting at 1.
    pub attempts: usize,
}

fn dist2_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (px - cx).powi(2) + (py - cy).powi(2)
}

/// Carves pixels whose centers satisfy `inside` within the box; returns
/// how many valid pixels became holes.
fn carve(mask: &mut Mask, bbox: (f64, f64, f64, f64), inside: impl Fn(f64, f64) -> bool) -> usize {
    let (h, w) = (mask.height(), mask.width());
    let y0 = bbox.1.floor().max(0.0) as usize;
    let x0 = bbox.0.floor().max(0.0) as usize;
    let y1 = (bbox.3.ceil().max(0.0) as usize).min(h);
    let x1 = (bbox.2.ceil().max(0.0) as usize).min(w);
    let mut carved = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            if mask.is_valid(y, x) && inside(x as f64 + 0.5, y as f64 + 0.5) {
                mask.set(y, x, false);
                carved += 1;
            }
        }
    }
    carved
}

fn draw_stroke<R: Rng>(mask: &mut Mask, rng: &mut R, side: f64, scale: f64) {
    let (h, w) = (mask.height() as f64, mask.width() as f64);
    let thickness = (rng.gen_range(side / 40.0..side / 12.0) * scale).max(1.0);
    let vertices = rng.gen_range(4..=8);
    let mut p = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
    let mut angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = thickness / 2.0;
    for _ in 1..vertices {
        angle += rng.gen_range(-1.2..1.2);
        let len = rng.gen_range(side / 10.0..side / 4.0) * scale.sqrt();
        let q = (
            (p.0 + len * angle.cos()).clamp(0.0, w),
            (p.1 + len * angle.sin()).clamp(0.0, h),
        );
        let bbox = (p.0.min(q.0) - r, p.1.min(q.1) - r, p.0.max(q.0) + r, p.1.max(q.1) + r);
        carve(mask, bbox, |x, y| dist2_to_segment(x, y, p, q) <= r * r);
        p = q;
    }
}

fn draw_ellipse<R: Rng>(mask: &mut Mask, rng: &mut R, side: f64, scale: f64) {
    let (h, w) = (mask.height() as f64, mask.width() as f64);
    let rx = (rng.gen_range(side / 20.0..side / 7.0) * scale.sqrt()).max(1.0);
    let ry = (rng.gen_range(side / 20.0..side / 7.0) * scale.sqrt()).max(1.0);
    let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (c, s) = (theta.cos(), theta.sin());
    let rmax = rx.max(ry);
    carve(mask, (cx - rmax, cy - rmax, cx + rmax, cy + rmax), |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
        (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
    });
}

/// Draws strokes and ellipses until the hole ratio enters `bucket`.
/// Shapes that overshoot the bucket are discarded and redrawn; an attempt
/// that keeps overshooting starts over from a valid mask.
pub fn gen_freeform_detailed(h: usize, w: usize, bucket: Bucket, seed: u64) -> Result<FreeformDraw> {
    if h == 0 || w == 0 {
        return Err(Error::validation("mask dims must be positive"));
    }
    let (lo, hi) = bucket.bounds();
    let total = (h * w) as f64;
    let side = h.min(w) as f64;
    // Shape sizes shrink with the bucket width so that single shapes
    // rarely jump over the whole interval.
    let scale = ((hi - lo) / 0.1).min(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=MAX_ATTEMPTS {
        let mut mask = Mask::valid(h, w);
        let (mut strokes, mut ellipses, mut retries) = (0, 0, 0);
        while strokes + ellipses < MAX_SHAPES && retries <= MAX_RETRIES_PER_ATTEMPT {
            let before = mask.clone();
            let ellipse = rng.gen_bool(ELLIPSE_PROB);
            if ellipse {
                draw_ellipse(&mut mask, &mut rng, side, scale);
            } else {
                draw_stroke(&mut mask, &mut rng, side, scale);
            }
            let ratio = mask.holes() as f64 / total;
            if ratio > hi {
                mask = before;
                retries += 1;
                continue;
            }
            if ellipse {
                ellipses += 1;
            } else {
                strokes += 1;
            }
            if ratio > lo {
                return Ok(FreeformDraw {
                    mask,
                    strokes,
                    ellipses,
                    attempts: attempt,
                });
            }
        }
    }
    Err(Error::Generation(format!(
        "no {h}x{w} mask in bucket {bucket} after {MAX_ATTEMPTS} attempts"
    )))
}

/// Free-form mask whose hole ratio lies in `spec.bucket`.
pub fn gen_freeform_mask(h: usize, w: usize, spec: &MaskSpec) -> Result<Mask> {
    gen_freeform_detailed(h, w, spec.bucket, spec.seed).map(|d| d.mask)
}
