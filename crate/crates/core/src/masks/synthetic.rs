use std::f64::consts::TAU;
use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Where an image came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Synthetic(u64),
    File(PathBuf),
}

/// RGB image `(1, 3, h, w)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor4<f64>,
    pub provenance: Provenance,
}

impl ImageSample {
    pub fn new(pixels: Tensor4<f64>, provenance: Provenance) -> Result<Self> {
        let s = pixels.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::config(format!("image sample must be 1x3xHxW, got {s}")));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("image values must lie in [0, 1]"));
        }
        Ok(ImageSample { pixels, provenance })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape().h
    }

    pub fn width(&self) -> usize {
        self.pixels.shape().w
    }
}

/// Stacks `(1, 3, h, w)` images into `(n, 3, h, w)`.
pub fn stack_images<T: Scalar>(images: &[&Tensor4<f64>]) -> Result<Tensor4<T>> {
    let first = images.first().ok_or_else(|| Error::config("no images to stack"))?;
    let s = first.shape();
    if images.iter().any(|i| i.shape() != s) || s.n != 1 {
        return Err(Error::config("images to stack differ in shape"));
    }
    let mut data = Vec::with_capacity(images.len() * s.numel());
    for img in images {
        data.extend(img.data().iter().map(|&v| T::from_f64(v)));
    }
    Tensor4::from_vec(Shape4::new(images.len(), s.c, s.h, s.w), data)
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
        }
    }
}

struct Wave {
    amp: [f64; 3],
    fy: f64,
    fx: f64,
    phase: f64,
}

/// Procedural image: a linear color gradient, 2-4 sinusoidal texture
/// fields and 1-3 solid rectangles or ellipses, clamped to `[0, 1]`.
pub fn gen_synthetic_image(h: usize, w: usize, seed: u64) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let c1: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let dir = rng.gen_range(0.0..TAU);
    let (gy, gx) = (dir.sin(), dir.cos());

    let waves: Vec<Wave> = (0..rng.gen_range(2..=4))
        .map(|_| {
            let freq = rng.gen_range(1.0..6.0);
            let a = rng.gen_range(0.0..TAU);
            Wave {
                amp: [
                    rng.gen_range(0.03..0.15),
                    rng.gen_range(0.03..0.15),
                    rng.gen_range(0.03..0.15),
                ],
                fy: freq * a.sin() / h as f64,
                fx: freq * a.cos() / w as f64,
                phase: rng.gen_range(0.0..TAU),
            }
        })
        .collect();

    let shapes: Vec<(Shape, [f64; 3])> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let (hf, wf) = (h as f64, w as f64);
            let shape = if rng.gen_bool(0.5) {
                let (y0, x0) = (rng.gen_range(0.0..hf * 0.8), rng.gen_range(0.0..wf * 0.8));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.gen_range(hf * 0.1..hf * 0.4),
                    x1: x0 + rng.gen_range(wf * 0.1..wf * 0.4),
                }
            } else {
                Shape::Ellipse {
                    cy: rng.gen_range(0.0..hf),
                    cx: rng.gen_range(0.0..wf),
                    ry: rng.gen_range(hf * 0.06..hf * 0.25),
                    rx: rng.gen_range(wf * 0.06..wf * 0.25),
                }
            };
            (shape, [rng.gen(), rng.gen(), rng.gen()])
        })
        .collect();

    let pixels = Tensor4::from_fn(Shape4::new(1, 3, h, w), |_, c, y, x| {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let t = 0.5 + 0.5 * ((yf / h as f64 - 0.5) * gy + (xf / w as f64 - 0.5) * gx) * std::f64::consts::SQRT_2;
        let mut v = c0[c] + (c1[c] - c0[c]) * t.clamp(0.0, 1.0);
        for wave in &waves {
            v += wave.amp[c] * (TAU * (wave.fy * yf + wave.fx * xf) + wave.phase).sin();
        }
        for (shape, color) in &shapes {
            if shape.contains(yf, xf) {
                v = color[c];
            }
        }
        v.clamp(0.0, 1.0)
    });
    ImageSample {
        pixels,
        provenance: Provenance::Synthetic(seed),
    }
}
