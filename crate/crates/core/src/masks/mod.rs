//! Binary masks (1 = valid, 0 = hole), hole-ratio buckets, mask
//! augmentation, procedural training images and anymap file I/O.

pub mod augment;
pub mod freeform;
pub mod io;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

pub use augment::{augment_mask, AugmentOps};
pub use freeform::{gen_freeform_detailed, gen_freeform_mask, FreeformDraw, MAX_ATTEMPTS};
pub use io::{load_image, load_mask, save_image, save_mask, ImageCodec, PnmCodec, Raster};
pub use synthetic::{gen_synthetic_image, ImageSample, Provenance};

/// Hole-ratio intervals `(lo, hi]`.
pub const BUCKETS: [(f64, f64); 6] = [
    (0.01, 0.1),
    (0.1, 0.2),
    (0.2, 0.3),
    (0.3, 0.4),
    (0.4, 0.5),
    (0.5, 0.6),
];

/// Index into [`BUCKETS`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bucket(usize);

impl Bucket {
    pub fn new(index: usize) -> Result<Self> {
        if index < BUCKETS.len() {
            Ok(Bucket(index))
        } else {
            Err(Error::config(format!("bucket index {index} out of range 0..6")))
        }
    }

    pub fn all() -> impl Iterator<Item = Bucket> {
        (0..BUCKETS.len()).map(Bucket)
    }

    pub fn index(&self) -> usize {
        self.0
    }

    pub fn bounds(&self) -> (f64, f64) {
        BUCKETS[self.0]
    }

    pub fn contains(&self, ratio: f64) -> bool {
        let (lo, hi) = self.bounds();
        ratio > lo && ratio <= hi
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (lo, hi) = self.bounds();
        write!(f, "({lo:.2},{hi:.2}]")
    }
}

impl FromStr for Bucket {
    type Err = Error;

    /// Accepts an index `0..=5` or an interval such as `0.2-0.3`.
    fn from_str(s: &str) -> Result<Self> {
        if let Ok(i) = s.parse::<usize>() {
            return Bucket::new(i);
        }
        let parsed = s
            .trim_matches(|c| c == '(' || c == ']')
            .split(['-', ','])
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>();
        if let Ok(v) = parsed {
            if v.len() == 2 {
                if let Some(i) = BUCKETS
                    .iter()
                    .position(|&(lo, hi)| (lo - v[0]).abs() < 1e-9 && (hi - v[1]).abs() < 1e-9)
                {
                    return Ok(Bucket(i));
                }
            }
        }
        Err(Error::config(format!(
            "unknown bucket '{s}' (expected 0-5 or one of 0.01-0.1, 0.1-0.2, ..., 0.5-0.6)"
        )))
    }
}

/// Bucket of a hole ratio; `None` outside `(0.01, 0.6]`.
pub fn bucket_of(ratio: f64) -> Option<Bucket> {
    Bucket::all().find(|b| b.contains(ratio))
}

/// Binary `h`x`w` mask, row-major, 1 = valid and 0 = hole.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn valid(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![1; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(u8::from(f(y, x)));
            }
        }
        Mask { h, w, data }
    }

    /// Builds a mask from 0/1 values.
    pub fn from_values(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::config(format!(
                "{} mask values for a {h}x{w} mask",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::validation("mask values must be 0 or 1"));
        }
        Ok(Mask { h, w, data })
    }

    /// Reads item `n` of a `(n, 1, h, w)` tensor; values must be exactly 0 or 1.
    pub fn from_tensor<T: Scalar>(t: &Tensor4<T>, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c != 1 || n >= s.n {
            return Err(Error::config(format!("cannot read mask item {n} from {s}")));
        }
        let data = t
            .item(n)
            .iter()
            .map(|&v| {
                if v == T::one() {
                    Ok(1)
                } else if v == T::zero() {
                    Ok(0)
                } else {
                    Err(Error::validation("mask must be binary (0 = hole, 1 = valid)"))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Mask { h: s.h, w: s.w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[u8] {
        &self.data
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, valid: bool) {
        self.data[y * self.w + x] = u8::from(valid);
    }

    pub fn holes(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }

    /// Hole pixels over all pixels.
    pub fn hole_ratio(&self) -> f64 {
        self.holes() as f64 / (self.h * self.w) as f64
    }

    pub fn bucket(&self) -> Option<Bucket> {
        bucket_of(self.hole_ratio())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4::from_fn(Shape4::new(1, 1, self.h, self.w), |_, _, y, x| {
            if self.is_valid(y, x) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Mask::from_fn(self.h, self.w, |y, x| self.is_valid(y, self.w - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Mask::from_fn(self.h, self.w, |y, x| self.is_valid(self.h - 1 - y, x))
    }

    /// Clockwise quarter turn.
    pub fn rotate90(&self) -> Self {
        Mask::from_fn(self.w, self.h, |y, x| self.is_valid(self.h - 1 - x, y))
    }

    /// Grows the hole by one pixel with a 3x3 structuring element.
    pub fn dilate_holes(&self) -> Self {
        Mask::from_fn(self.h, self.w, |y, x| {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(self.h - 1));
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(self.w - 1));
            (y0..=y1).all(|yy| (x0..=x1).all(|xx| self.is_valid(yy, xx)))
        })
    }
}

/// Stacks masks into an `(n, 1, h, w)` tensor.
pub fn stack_masks<T: Scalar>(masks: &[Mask]) -> Result<Tensor4<T>> {
    let first = masks.first().ok_or_else(|| Error::config("no masks to stack"))?;
    let (h, w) = (first.h, first.w);
    if masks.iter().any(|m| m.h != h || m.w != w) {
        return Err(Error::config("masks to stack differ in size"));
    }
    Ok(Tensor4::from_fn(Shape4::new(masks.len(), 1, h, w), |n, _, y, x| {
        if masks[n].is_valid(y, x) {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Centered `h/2`x`w/2` hole; ratio exactly 0.25.
pub fn gen_regular_mask(h: usize, w: usize) -> Result<Mask> {
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::validation(format!(
            "regular mask needs positive even dims, got {h}x{w}"
        )));
    }
    let (y0, x0) = (h / 4, w / 4);
    let (y1, x1) = (y0 + h / 2, x0 + w / 2);
    Ok(Mask::from_fn(h, w, |y, x| !(y >= y0 && y < y1 && x >= x0 && x < x1)))
}

/// Kind of mask to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    RegularCenter,
    Freeform,
}

/// Everything that determines a generated mask besides its size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Ignored for [`MaskKind::RegularCenter`].
    pub bucket: Bucket,
    pub seed: u64,
}

pub fn gen_mask(h: usize, w: usize, spec: &MaskSpec) -> Result<Mask> {
    match spec.kind {
        MaskKind::RegularCenter => gen_regular_mask(h, w),
        MaskKind::Freeform => gen_freeform_mask(h, w, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regular_mask_is_quarter_and_symmetric() {
        let m = gen_regular_mask(256, 256).unwrap();
        assert_eq!(m.hole_ratio(), 0.25);
        assert_eq!(m.bucket(), Some(Bucket(2)));
        assert_eq!(m.flip_horizontal(), m);
        assert_eq!(m.flip_vertical(), m);
        assert_eq!(gen_regular_mask(64, 64).unwrap().holes(), 32 * 32);
        assert!(matches!(gen_regular_mask(63, 64), Err(Error::Validation(_))));
    }

    #[test]
    fn bucket_edges_are_half_open() {
        assert_eq!(bucket_of(0.0), None);
        assert_eq!(bucket_of(0.01), None);
        assert_eq!(bucket_of(0.1), Some(Bucket(0)));
        assert_eq!(bucket_of(0.6), Some(Bucket(5)));
        assert_eq!(bucket_of(0.61), None);
        assert_eq!(bucket_of(13.0 / 64.0), Some(Bucket(2)));
    }

    #[test]
    fn bucket_parses_index_and_interval() {
        assert_eq!("3".parse::<Bucket>().unwrap(), Bucket(3));
        assert_eq!("0.2-0.3".parse::<Bucket>().unwrap(), Bucket(2));
        assert_eq!("(0.01,0.1]".parse::<Bucket>().unwrap(), Bucket(0));
        assert!("0.2-0.35".parse::<Bucket>().is_err());
    }

    #[test]
    fn rotation_four_times_is_identity() {
        let m = Mask::from_fn(3, 5, |y, x| (y * 7 + x * 3) % 4 != 0);
        let r = m.rotate90();
        assert_eq!((r.height(), r.width()), (5, 3));
        assert_eq!(r.rotate90().rotate90().rotate90(), m);
    }

    #[test]
    fn tensor_round_trip_and_rejection() {
        let m = Mask::from_fn(4, 4, |y, x| y != x);
        assert_eq!(Mask::from_tensor(&m.to_tensor::<f32>(), 0).unwrap(), m);
        let mut t = m.to_tensor::<f64>();
        t.set(0, 0, 1, 1, 0.5);
        assert!(matches!(Mask::from_tensor(&t, 0), Err(Error::Validation(_))));
    }
}
