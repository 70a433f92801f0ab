use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Mask;

/// Probability of each augmentation being selected.
pub const OP_PROB: f64 = 0.5;
/// Smallest crop side as a fraction of the original side.
pub const MIN_CROP: f64 = 0.7;

/// A concrete choice of augmentations, applied in field order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentOps {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Clockwise quarter turns, `0..=3`; only drawn for square masks.
    pub quarter_turns: u8,
    /// Crop `(y, x, h, w)` resized back to the original size.
    pub crop: Option<(usize, usize, usize, usize)>,
    pub dilate: bool,
}

impl AugmentOps {
    /// Draws every op independently with probability [`OP_PROB`].
    pub fn sample<R: Rng>(h: usize, w: usize, rng: &mut R) -> Self {
        let flip_horizontal = rng.gen_bool(OP_PROB);
        let flip_vertical = rng.gen_bool(OP_PROB);
        let quarter_turns = if h == w && rng.gen_bool(OP_PROB) {
            rng.gen_range(1..=3)
        } else {
            0
        };
        let crop = if rng.gen_bool(OP_PROB) {
            let frac = rng.gen_range(MIN_CROP..1.0);
            let ch = ((h as f64 * frac).round() as usize).clamp(1, h);
            let cw = ((w as f64 * frac).round() as usize).clamp(1, w);
            Some((rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw), ch, cw))
        } else {
            None
        };
        let dilate = rng.gen_bool(OP_PROB);
        AugmentOps {
            flip_horizontal,
            flip_vertical,
            quarter_turns,
            crop,
            dilate,
        }
    }

    pub fn apply(&self, mask: &Mask) -> Mask {
        let mut m = mask.clone();
        if self.flip_horizontal {
            m = m.flip_horizontal();
        }
        if self.flip_vertical {
            m = m.flip_vertical();
        }
        for _ in 0..self.quarter_turns {
            m = m.rotate90();
        }
        if let Some((y0, x0, ch, cw)) = self.crop {
            let (h, w) = (m.height(), m.width());
            let src = m;
            // Nearest-neighbour resize of the crop back to h x w.
            m = Mask::from_fn(h, w, |y, x| {
                let sy = y0 + ((y * ch) / h).min(ch - 1);
                let sx = x0 + ((x * cw) / w).min(cw - 1);
                src.is_valid(sy, sx)
            });
        }
        if self.dilate {
            m = m.dilate_holes();
        }
        m
    }
}

/// Applies a seeded random subset of flips, quarter turns, crop-resize and
/// hole dilation.
pub fn augment_mask(mask: &Mask, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AugmentOps::sample(mask.height(), mask.width(), &mut rng).apply(mask)
}
