use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::masks::synthetic::stack_images;
use crate::masks::{
    gen_freeform_mask, gen_synthetic_image, stack_masks, AugmentOps, Bucket, ImageSample, Mask, MaskKind, MaskSpec,
    BUCKETS,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Independent seed streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Images = 1,
    Batches = 2,
    EvalMasks = 3,
    Init = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for item `index` of `stream`; a pure function of its arguments.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream as u64) ^ index)
}

/// One training batch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// Dataset indices of the images.
    pub indices: Vec<usize>,
    pub masks: Vec<Mask>,
    pub ground_truth: Tensor4<T>,
    pub mask: Tensor4<T>,
    /// Ground truth with holes zeroed.
    pub damaged: Tensor4<T>,
}

/// Fixed set of synthetic training images plus the held-out eval masks.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub seed: u64,
    pub images: Vec<ImageSample>,
    pub augment: bool,
}

impl Dataset {
    pub fn synthetic(h: usize, w: usize, size: usize, seed: u64, augment: bool) -> Self {
        let images = (0..size)
            .map(|i| gen_synthetic_image(h, w, derive_seed(seed, Stream::Images, i as u64)))
            .collect();
        Dataset { seed, images, augment }
    }

    pub fn hw(&self) -> (usize, usize) {
        let first = &self.images[0];
        (first.height(), first.width())
    }

    /// Batch of iteration `t` (0-based); depends only on the seed and `t`.
    pub fn batch<T: Scalar>(&self, t: u64, size: usize) -> Result<Batch<T>> {
        let (h, w) = self.hw();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, Stream::Batches, t));
        let mut indices = Vec::with_capacity(size);
        let mut masks = Vec::with_capacity(size);
        for _ in 0..size {
            indices.push(rng.gen_range(0..self.images.len()));
            let spec = MaskSpec {
                kind: MaskKind::Freeform,
                bucket: Bucket::new(rng.gen_range(0..BUCKETS.len()))?,
                seed: rng.gen(),
            };
            let mut mask = gen_freeform_mask(h, w, &spec)?;
            if self.augment {
                mask = AugmentOps::sample(h, w, &mut rng).apply(&mask);
            }
            masks.push(mask);
        }
        let gts: Vec<&Tensor4<f64>> = indices.iter().map(|&i| &self.images[i].pixels).collect();
        let gt = stack_images::<f64>(&gts)?;
        let mask = stack_masks::<f64>(&masks)?;
        let damaged = crate::losses::compose(&Tensor4::zeros(gt.shape()), &gt, &mask)?;
        Ok(Batch {
            indices,
            masks,
            ground_truth: gt.cast(),
            mask: mask.cast(),
            damaged: damaged.cast(),
        })
    }

    /// `count` held-out free-form masks, cycling through the buckets, paired
    /// with the first images of the set.
    pub fn eval_set(&self, count: usize) -> Result<(Vec<ImageSample>, Vec<Mask>)> {
        let (h, w) = self.hw();
        let mut samples = Vec::with_capacity(count);
        let mut masks = Vec::with_capacity(count);
        for i in 0..count {
            samples.push(self.images[i % self.images.len()].clone());
            let spec = MaskSpec {
                kind: MaskKind::Freeform,
                bucket: Bucket::new(i % BUCKETS.len())?,
                seed: derive_seed(self.seed, Stream::EvalMasks, i as u64),
            };
            masks.push(gen_freeform_mask(h, w, &spec)?);
        }
        Ok((samples, masks))
    }
}
