use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Shape4, Tensor4};

/// Seed of the default frozen feature network.
pub const FEATURE_NET_SEED: u64 = 0x5eed_f00d;
/// Output channels of the three stages.
pub const FEATURE_CHANNELS: [usize; 3] = [16, 32, 64];

/// Source of the feature taps `Ψ_p` used by the perceptual and style losses.
pub trait FeatureBackbone {
    /// Number of taps `P`.
    fn taps(&self) -> usize;

    /// Records the taps of `img` on `tape`. Backbone weights must enter the
    /// tape as constants so that only the image receives gradient.
    fn features<T: Scalar>(&self, tape: &mut Tape<T>, img: Var) -> Result<Vec<Var>>;
}

/// Frozen three-stage network: `(conv3x3 -> relu -> avgpool2x)` per stage,
/// one tap after every pool. Weights are He-normal from a fixed seed.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    weights: Vec<Tensor4<f64>>,
}

impl FeatureNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let weights = FEATURE_CHANNELS
            .iter()
            .map(|&c_out| {
                let std = (2.0 / (c_in * 9) as f64).sqrt();
                let w = Tensor4::randn(Shape4::new(c_out, c_in, 3, 3), std, &mut rng);
                c_in = c_out;
                w
            })
            .collect();
        FeatureNet { weights }
    }

    pub fn weights(&self) -> &[Tensor4<f64>] {
        &self.weights
    }
}

impl Default for FeatureNet {
    fn default() -> Self {
        FeatureNet::new(FEATURE_NET_SEED)
    }
}

impl FeatureBackbone for FeatureNet {
    fn taps(&self) -> usize {
        self.weights.len()
    }

    fn features<T: Scalar>(&self, tape: &mut Tape<T>, img: Var) -> Result<Vec<Var>> {
        let s = tape.shape(img);
        let div = 1 << self.weights.len();
        if s.c != 3 || s.h % div != 0 || s.w % div != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::validation(format!(
                "feature network needs 3-channel images with sides divisible by {div}, got {s}"
            )));
        }
        let mut x = img;
        let mut taps = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let ws = w.shape();
            let wv = tape.constant(w.cast());
            let pre = tape.conv2d(x, wv, None, ConvSpec::same(ws.c, ws.n, 3)?)?;
            let act = tape.relu(pre);
            x = tape.avg_pool2x(act)?;
            taps.push(x);
        }
        Ok(taps)
    }
}
