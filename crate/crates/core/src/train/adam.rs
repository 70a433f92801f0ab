use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::scalar::Scalar;

/// Adam hyper-parameters. Weight decay is always zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments of every store entry (empty for non-trainable entries).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Completed steps.
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |p: &crate::model::Param<T>| {
            if p.trainable {
                vec![T::zero(); p.value.numel()]
            } else {
                Vec::new()
            }
        };
        AdamState {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    /// One bias-corrected update. `grads[i]` is the gradient of store entry
    /// `i`; entries without a gradient are skipped and keep their moments.
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Internal(format!(
                "{} gradients / {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.entry(i);
            if !p.trainable || g.len() != p.value.numel() {
                return Err(Error::Internal(format!(
                    "unexpected gradient for parameter {}",
                    p.name
                )));
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {} at element {bad}",
                    p.name
                )));
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powf(self.t as f64));
        let bc2 = T::from_f64(1.0 - c.beta2.powf(self.t as f64));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let theta = params.entry_mut(i).value.data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta[j] = theta[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
