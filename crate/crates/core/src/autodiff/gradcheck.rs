//! Central finite-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

use super::{Tape, Var};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Steps tried, in order, for an element whose `±h` evaluations straddle
/// a kink.
pub const KINK_FALLBACK_STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|a − n| / max(1, |a|, |n|)` over all checked elements.
    pub max_rel_err: f64,
    /// Same maximum per input tensor.
    pub per_input: Vec<f64>,
    /// Elements compared.
    pub checked: usize,
    /// Elements whose `±h` evaluations landed on a different side of some
    /// non-differentiable point than the unperturbed one. These are
    /// compared with the largest step in [`KINK_FALLBACK_STEPS`] that stays
    /// on one smooth piece.
    pub kink_crossings: usize,
    /// Elements that straddled a kink even at the smallest fallback step;
    /// their error is still included in the maxima.
    pub unresolved: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(f: &F, inputs: &[Tensor4<f64>], requires_grad: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), requires_grad))
        .collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Value and kink signature of `f(inputs)`.
fn scalar_of<F>(f: &F, inputs: &[Tensor4<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, inputs, false)?;
    Ok((tape.value(out).data()[0], tape.kink_signature()))
}

/// Compares analytic gradients of the scalar `f(inputs)` against central
/// differences with step `h`, at every element of every input.
pub fn grad_check<F>(inputs: &[Tensor4<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(inputs, h, None, 0, f)
}

/// Like [`grad_check`] but compares at most `max_per_input` randomly chosen
/// elements of each input (chosen deterministically from `seed`).
pub fn grad_check_sampled<F>(
    inputs: &[Tensor4<f64>],
    h: f64,
    max_per_input: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = evaluate(&f, inputs, true)?;
    if tape.shape(out).numel() != 1 {
        return Err(Error::config("grad_check needs a scalar function"));
    }
    let grads = tape.backward(out)?;
    let base_signature = tape.kink_signature();
    let analytic: Vec<Tensor4<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor4<f64>> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    let mut kink_crossings = 0;
    let mut unresolved = 0;
    for i in 0..inputs.len() {
        let len = inputs[i].numel();
        let indices: Vec<usize> = match max_per_input {
            Some(m) if m < len => {
                let mut idx = sample(&mut rng, len, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        };
        let mut worst = 0.0f64;
        for j in indices {
            let orig = work[i].data()[j];
            let central = |work: &mut Vec<Tensor4<f64>>, step: f64| -> Result<(f64, bool)> {
                work[i].data_mut()[j] = orig + step;
                let (plus, sig_plus) = scalar_of(&f, work)?;
                work[i].data_mut()[j] = orig - step;
                let (minus, sig_minus) = scalar_of(&f, work)?;
                work[i].data_mut()[j] = orig;
                let smooth = sig_plus == base_signature && sig_minus == base_signature;
                Ok(((plus - minus) / (2.0 * step), smooth))
            };
            let (mut numeric, smooth) = central(&mut work, h)?;
            if !smooth {
                kink_crossings += 1;
                let mut resolved = false;
                for &step in KINK_FALLBACK_STEPS.iter().filter(|&&s| s < h) {
                    let (n, ok) = central(&mut work, step)?;
                    numeric = n;
                    if ok {
                        resolved = true;
                        break;
                    }
                }
                if !resolved {
                    unresolved += 1;
                }
            }
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
            checked += 1;
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_err: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        checked,
        kink_crossings,
        unresolved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn quadratic_passes() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 3), vec![0.3, -1.2, 2.0]).unwrap();
        let report = grad_check(&[x], DEFAULT_STEP, |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.passes(1e-8), "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn leaky_relu_gradient_at_two() {
        let x = Tensor4::scalar(2.0);
        let report = grad_check(&[x], 1e-5, |tape, v| {
            let y = tape.leaky_relu(v[0]);
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn relative_error_uses_unit_floor() {
        assert_eq!(relative_error(1e-3, 0.0), 1e-3);
        assert!((relative_error(10.0, 11.0) - 1.0 / 11.0).abs() < 1e-15);
    }
}
