//! Finite-difference gradient suites covering every differentiable
//! operation, the layers built from them, the losses and a whole micro
//! network.
//!
//! Each suite reduces its outputs to a scalar through fixed random
//! projections and rescales it so the largest analytic gradient has
//! magnitude one; the reported error is then relative to the gradient
//! scale of the suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{grad_check_sampled, DEFAULT_STEP};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{batch_norm, madf_conv, mask_branch_step, point_norm, BnState, MadfLayerParams, MadfSpec, PnParams};
use crate::losses::{
    compose_var, loss_hole, loss_perceptual, loss_style, loss_tv, loss_valid, supervision_losses, FeatureNet,
    LossWeights, Schedule, FEATURE_NET_SEED,
};
use crate::model::{BoundParams, Mode, Model, ModelConfig};
use crate::tensor::{ConvSpec, PadMode, Shape4, Tensor4};

/// Tolerance for single primitive operations.
pub const PLAIN_TOL: f64 = 1e-5;
/// Tolerance for layers, losses and the network.
pub const COMPOSITE_TOL: f64 = 1e-4;

/// Suite names in execution order.
pub const SUITES: [&str; 19] = [
    "conv2d",
    "conv_transpose2d",
    "activations",
    "concat",
    "upsample",
    "avg_pool",
    "elementwise",
    "reductions",
    "batch_norm",
    "point_norm",
    "mask_branch_step",
    "madf_conv",
    "loss_hole",
    "loss_valid",
    "loss_perceptual",
    "loss_style",
    "loss_tv",
    "micro_model",
    "micro_model_batch_norm",
];

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Elements compared.
    pub checked: usize,
    /// Compared elements whose `±h` finite difference straddled a kink and
    /// were compared at a smaller step instead.
    pub kink_crossings: usize,
    /// Elements that straddled a kink at every step tried.
    pub unresolved: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rng(salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xc0ffee ^ salt)
}

fn randn(shape: Shape4, r: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::randn(shape, 1.0, r)
}

/// Values with magnitude in `[0.2, 1]`, away from activation kinks.
fn away_from_zero(shape: Shape4, r: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| {
        let v = r.gen_range(0.2..1.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn binary_mask(n: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(Shape4::new(n, 1, h, w), |_, _, _, _| if r.gen_bool(0.6) { 1.0 } else { 0.0 })
}

/// `Σ y ⊙ R` for a fixed random `R` derived from `salt`.
fn project(tape: &mut Tape<f64>, y: Var, salt: u64) -> Result<Var> {
    let r = randn(tape.shape(y), &mut rng(0x9e37 ^ salt));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn project_all(tape: &mut Tape<f64>, ys: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(ys.len());
    for (i, &y) in ys.iter().enumerate() {
        terms.push((project(tape, y, i as u64)?, 1.0));
    }
    tape.weighted_sum(&terms)
}

fn largest_gradient<F>(inputs: &[Tensor4<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .flat_map(|&v| grads.wrt(v).into_vec())
        .fold(0.0f64, |m, g| m.max(g.abs())))
}

fn check<F>(
    name: &'static str,
    inputs: &[Tensor4<f64>],
    tolerance: f64,
    max_per_input: Option<usize>,
    f: F,
) -> Result<SuiteResult>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let g = largest_gradient(inputs, &f)?;
    if !(g.is_finite() && g > 0.0) {
        return Err(Error::Numeric(format!("suite {name} has no usable gradient (max |g| = {g})")));
    }
    let scale = 1.0 / g;
    let report = grad_check_sampled(inputs, DEFAULT_STEP, max_per_input, 7, |tape, vars| {
        let y = f(tape, vars)?;
        Ok(tape.scale(y, scale))
    })?;
    Ok(SuiteResult {
        name,
        max_rel_err: report.max_rel_err,
        tolerance,
        checked: report.checked,
        kink_crossings: report.kink_crossings,
        unresolved: report.unresolved,
    })
}

pub fn run_suite(name: &str) -> Result<SuiteResult> {
    let Some(&name) = SUITES.iter().find(|&&s| s == name) else {
        return Err(Error::config(format!(
            "unknown gradient suite '{name}' (known: {})",
            SUITES.join(", ")
        )));
    };
    let mut r = rng(SUITES.iter().position(|&s| s == name).unwrap_or(0) as u64);
    match name {
        "conv2d" => {
            let zero = ConvSpec::new(3, 4, 3, 2, 1)?;
            let repl = ConvSpec::new(3, 4, 3, 1, 1)?.with_pad_mode(PadMode::Replicate);
            let inputs = [
                randn(Shape4::new(2, 3, 7, 6), &mut r),
                randn(zero.weight_shape(), &mut r),
                randn(Shape4::new(1, 4, 1, 1), &mut r),
            ];
            check(name, &inputs, PLAIN_TOL, None, |t, v| {
                let a = t.conv2d(v[0], v[1], Some(v[2]), zero)?;
                let b = t.conv2d(v[0], v[1], None, repl)?;
                project_all(t, &[a, b])
            })
        }
        "conv_transpose2d" => {
            let spec = ConvSpec::new(3, 2, 4, 2, 1)?;
            let inputs = [
                randn(Shape4::new(2, 3, 3, 4), &mut r),
                randn(spec.transpose_weight_shape(), &mut r),
                randn(Shape4::new(1, 2, 1, 1), &mut r),
            ];
            check(name, &inputs, PLAIN_TOL, None, |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), spec)?;
                project(t, y, 0)
            })
        }
        "activations" => {
            let inputs = [away_from_zero(Shape4::new(2, 3, 4, 4), &mut r)];
            check(name, &inputs, PLAIN_TOL, None, |t, v| {
                let a = t.relu(v[0]);
                let b = t.leaky_relu(v[0]);
                project_all(t, &[a, b])
            })
        }
        "concat" => {
            let inputs = [
                randn(Shape4::new(2, 2, 3, 3), &mut r),
                randn(Shape4::new(2, 3, 3, 3), &mut r),
            ];
            check(name, &inputs, PLAIN_TOL, None, |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                project(t, y, 0)
            })
        }
        "upsample" => {
            let inputs = [randn(Shape4::new(2, 3, 3, 4), &mut r)];
            check(name, &inputs, PLAIN_TOL, None, |t, v| {
                let y = t.upsample_nearest2x(v[0]);
                project(t, y, 0)
            })
        }
        "avg_pool" => {
            let inputs = [randn(Shape4::new(2, 3, 4, 6), &mut r)];
            check(name, &inputs, PLAIN_TOL, None, |t, v| {
                let y = t.avg_pool2x(v[0])?;
                project(t, y, 0)
            })
        }
        "elementwise" => {
            let s = Shape4::new(2, 3, 3, 3);
            let (cs, sh) = (randn(s, &mut r), randn(s, &mut r));
            let inputs = [
                randn(s, &mut r),
                randn(s, &mut r),
                randn(Shape4::new(1, 3, 1, 1), &mut r),
                randn(Shape4::new(1, 3, 1, 1), &mut r),
            ];
            check(name, &inputs, PLAIN_TOL, None, |t, v| {
                let a = t.add(v[0], v[1])?;
                let m = t.mul(v[0], v[1])?;
                let sc = t.scale(v[1], 1.7);
                let ca = t.channel_affine(v[0], v[2], v[3])?;
                let ka = t.const_affine(v[1], &cs, &sh)?;
                project_all(t, &[a, m, sc, ca, ka])
            })
        }
        "reductions" => {
            let s = Shape4::new(2, 3, 4, 4);
            let weight = Tensor4::from_fn(s, |_, _, _, _| r.gen_range(0.0..2.0));
            let (h, w) = crate::losses::tv_pairs(&binary_mask(2, 4, 4, &mut r));
            let inputs = [randn(s, &mut r), randn(s, &mut r)];
            check(name, &inputs, PLAIN_TOL, None, |t, v| {
                let total = t.sum(v[0]);
                let mean = t.mean(v[1]);
                let l1 = t.abs_diff_sum(v[0], v[1], Some(&weight), 0.3)?;
                let gram = t.gram(v[0], 0.25);
                let gram = project(t, gram, 9)?;
                let tv = t.masked_tv(v[1], &h, &w, 0.5)?;
                t.weighted_sum(&[(total, 0.2), (mean, 1.1), (l1, 1.0), (gram, 1.0), (tv, 1.0)])
            })
        }
        "batch_norm" => {
            let s = Shape4::new(3, 4, 3, 3);
            let mut eval_state = BnState::<f64>::new(4);
            for c in 0..4 {
                eval_state.running_mean[c] = r.gen_range(-0.5..0.5);
                eval_state.running_var[c] = r.gen_range(0.5..2.0);
            }
            let inputs = [randn(s, &mut r)];
            check(name, &inputs, PLAIN_TOL, None, |t, v| {
                let mut train_state = BnState::new(4);
                let a = batch_norm(t, v[0], &mut train_state, true)?;
                let b = batch_norm(t, v[0], &mut eval_state.clone(), false)?;
                project_all(t, &[a, b])
            })
        }
        "point_norm" => {
            let (c, g, latent) = (3, 2, 4);
            let inputs = [
                randn(Shape4::new(2, c, 4, 4), &mut r),
                randn(Shape4::new(2, g, 4, 4), &mut r),
                randn(Shape4::new(latent, g, 3, 3), &mut r),
                randn(Shape4::new(1, latent, 1, 1), &mut r),
                randn(Shape4::new(c, latent, 3, 3), &mut r),
                randn(Shape4::new(1, c, 1, 1), &mut r),
                randn(Shape4::new(c, latent, 3, 3), &mut r),
                randn(Shape4::new(1, c, 1, 1), &mut r),
            ];
            check(name, &inputs, COMPOSITE_TOL, None, |t, v| {
                let p = PnParams {
                    guide_w: v[2],
                    guide_b: v[3],
                    scale_w: v[4],
                    scale_b: v[5],
                    bias_w: v[6],
                    bias_b: v[7],
                };
                let y = point_norm(t, v[0], v[1], &p, &mut BnState::new(c), true)?;
                project(t, y, 0)
            })
        }
        "mask_branch_step" => {
            let spec = MadfSpec::new(2, 2, 1, 3, 3, 2, 1)?;
            let m_prev = Tensor4::from_fn(Shape4::new(2, 1, 6, 6), |_, _, _, _| r.gen_range(0.0..1.0));
            let inputs = [
                m_prev,
                randn(spec.mask_weight_shape(), &mut r),
                randn(Shape4::new(1, 3, 1, 1), &mut r),
                randn(spec.generator_weight_shape(), &mut r),
                randn(Shape4::new(1, spec.kernel_len(), 1, 1), &mut r),
            ];
            check(name, &inputs, COMPOSITE_TOL, None, |t, v| {
                let p = MadfLayerParams {
                    mask_w: v[1],
                    mask_b: v[2],
                    gen_w: v[3],
                    gen_b: v[4],
                };
                let (m_next, theta) = mask_branch_step(t, v[0], &p, &spec)?;
                project_all(t, &[m_next, theta])
            })
        }
        "madf_conv" => {
            let spec = ConvSpec::new(3, 2, 3, 2, 1)?;
            let (oh, ow) = spec.out_hw(7, 7)?;
            let inputs = [
                randn(Shape4::new(2, 3, 7, 7), &mut r),
                randn(Shape4::new(2, spec.patch_len() * 2, oh, ow), &mut r),
            ];
            check(name, &inputs, PLAIN_TOL, None, |t, v| {
                let y = madf_conv(t, v[0], v[1], &spec)?;
                project(t, y, 0)
            })
        }
        "loss_hole" | "loss_valid" | "loss_perceptual" | "loss_style" | "loss_tv" => loss_suite(name, &mut r),
        "micro_model" => model_suite(name, ModelConfig::micro(), &mut r),
        "micro_model_batch_norm" => model_suite(name, ModelConfig::micro().with_pn(false).with_refinements(1), &mut r),
        _ => unreachable!("suite list and dispatch agree"),
    }
}

fn loss_suite(name: &'static str, r: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let s = Shape4::new(2, 3, 8, 8);
    let gt = Tensor4::from_fn(s, |_, _, _, _| r.gen_range(0.0..1.0));
    let mask = binary_mask(2, 8, 8, r);
    let out = Tensor4::from_fn(s, |_, _, _, _| r.gen_range(-0.2..1.2));
    let net = FeatureNet::new(FEATURE_NET_SEED);
    check(name, &[out], COMPOSITE_TOL, None, |t, v| {
        let g = t.constant(gt.clone());
        match name {
            "loss_hole" => loss_hole(t, v[0], g, &mask),
            "loss_valid" => loss_valid(t, v[0], g, &mask),
            "loss_perceptual" => {
                let com = compose_var(t, v[0], &gt, &mask)?;
                loss_perceptual(t, v[0], com, g, &net)
            }
            "loss_style" => {
                let com = compose_var(t, v[0], &gt, &mask)?;
                loss_style(t, v[0], com, g, &net)
            }
            _ => {
                let com = compose_var(t, v[0], &gt, &mask)?;
                loss_tv(t, com, &mask)
            }
        }
    })
}

/// Every parameter of a micro network (up to 16 sampled elements each)
/// through the training-mode forward pass and the full supervision loss.
///
/// Freshly initialized biases are zero, which puts many activation inputs
/// exactly on a kink, so parameters are jittered before checking.
fn model_suite(name: &'static str, config: ModelConfig, r: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let model = Model::<f64>::build(config.clone(), 21)?;
    let (h, w) = config.input_hw;
    let s = Shape4::new(2, 3, h, w);
    let gt = Tensor4::from_fn(s, |_, _, _, _| r.gen_range(0.0..1.0));
    let mask = binary_mask(2, h, w, r);
    let damaged = crate::losses::compose(&Tensor4::zeros(s), &gt, &mask)?;
    let net = FeatureNet::new(FEATURE_NET_SEED);
    let f = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let x = t.constant(damaged.clone());
        let m = t.constant(mask.clone());
        let pass = model.forward_bound(t, BoundParams::from_vars(v.to_vec()), x, m, Mode::Train)?;
        let loss = supervision_losses(
            t,
            &pass.decoders.images,
            &gt,
            &mask,
            &net,
            &LossWeights::default(),
            Schedule::CoarseToFine,
            config.refinements,
        )?;
        Ok(loss.total)
    };
    let mut jr = rng(0x5151);
    let inputs: Vec<Tensor4<f64>> = model
        .params()
        .iter()
        .map(|p| {
            if p.trainable {
                let noise = randn(p.value.shape(), &mut jr);
                Tensor4::from_vec(
                    p.value.shape(),
                    p.value.data().iter().zip(noise.data()).map(|(a, n)| a + 0.1 * n).collect(),
                )
            } else {
                Ok(p.value.clone())
            }
        })
        .collect::<Result<_>>()?;
    check(name, &inputs, COMPOSITE_TOL, Some(16), f)
}

pub fn run_all() -> Result<Vec<SuiteResult>> {
    SUITES.iter().map(|s| run_suite(s)).collect()
}
