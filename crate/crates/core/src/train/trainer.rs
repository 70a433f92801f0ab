use std::io::Write;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{supervision_losses, FeatureNet, LossReport, LossWeights, FEATURE_NET_SEED};
use crate::masks::synthetic::stack_images;
use crate::masks::{stack_masks, ImageSample, Mask};
use crate::metrics::{evaluate_with, hole_psnr, EvalReport};
use crate::model::{Mode, Model};
use crate::tensor::Tensor4;

use super::adam::{AdamConfig, AdamState};
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::{derive_seed, Dataset, Stream};

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// 1-based index of the step just taken.
    pub iteration: u64,
    pub loss: LossReport,
}

/// Held-out evaluation at one point of training.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSnapshot {
    pub iteration: u64,
    /// Mean hole-region PSNR of every decoder output, recovery first.
    pub decoder_hole_psnr: Vec<f64>,
    /// Bucketed metrics of the final output.
    pub report: EvalReport,
}

/// Losses of a finished run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    /// Total loss of every step taken by this run, in order.
    pub losses: Vec<f64>,
    pub final_eval: Option<EvalSnapshot>,
}

impl TrainSummary {
    /// Trailing moving average with the given window; entry `i` averages
    /// `losses[i + 1 - window ..= i]`.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        if window == 0 || self.losses.len() < window {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(self.losses.len() + 1 - window);
        let mut acc: f64 = self.losses[..window].iter().sum();
        out.push(acc / window as f64);
        for i in window..self.losses.len() {
            acc += self.losses[i] - self.losses[i - window];
            out.push(acc / window as f64);
        }
        out
    }
}

/// Owns all mutable training state: parameters, Adam moments and the
/// iteration counter. Batches are a pure function of (seed, iteration).
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: Model<f32>,
    adam: AdamState<f32>,
    iteration: u64,
    dataset: Dataset,
    net: FeatureNet,
    weights: LossWeights,
}

impl Trainer {
    /// Fresh run, or a resumed one when `config.resume` is set.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if let Some(path) = &config.resume {
            let ckpt = Checkpoint::load(path)?;
            return Trainer::from_checkpoint(config, ckpt);
        }
        let model = Model::build(config.model_config()?, derive_seed(config.seed, Stream::Init, 0))?;
        let adam = AdamState::new(model.params(), adam_config(&config));
        Ok(Trainer::assemble(config, model, adam, 0))
    }

    pub fn from_checkpoint(config: TrainConfig, ckpt: Checkpoint<f32>) -> Result<Self> {
        config.validate()?;
        if ckpt.seed != config.seed {
            return Err(Error::config(format!(
                "checkpoint was trained with seed {}, config says {}",
                ckpt.seed, config.seed
            )));
        }
        if *ckpt.model.config() != config.model_config()? {
            return Err(Error::config("checkpoint model config differs from the training config"));
        }
        if ckpt.adam.config != adam_config(&config) {
            return Err(Error::config("checkpoint optimizer settings differ from the training config"));
        }
        Ok(Trainer::assemble(config, ckpt.model, ckpt.adam, ckpt.iteration))
    }

    fn assemble(config: TrainConfig, model: Model<f32>, adam: AdamState<f32>, iteration: u64) -> Self {
        let (h, w) = model.config().input_hw;
        let dataset = Dataset::synthetic(h, w, config.dataset_size, config.seed, config.augment);
        Trainer {
            config,
            model,
            adam,
            iteration,
            dataset,
            net: FeatureNet::new(FEATURE_NET_SEED),
            weights: LossWeights::default(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            iteration: self.iteration,
            seed: self.config.seed,
        }
    }

    /// Loss and per-parameter gradients of iteration `self.iteration`
    /// without touching any state.
    pub fn loss_and_gradients(&self) -> Result<(LossReport, Vec<Option<Vec<f32>>>, Vec<crate::model::BnUpdate<f32>>)> {
        let batch = self.dataset.batch::<f32>(self.iteration, self.config.batch)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.damaged.clone());
        let m = tape.constant(batch.mask.clone());
        let pass = self.model.forward(&mut tape, x, m, Mode::Train)?;
        let loss = supervision_losses(
            &mut tape,
            &pass.decoders.images,
            &batch.ground_truth,
            &batch.mask,
            &self.net,
            &self.weights,
            self.config.schedule,
            self.model.config().refinements,
        )?;
        if !loss.report.is_valid() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {}: {}",
                self.iteration + 1,
                loss.report.key_values()
            )));
        }
        let mut grads = tape.backward(loss.total)?;
        let per_param = self
            .model
            .params()
            .iter()
            .zip(pass.params.vars())
            .map(|(p, &v)| if p.trainable { grads.take(v) } else { None })
            .collect();
        Ok((loss.report, per_param, pass.bn_updates))
    }

    /// One Adam step. On error no state changes.
    pub fn step(&mut self) -> Result<StepReport> {
        let (loss, grads, bn_updates) = self.loss_and_gradients()?;
        self.adam.step(self.model.params_mut(), &grads)?;
        self.model.apply_bn_updates(&bn_updates);
        self.iteration += 1;
        Ok(StepReport {
            iteration: self.iteration,
            loss,
        })
    }

    /// Evaluates the current model on the held-out masks.
    pub fn evaluate(&self) -> Result<EvalSnapshot> {
        let (samples, masks) = self.dataset.eval_set(self.config.eval_count)?;
        Ok(EvalSnapshot {
            iteration: self.iteration,
            decoder_hole_psnr: decoder_hole_psnr(&self.model, &samples, &masks)?,
            report: evaluate_with(&samples, &masks, |img, mask| {
                let outs = self.model.infer(&img.cast(), &mask.cast())?;
                Ok(outs.last().expect("at least one decoder").cast())
            })?,
        })
    }

    /// Trains until `config.iterations`, logging one `key=value` record per
    /// step. A non-finite loss or gradient stops the run after writing the
    /// current (last good) state to the checkpoint path.
    pub fn run(&mut self, log: &mut dyn Write) -> Result<TrainSummary> {
        let mut summary = TrainSummary::default();
        while self.iteration < self.config.iterations {
            let report = match self.step() {
                Ok(r) => r,
                Err(e @ Error::Numeric(_)) => {
                    write_line(log, &format!("halt iter={} reason=\"{e}\"", self.iteration + 1))?;
                    self.save_checkpoint()?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            summary.losses.push(report.loss.total);
            write_line(log, &format!("iter={} {}", report.iteration, report.loss.key_values()))?;

            let it = self.iteration;
            let done = it == self.config.iterations;
            if self.config.eval_interval > 0 && (it % self.config.eval_interval == 0 || done) {
                let snap = self.evaluate()?;
                log_eval(log, &snap)?;
                summary.final_eval = Some(snap);
            }
            if done || (self.config.checkpoint_interval > 0 && it % self.config.checkpoint_interval == 0) {
                self.save_checkpoint()?;
            }
        }
        Ok(summary)
    }

    fn save_checkpoint(&self) -> Result<()> {
        match &self.config.checkpoint {
            Some(path) => self.checkpoint().save(path),
            None => Ok(()),
        }
    }
}

fn adam_config(config: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    }
}

fn write_line(log: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(log, "{line}").map_err(|e| Error::io("<training log>", e))
}

fn log_eval(log: &mut dyn Write, snap: &EvalSnapshot) -> Result<()> {
    let mut line = format!("eval iter={}", snap.iteration);
    for (d, p) in snap.decoder_hole_psnr.iter().enumerate() {
        line.push_str(&format!(" d{d}.hole_psnr={p:.4}"));
    }
    write_line(log, &line)?;
    for r in &snap.report.rows {
        write_line(
            log,
            &format!(
                "eval iter={} bucket={} psnr={:.4} ssim={:.6} count={}",
                snap.iteration,
                r.label(),
                r.psnr_db,
                r.ssim,
                r.count
            ),
        )?;
    }
    Ok(())
}

/// Mean hole-region PSNR (peak 1) of every decoder output, clamped to
/// `[0, 1]`, in eval mode.
pub fn decoder_hole_psnr(model: &Model<f32>, samples: &[ImageSample], masks: &[Mask]) -> Result<Vec<f64>> {
    if samples.len() != masks.len() || samples.is_empty() {
        return Err(Error::config(format!(
            "need matching non-empty samples and masks, got {} and {}",
            samples.len(),
            masks.len()
        )));
    }
    let decoders = model.config().refinements + 1;
    let mut sums = vec![0.0; decoders];
    for (s, m) in samples.iter().zip(masks) {
        let gt = stack_images::<f64>(&[&s.pixels])?;
        let mask = stack_masks::<f64>(std::slice::from_ref(m))?;
        let damaged = crate::losses::compose(&Tensor4::zeros(gt.shape()), &gt, &mask)?;
        let outs = model.infer(&damaged.cast(), &mask.cast())?;
        for (d, o) in outs.iter().enumerate() {
            let o = o.cast::<f64>().map(|v| v.clamp(0.0, 1.0));
            sums[d] += hole_psnr(&o, &gt, &mask, 1.0)?;
        }
    }
    Ok(sums.into_iter().map(|v| v / samples.len() as f64).collect())
}
