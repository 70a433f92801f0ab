use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::losses::Schedule;
use crate::model::config::{parse_key_values, parse_value};
use crate::model::ModelConfig;

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: String,
    /// Square input side overriding the preset's nominal size.
    pub image_size: Option<usize>,
    pub batch: usize,
    pub iterations: u64,
    pub seed: u64,
    pub schedule: Schedule,
    pub pn_enabled: bool,
    pub refinements: usize,
    /// Size of the synthetic training image set.
    pub dataset_size: usize,
    pub lr: f64,
    pub augment: bool,
    /// Held-out masks used for periodic evaluation.
    pub eval_count: usize,
    /// Iterations between evaluations; 0 disables them.
    pub eval_interval: u64,
    pub checkpoint: Option<PathBuf>,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: "desk".into(),
            image_size: None,
            batch: 4,
            iterations: 2000,
            seed: 0,
            schedule: Schedule::CoarseToFine,
            pn_enabled: true,
            refinements: 2,
            dataset_size: 16,
            lr: 2e-4,
            augment: true,
            eval_count: 8,
            eval_interval: 0,
            checkpoint: None,
            checkpoint_interval: 0,
            log: None,
            resume: None,
        }
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl TrainConfig {
    /// Parses `key = value` lines; unknown keys are errors and missing keys
    /// keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in parse_key_values(text)? {
            match k.as_str() {
                "preset" => c.preset = v,
                "image_size" => c.image_size = (!v.is_empty()).then(|| parse_value(&k, &v)).transpose()?,
                "batch" => c.batch = parse_value(&k, &v)?,
                "iterations" => c.iterations = parse_value(&k, &v)?,
                "seed" => c.seed = parse_value(&k, &v)?,
                "schedule" => c.schedule = v.parse()?,
                "pn_enabled" => c.pn_enabled = parse_value(&k, &v)?,
                "refinements" => c.refinements = parse_value(&k, &v)?,
                "dataset_size" => c.dataset_size = parse_value(&k, &v)?,
                "lr" => c.lr = parse_value(&k, &v)?,
                "augment" => c.augment = parse_value(&k, &v)?,
                "eval_count" => c.eval_count = parse_value(&k, &v)?,
                "eval_interval" => c.eval_interval = parse_value(&k, &v)?,
                "checkpoint" => c.checkpoint = opt_path(&v),
                "checkpoint_interval" => c.checkpoint_interval = parse_value(&k, &v)?,
                "log" => c.log = opt_path(&v),
                "resume" => c.resume = opt_path(&v),
                other => return Err(Error::config(format!("unknown training config key '{other}'"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        format!(
            "preset = {}\nimage_size = {}\nbatch = {}\niterations = {}\nseed = {}\nschedule = {}\npn_enabled = {}\n\
             refinements = {}\ndataset_size = {}\nlr = {:?}\naugment = {}\neval_count = {}\n\
             eval_interval = {}\ncheckpoint = {}\ncheckpoint_interval = {}\nlog = {}\nresume = {}\n",
            self.preset,
            self.image_size.map(|v| v.to_string()).unwrap_or_default(),
            self.batch,
            self.iterations,
            self.seed,
            self.schedule,
            self.pn_enabled,
            self.refinements,
            self.dataset_size,
            self.lr,
            self.augment,
            self.eval_count,
            self.eval_interval,
            show_path(&self.checkpoint),
            self.checkpoint_interval,
            show_path(&self.log),
            show_path(&self.resume),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if self.dataset_size == 0 {
            return Err(Error::config("dataset_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        self.model_config()?;
        Ok(())
    }

    /// The preset with this run's input size, refinement count and
    /// normalization choice.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset)?
            .with_refinements(self.refinements)
            .with_pn(self.pn_enabled);
        if let Some(side) = self.image_size {
            c = c.with_input(side, side);
        }
        c.validate()?;
        Ok(c)
    }
}
