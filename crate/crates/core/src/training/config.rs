use std::fmt;
use std::str::FromStr;

use crate::backbone::ModelHyper;
use crate::error::{Error, Result};
use crate::objectives::{AnnealSchedule, ContrastiveConfig, Weighting};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Single,
    EnsembleScratch,
    EnsembleGuide,
    Flame,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Single,
        Mode::EnsembleScratch,
        Mode::EnsembleGuide,
        Mode::Flame,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::EnsembleScratch => "ensemble_scratch",
            Mode::EnsembleGuide => "ensemble_guide",
            Mode::Flame => "flame",
        }
    }

    /// Modes that train against a pretrained frozen network.
    pub fn needs_frozen(self) -> bool {
        matches!(self, Mode::EnsembleGuide | Mode::Flame)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Sub-modules per network.
    pub submodules: usize,
    pub dropout: f64,
    pub tau: f64,
    pub lambda0: f64,
    pub lambda_r: f64,
    pub weighting: Weighting,
    pub normalize: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Epoch budget R.
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub mask_history: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Flame,
            dim: 64,
            layers: 2,
            heads: 2,
            max_len: 50,
            submodules: 2,
            dropout: 0.5,
            tau: 1.0,
            lambda0: 0.1,
            lambda_r: 1e-5,
            weighting: Weighting::Similarity,
            normalize: false,
            lr: 1e-3,
            batch_size: 256,
            eval_batch_size: 512,
            epochs: 200,
            patience: 30,
            seed: 42,
            mask_history: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}"))),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "mode",
        "dim",
        "layers",
        "heads",
        "max_len",
        "submodules",
        "dropout",
        "tau",
        "lambda0",
        "lambda_r",
        "weighting",
        "normalize",
        "lr",
        "batch_size",
        "eval_batch_size",
        "epochs",
        "patience",
        "seed",
        "mask_history",
    ];

    /// Sets one field from its textual form; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.trim().parse()?,
            "dim" => self.dim = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "submodules" => self.submodules = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "lambda0" => self.lambda0 = parse(key, value)?,
            "lambda_r" => self.lambda_r = parse(key, value)?,
            "weighting" => {
                self.weighting = match value.trim() {
                    "uniform" => Weighting::Uniform,
                    "similarity" => Weighting::Similarity,
                    _ => return Err(Error::Config(format!("invalid value {value:?} for {key}"))),
                }
            }
            "normalize" => self.normalize = parse_bool(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mask_history" => self.mask_history = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// `key=value` lines for every field, in `KEYS` order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let weighting = match self.weighting {
            Weighting::Uniform => "uniform",
            Weighting::Similarity => "similarity",
        };
        let values = [
            self.mode.to_string(),
            self.dim.to_string(),
            self.layers.to_string(),
            self.heads.to_string(),
            self.max_len.to_string(),
            self.submodules.to_string(),
            self.dropout.to_string(),
            self.tau.to_string(),
            self.lambda0.to_string(),
            self.lambda_r.to_string(),
            weighting.to_string(),
            self.normalize.to_string(),
            self.lr.to_string(),
            self.batch_size.to_string(),
            self.eval_batch_size.to_string(),
            self.epochs.to_string(),
            self.patience.to_string(),
            self.seed.to_string(),
            self.mask_history.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.patience == 0 || self.patience > self.epochs {
            return Err(Error::Config(format!(
                "patience {} must lie in 1..={}",
                self.patience, self.epochs
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.mode != Mode::Single && self.batch_size < 2 {
            return Err(Error::Config(format!(
                "mode {} needs batch_size ≥ 2 for in-batch negatives",
                self.mode
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config(format!("max_len {} below 3", self.max_len)));
        }
        if self.submodules < 2 || self.submodules > self.layers + 1 {
            return Err(Error::Config(format!(
                "submodules {} must lie in 2..={}",
                self.submodules,
                self.layers + 1
            )));
        }
        self.contrastive()?;
        self.schedule()?;
        ModelHyper::new(
            1,
            self.max_len,
            self.dim,
            self.layers,
            self.heads,
            self.dropout,
        )
        .validate()
    }

    pub fn model_hyper(&self, num_items: usize) -> ModelHyper {
        ModelHyper::new(
            num_items,
            self.max_len,
            self.dim,
            self.layers,
            self.heads,
            self.dropout,
        )
    }

    pub fn contrastive(&self) -> Result<ContrastiveConfig> {
        let mut c = ContrastiveConfig::new(self.tau, self.weighting)?;
        c.normalize = self.normalize;
        Ok(c)
    }

    /// λ schedule whose horizon is the last epoch of the budget, so epoch
    /// index 0 gets λ0 and index `epochs - 1` gets λ_R.
    pub fn schedule(&self) -> Result<AnnealSchedule> {
        AnnealSchedule::new(
            self.lambda0,
            self.lambda_r,
            self.epochs.saturating_sub(1).max(1),
        )
    }
}
