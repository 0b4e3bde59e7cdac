use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::layers::{MuInit, PriorSpec};
use crate::zoo::{build, Arch, Mode, Model};
use crate::Real;

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: Arch,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Real,
    /// Stochastic forward passes per minibatch.
    pub mc_samples: usize,
    pub weight_decay: Real,
    pub seed: u64,
    /// Stochastic passes per image for validation uncertainty.
    pub eval_samples: usize,
    /// Training images taken from the start of the training split; 0 = all.
    pub train_n: usize,
    /// Validation images taken from the start of the test split; 0 = all.
    pub val_n: usize,
    pub mode: Mode,
    pub mu_init: MuInit,
    pub prior: PriorSpec,
    /// Validation images used for the per-epoch uncertainty estimate.
    pub uncertainty_slice: usize,
    /// Write `checkpoint.bin` every this many epochs (and always at the end).
    pub checkpoint_every: usize,
    /// Score validation accuracy by the Monte-Carlo mean prediction instead
    /// of the posterior-mean network.
    pub mc_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::Lenet5,
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data"),
            epochs: 100,
            batch_size: 128,
            learning_rate: 0.001,
            mc_samples: 10,
            weight_decay: 0.0005,
            seed: 0,
            eval_samples: 25,
            train_n: 0,
            val_n: 0,
            mode: Mode::Bayesian,
            mu_init: MuInit::FanIn,
            prior: PriorSpec::default(),
            uncertainty_slice: 512,
            checkpoint_every: 1,
            mc_validation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("mc_samples", self.mc_samples),
            ("eval_samples", self.eval_samples),
            ("uncertainty_slice", self.uncertainty_slice),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Contract(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Contract(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Contract(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        PriorSpec::new(self.prior.mean, self.prior.std)?;
        Ok(())
    }

    /// Input channels: LeNet-5 takes the dataset's own channel count, the
    /// wider networks always take three (grayscale is replicated).
    pub fn in_channels(&self) -> usize {
        match (self.arch, self.dataset) {
            (Arch::Lenet5, DatasetKind::Mnist) => 1,
            _ => 3,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels(), 32, 32]
    }

    /// Freshly initialized model for this configuration.
    pub fn build_model(&self) -> Result<Model> {
        build(
            self.arch,
            self.in_channels(),
            self.dataset.num_classes(),
            self.mode,
            self.mu_init,
            self.seed,
        )
    }
}
