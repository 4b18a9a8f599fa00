//! TOML run configuration. Every field is optional; command-line flags win
//! over the file, the file wins over `FAAG_SEED`, and built-in defaults come
//! last.

use std::fs;
use std::path::Path;

use faag_core::attack::AttackConfig;
use faag_core::train::TrainConfig;
use faag_core::Error;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "FAAG_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub attack: AttackSection,
    pub train: TrainSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub initial_con: Option<f64>,
    pub con_decay: Option<f64>,
    pub check_every: Option<usize>,
    pub loss_weight: Option<f64>,
    pub l2_weight: Option<f64>,
    pub clip_bound: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub hidden: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e.message())))
    }

    /// Flag, then file, then environment, then zero.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64, Error> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    pub fn attack_config(&self, flags: &AttackFlags, seed: u64) -> Result<AttackConfig, Error> {
        let d = AttackConfig::default();
        let a = &self.attack;
        let cfg = AttackConfig {
            iterations: flags.iterations.or(a.iterations).unwrap_or(d.iterations),
            learning_rate: flags.lr.or(a.learning_rate).unwrap_or(d.learning_rate),
            initial_con: flags.initial_con.or(a.initial_con).unwrap_or(d.initial_con),
            con_decay: a.con_decay.unwrap_or(d.con_decay),
            check_every: a.check_every.unwrap_or(d.check_every),
            loss_weight: a.loss_weight.unwrap_or(d.loss_weight),
            l2_weight: a.l2_weight.unwrap_or(d.l2_weight),
            seed,
            clip_bound: a.clip_bound.unwrap_or(d.clip_bound),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, epochs: Option<usize>, lr: Option<f64>, seed: u64) -> Result<TrainConfig, Error> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: epochs.or(self.train.epochs).unwrap_or(d.epochs),
            learning_rate: lr.or(self.train.learning_rate).unwrap_or(d.learning_rate),
            seed,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Attack hyperparameters that also exist as flags.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct AttackFlags {
    /// Optimizer iterations [default: 1000]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Adam step size in int16 counts [default: 10]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Initial dB bound on the perturbation relative to the clip [default: 40]
    #[arg(long)]
    pub initial_con: Option<f64>,
}
