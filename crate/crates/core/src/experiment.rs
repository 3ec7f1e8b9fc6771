//! Experiment descriptions, presets and the run pipeline shared by the
//! command line and the acceptance tests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    make_system_windows_dataset, simulate_charged, simulate_orbital, ChargedConfig, FeatureKind, OrbitalConfig,
    SplitFractions, Trajectory, TrajectoryDataset,
};
use crate::egnn::{save_model, MCEGNNConfig, MCEGNNModel};
use crate::error::{Error, Result};
use crate::nn::LrSchedule;
use crate::train::{fit_with, EpochRecord, LossKind, RunReport, TrainConfig};

/// Number of systems per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn fractions(&self) -> Result<SplitFractions> {
        let t = self.total() as f64;
        if self.total() == 0 {
            return Err(Error::Config("no systems requested".into()));
        }
        SplitFractions::new(self.train as f64 / t, self.val as f64 / t, self.test as f64 / t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Charged {
        sim: ChargedConfig,
        systems: SplitCounts,
        /// Recorded frames used as inputs.
        starts: Vec<usize>,
        /// Prediction horizon in recorded frames.
        horizon: usize,
        seed: u64,
    },
    Orbital {
        sim: OrbitalConfig,
        systems: SplitCounts,
        starts: Vec<usize>,
        horizon: usize,
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn features(&self) -> FeatureKind {
        match self {
            DatasetSpec::Charged { .. } => FeatureKind::Charge,
            DatasetSpec::Orbital { .. } => FeatureKind::LogMass,
        }
    }

    pub fn loss(&self) -> LossKind {
        match self {
            DatasetSpec::Charged { .. } => LossKind::Mse,
            DatasetSpec::Orbital { .. } => LossKind::NormalizedMse,
        }
    }

    pub fn systems(&self) -> SplitCounts {
        match self {
            DatasetSpec::Charged { systems, .. } | DatasetSpec::Orbital { systems, .. } => *systems,
        }
    }

    pub fn trajectories(&self) -> Result<Vec<Trajectory>> {
        let n = self.systems().total() as u64;
        match self {
            DatasetSpec::Charged { sim, seed, .. } => (0..n).map(|i| simulate_charged(sim, *seed, i)).collect(),
            DatasetSpec::Orbital { sim, seed, .. } => (0..n).map(|i| simulate_orbital(sim, *seed, i)).collect(),
        }
    }

    /// Simulates every system and cuts samples; systems are assigned to
    /// train, val and test in generation order.
    pub fn generate(&self) -> Result<TrajectoryDataset> {
        let (starts, horizon) = match self {
            DatasetSpec::Charged { starts, horizon, .. } | DatasetSpec::Orbital { starts, horizon, .. } => {
                (starts, *horizon)
            }
        };
        let frac = self.systems().fractions()?;
        make_system_windows_dataset(&self.trajectories()?, starts, horizon, self.features(), frac)
    }
}

/// Everything a run needs, serialized as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: MCEGNNConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub output_dir: PathBuf,
}

pub const PRESETS: [&str; 2] = ["nbody-small", "orbital-small"];

/// Charged five-particle systems, one second of dynamics ahead.
pub fn nbody_small(channels: usize, seed: u64) -> ExperimentConfig {
    let model = MCEGNNConfig {
        n_layers: 4,
        hidden: 32,
        message: 32,
        channels,
        node_in: 1,
        edge_in: 1,
        velocity_mode: true,
        seed,
        ..Default::default()
    };
    ExperimentConfig {
        name: format!("nbody-small-m{channels}-s{seed}"),
        model,
        train: TrainConfig {
            epochs: 1000,
            batch_size: 100,
            lr: 5e-4,
            schedule: LrSchedule::Constant,
            patience: 50,
            clip_norm: None,
            seed,
            loss: LossKind::Mse,
            eval_batch_size: 100,
        },
        dataset: DatasetSpec::Charged {
            sim: ChargedConfig {
                record_every: 100,
                ..Default::default()
            },
            systems: SplitCounts {
                train: 500,
                val: 100,
                test: 200,
            },
            starts: vec![0],
            horizon: 10,
            seed: 0,
        },
        output_dir: PathBuf::from("runs"),
    }
}

/// Star, three planets and two moons per planet, half a time unit ahead
/// (about one and a half moon orbits), starting after the star has picked
/// up its reflex motion.
pub fn orbital_small(channels: usize, seed: u64) -> ExperimentConfig {
    let model = MCEGNNConfig {
        n_layers: 5,
        hidden: 64,
        message: 64,
        channels,
        node_in: 1,
        edge_in: 0,
        velocity_mode: true,
        seed,
        ..Default::default()
    };
    ExperimentConfig {
        name: format!("orbital-small-m{channels}-s{seed}"),
        model,
        train: TrainConfig {
            epochs: 400,
            batch_size: 10,
            lr: 3e-4,
            schedule: LrSchedule::Constant,
            patience: 50,
            // the normalized loss starts around 1e4 and spikes without it
            clip_norm: Some(1.0),
            seed,
            loss: LossKind::NormalizedMse,
            eval_batch_size: 50,
        },
        dataset: DatasetSpec::Orbital {
            sim: OrbitalConfig::default(),
            systems: SplitCounts {
                train: 60,
                val: 20,
                test: 20,
            },
            starts: vec![100],
            horizon: 50,
            seed: 0,
        },
        output_dir: PathBuf::from("runs"),
    }
}

pub fn preset(name: &str, channels: usize, seed: u64) -> Result<ExperimentConfig> {
    match name {
        "nbody-small" => Ok(nbody_small(channels, seed)),
        "orbital-small" => Ok(orbital_small(channels, seed)),
        other => Err(Error::Config(format!(
            "unknown preset {other:?}; expected one of {PRESETS:?}"
        ))),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let f = self.dataset.features();
        if self.model.node_in != f.node_width() || self.model.edge_in != f.edge_width() {
            return Err(Error::Config(format!(
                "model expects {} node / {} edge inputs, dataset provides {} / {}",
                self.model.node_in,
                self.model.edge_in,
                f.node_width(),
                f.edge_width()
            )));
        }
        if !self.model.velocity_mode {
            // every dataset carries velocities; they are simply unused
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Builds a fresh model and trains it on `dataset`.
pub fn train_on(
    cfg: &ExperimentConfig,
    dataset: &TrajectoryDataset,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MCEGNNModel, RunReport)> {
    cfg.validate()?;
    if dataset.features != cfg.dataset.features() {
        return Err(Error::Config("dataset features do not match the experiment".into()));
    }
    let mut model = MCEGNNModel::new(cfg.model.clone())?;
    let report = fit_with(&mut model, dataset, &cfg.train, on_epoch)?;
    Ok((model, report))
}

/// Writes `config.json`, `checkpoint.bin`, `report.json`, `losses.csv` and
/// `timing.csv` into `dir`. Only the last depends on the machine.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, model: &MCEGNNModel, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("config.json"), &cfg.to_json()?)?;
    save_model(&dir.join("checkpoint.bin"), model)?;
    write_text(&dir.join("report.json"), &serde_json::to_string_pretty(report)?)?;
    write_text(&dir.join("losses.csv"), &report.losses_csv())?;
    write_text(&dir.join("timing.csv"), &report.timing_csv())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::data::container::write_atomic(path, text.as_bytes())
}
