//! Strict JSON run configuration; the schema is documented in `docs/config.md`.

use std::path::{Path, PathBuf};

use rflow_core::estimator::EstimatorConfig;
use rflow_core::rfm::TrainConfig;
use rflow_core::{GuidanceConfig, SolverConfig};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};
use crate::format::read_file;
use crate::task::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Small,
    Base,
    Large,
}

/// Estimator size; dimensions are taken from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub preset: Preset,
    pub hidden_dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_dim: Option<usize>,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            preset: Preset::Tiny,
            hidden_dim: None,
            layers: None,
            heads: None,
            ffn_dim: None,
        }
    }
}

impl EstimatorSection {
    pub fn resolve(&self, task: &Task) -> LabResult<EstimatorConfig> {
        let tiny = task.tiny_estimator();
        let mut cfg = match self.preset {
            Preset::Tiny => tiny.clone(),
            Preset::Small => EstimatorConfig::small(tiny.latent_dim, tiny.cond_dim),
            Preset::Base => EstimatorConfig::base(tiny.latent_dim, tiny.cond_dim),
            Preset::Large => EstimatorConfig::large(tiny.latent_dim, tiny.cond_dim),
        };
        cfg.regulate_ratio = tiny.regulate_ratio;
        cfg.max_seq_len = tiny.max_seq_len;
        if let Some(v) = self.hidden_dim {
            cfg.hidden_dim = v;
        }
        if let Some(v) = self.layers {
            cfg.layers = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.ffn_dim {
            cfg.ffn_dim = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflowSection {
    /// Solver used to generate the triplets.
    pub solver: SolverConfig,
    /// Guidance used to generate the triplets and composed in the losses.
    pub guidance: GuidanceConfig,
    pub train: TrainConfig,
    pub distill: TrainConfig,
    /// Default guidance when sampling reflowed or distilled checkpoints.
    pub sample_gamma: f64,
    /// Triplets per shard file.
    pub shard_size: usize,
}

impl Default for ReflowSection {
    fn default() -> Self {
        Self {
            solver: SolverConfig::euler(25),
            guidance: GuidanceConfig::scale(4.5),
            train: TrainConfig {
                cond_drop_prob: 0.0,
                ..TrainConfig::default()
            },
            distill: TrainConfig {
                cond_drop_prob: 0.0,
                ..TrainConfig::default()
            },
            sample_gamma: 4.5,
            shard_size: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Euler step counts for the step grid.
    pub steps: Vec<usize>,
    /// Guidance scales for the sweep (run at `sweep_steps`).
    pub gammas: Vec<f64>,
    pub sweep_steps: usize,
    /// Adds an adaptive Dopri5 row to the step grid.
    pub dopri5: bool,
    pub rtol: f64,
    pub atol: f64,
    /// Samples per class (Gauss) or conditions (Events).
    pub samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            steps: vec![1, 5, 25],
            gammas: vec![0.0, 1.0, 2.0, 4.0, 8.0],
            sweep_steps: 25,
            dopri5: true,
            rtol: 1e-5,
            atol: 1e-5,
            samples: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    /// Existing dataset file; when absent the data are generated from `task`.
    pub data: Option<PathBuf>,
    pub estimator: EstimatorSection,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub guidance: GuidanceConfig,
    pub reflow: ReflowSection,
    pub eval: EvalSection,
    /// Seeds initialisation, sampling noise and reflow noise.
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::default(),
            data: None,
            estimator: EstimatorSection::default(),
            train: TrainConfig::default(),
            solver: SolverConfig::default(),
            guidance: GuidanceConfig::default(),
            reflow: ReflowSection::default(),
            eval: EvalSection::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Parses strict JSON, reporting line and column on failure.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, origin: &Path) -> LabResult<T> {
    serde_json::from_str(text).map_err(|e| {
        LabError::Config(format!(
            "{}: line {} column {}: {e}",
            origin.display(),
            e.line(),
            e.column()
        ))
    })
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> LabResult<T> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| LabError::Config(format!("{}: not UTF-8", path.display())))?;
    parse_json(&text, path)
}

impl RunConfig {
    pub fn load(path: &Path) -> LabResult<Self> {
        let cfg: Self = load_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> LabResult<()> {
        self.task.validate()?;
        self.estimator.resolve(&self.task)?;
        self.train.validate()?;
        self.reflow.train.validate()?;
        self.reflow.distill.validate()?;
        self.solver.validate()?;
        self.guidance.validate()?;
        self.reflow.solver.validate()?;
        self.reflow.guidance.validate()?;
        if self.reflow.shard_size == 0 {
            return Err(LabError::Config("reflow.shard_size must be positive".into()));
        }
        if self.eval.samples < 2 {
            return Err(LabError::Config("eval.samples must be at least 2".into()));
        }
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn stage_path(&self, stage: &str) -> PathBuf {
        self.out_dir.join(format!("{stage}.rfck"))
    }

    pub fn loss_path(&self, stage: &str) -> PathBuf {
        self.out_dir.join(format!("{stage}_loss.csv"))
    }

    pub fn store_dir(&self) -> PathBuf {
        self.out_dir.join("reflow_store")
    }

    pub fn data_path(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out_dir.join("data.rfds"))
    }
}
