use rflow_core::estimator::{ConditionSeq, EstimatorConfig};
use rflow_core::rfm::TrainItem;
use rflow_core::toydata::{gen_events, gen_gauss, EventTaskSpec, GaussTaskSpec};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

/// A synthetic task; the JSON form carries a `kind` tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    Gauss(GaussTaskSpec),
    Events(EventTaskSpec),
}

impl Default for Task {
    fn default() -> Self {
        Task::Gauss(GaussTaskSpec::default())
    }
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Gauss(_) => "gauss",
            Task::Events(_) => "events",
        }
    }

    pub fn validate(&self) -> LabResult<()> {
        match self {
            Task::Gauss(s) => s.validate()?,
            Task::Events(s) => s.validate()?,
        }
        Ok(())
    }

    pub fn generate(&self) -> LabResult<Vec<TrainItem>> {
        Ok(match self {
            Task::Gauss(s) => gen_gauss(s)?,
            Task::Events(s) => gen_events(s)?,
        })
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        match self {
            Task::Gauss(s) => s.latent_shape(),
            Task::Events(s) => [s.latent_len(), s.dim],
        }
    }

    pub fn cond_shape(&self) -> [usize; 2] {
        match self {
            Task::Gauss(s) => [1, s.num_classes],
            Task::Events(s) => [s.cond_len, s.cond_dim()],
        }
    }

    pub fn regulate_ratio(&self) -> usize {
        match self {
            Task::Gauss(s) => s.regulate_ratio,
            Task::Events(s) => s.regulate_ratio,
        }
    }

    /// Tiny estimator sized for this task.
    pub fn tiny_estimator(&self) -> EstimatorConfig {
        let [lx, dx] = self.latent_shape();
        EstimatorConfig::tiny(dx, self.cond_shape()[1], self.regulate_ratio(), lx)
    }

    /// Fails unless `cfg` consumes this task's shapes.
    pub fn check_estimator(&self, cfg: &EstimatorConfig) -> LabResult<()> {
        let [lx, dx] = self.latent_shape();
        let [_, dc] = self.cond_shape();
        if cfg.latent_dim != dx || cfg.cond_dim != dc || cfg.regulate_ratio != self.regulate_ratio() || cfg.max_seq_len < lx {
            return Err(LabError::Mismatch(format!(
                "estimator (latent {}, cond {}, ratio {}, max_seq_len {}) does not fit {} task (latent {dx}, cond {dc}, ratio {}, length {lx})",
                cfg.latent_dim,
                cfg.cond_dim,
                cfg.regulate_ratio,
                cfg.max_seq_len,
                self.name(),
                self.regulate_ratio()
            )));
        }
        Ok(())
    }

    pub fn check_item(&self, it: &TrainItem) -> LabResult<()> {
        if it.x1.shape() != self.latent_shape() || it.c.features.shape() != self.cond_shape() {
            return Err(LabError::Mismatch(format!(
                "item shapes {:?}/{:?} do not match {} task {:?}/{:?}",
                it.x1.shape(),
                it.c.features.shape(),
                self.name(),
                self.latent_shape(),
                self.cond_shape()
            )));
        }
        Ok(())
    }

    /// Conditions for evaluation: one block of `n` per class for Gauss, or
    /// `n` fresh event sequences for Events.
    pub fn eval_conditions(&self, n: usize) -> LabResult<Vec<ConditionSeq>> {
        Ok(match self {
            Task::Gauss(s) => (0..s.num_classes)
                .flat_map(|k| std::iter::repeat_n(s.condition(k), n))
                .collect(),
            Task::Events(s) => {
                // Fresh event sequences; conditions do not depend on the templates.
                let spec = EventTaskSpec {
                    num_items: n,
                    seed: s.seed.wrapping_add(0x5eed),
                    ..s.clone()
                };
                gen_events(&spec)?.into_iter().map(|it| it.c).collect()
            }
        })
    }

    /// Conditions for `n` samples: classes in turn for Gauss, fresh event
    /// sequences for Events.
    pub fn sample_conditions(&self, n: usize) -> LabResult<Vec<ConditionSeq>> {
        match self {
            Task::Gauss(s) => Ok((0..n).map(|i| s.condition(i % s.num_classes)).collect()),
            Task::Events(_) => self.eval_conditions(n),
        }
    }
}
