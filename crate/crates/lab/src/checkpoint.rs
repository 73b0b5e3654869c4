use std::path::Path;

use rflow_core::estimator::{Estimator, EstimatorConfig};
use rflow_core::optim::AdamState;
use rflow_core::{LayerParams, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};
use crate::format::{self, content_id, format_err, tensor_text, text_tensor};
use crate::task::Task;

/// Version string written into every artifact.
pub const VERSION: &str = concat!("rflow ", env!("CARGO_PKG_VERSION"));

/// Provenance stored next to the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Content hash of the parameter tensors.
    pub id: String,
    /// `rfm`, `reflow` or `distill`.
    pub stage: String,
    /// Id of the checkpoint this one was trained from.
    pub parent: Option<String>,
    /// Id of the reflow store used for training, if any.
    pub reflow_store: Option<String>,
    pub task: Task,
    /// Guidance scale used when sampling without an explicit `--gamma`.
    pub sample_gamma: f64,
    pub steps_trained: usize,
    pub version: String,
    /// The resolved run configuration.
    pub run_config: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: EstimatorConfig,
    pub params: LayerParams<f32>,
    pub adam: Option<AdamState>,
    pub meta: CheckpointMeta,
}

/// Id of a parameter set: hash of its container encoding.
pub fn params_id(params: &LayerParams<f32>) -> String {
    let entries: Vec<(String, Tensor<f32>)> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    content_id(&format::encode_container(&entries))
}

impl Checkpoint {
    pub fn estimator(&self) -> LabResult<Estimator> {
        Ok(Estimator::from_params(self.config.clone(), self.params.clone())?)
    }

    pub fn entries(&self) -> LabResult<format::Entries> {
        let mut e: format::Entries = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        if let Some(a) = &self.adam {
            e.extend(a.m.iter().map(|(n, t)| (format!("{n}.m"), t.clone())));
            e.extend(a.v.iter().map(|(n, t)| (format!("{n}.v"), t.clone())));
            e.push(("adam.step".into(), Tensor::new(vec![1], vec![a.step as f32]).unwrap()));
        }
        e.push(("config".into(), text_tensor(&to_json(&self.config)?)));
        e.push(("meta".into(), text_tensor(&to_json(&self.meta)?)));
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> LabResult<()> {
        format::save_container(path, &self.entries()?)
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let entries = format::load_container(path)?;
        Self::from_entries(entries).map_err(|m| format_err(path, m))
    }

    fn from_entries(entries: format::Entries) -> Result<Self, String> {
        let mut config = None;
        let mut meta = None;
        let mut params = LayerParams::new();
        let mut m = LayerParams::new();
        let mut v = LayerParams::new();
        let mut step = None;
        for (name, t) in entries {
            match name.as_str() {
                "config" => config = Some(tensor_text(&t)?),
                "meta" => meta = Some(tensor_text(&t)?),
                "adam.step" => step = Some(t.data()[0] as u64),
                _ => {
                    let (store, key) = if let Some(k) = name.strip_suffix(".m") {
                        (&mut m, k.to_string())
                    } else if let Some(k) = name.strip_suffix(".v") {
                        (&mut v, k.to_string())
                    } else {
                        (&mut params, name.clone())
                    };
                    store.insert(key, t).map_err(|e| e.to_string())?;
                }
            }
        }
        let config: EstimatorConfig =
            serde_json::from_str(&config.ok_or("missing `config` record")?).map_err(|e| format!("config record: {e}"))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta.ok_or("missing `meta` record")?).map_err(|e| format!("meta record: {e}"))?;
        let adam = match step {
            Some(step) => {
                m.check_compatible(&params).map_err(|e| e.to_string())?;
                v.check_compatible(&params).map_err(|e| e.to_string())?;
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        Ok(Self {
            config,
            params,
            adam,
            meta,
        })
    }
}

/// Loads a checkpoint and checks that it fits `task`.
pub fn load_for_task(path: &Path, task: &Task) -> LabResult<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    task.check_estimator(&ck.config)?;
    if &ck.meta.task != task {
        return Err(LabError::Mismatch(format!(
            "{} was trained on a different {} task",
            path.display(),
            ck.meta.task.name()
        )));
    }
    Ok(ck)
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> LabResult<String> {
    serde_json::to_string(v).map_err(|e| LabError::Config(e.to_string()))
}
