//! Reflow triplet store: shard files in the tensor container plus `meta.json`.

use std::path::{Path, PathBuf};

use rflow_core::estimator::ConditionSeq;
use rflow_core::rectify::{ReflowDatasetMeta, ReflowStore, ReflowTriplet};
use rflow_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::VERSION;
use crate::config::load_json;
use crate::error::{LabError, LabResult};
use crate::format::{content_id, encode_container, format_err, load_container, write_file, Entries};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreMeta {
    /// Hash of all shard contents.
    pub id: String,
    pub generation: ReflowDatasetMeta,
    pub shards: Vec<String>,
    pub shard_size: usize,
    pub version: String,
    pub run_config: serde_json::Value,
}

pub const META_FILE: &str = "meta.json";

fn shard_entries(first: usize, triplets: &[ReflowTriplet]) -> Entries {
    let mut e = Vec::with_capacity(4 * triplets.len());
    for (j, t) in triplets.iter().enumerate() {
        let i = first + j;
        e.push((format!("item{i}.x0"), t.x0_prime.clone()));
        e.push((format!("item{i}.x1hat"), t.x1_hat.clone()));
        e.push((format!("item{i}.c"), t.c.features.clone()));
        e.push((format!("item{i}.null"), Tensor::new(vec![1], vec![t.c.null as u8 as f32]).unwrap()));
    }
    e
}

pub fn save_store(dir: &Path, store: &ReflowStore, shard_size: usize, run_config: serde_json::Value) -> LabResult<StoreMeta> {
    let mut shards = Vec::new();
    let mut all = Vec::new();
    for (s, chunk) in store.triplets.chunks(shard_size.max(1)).enumerate() {
        let bytes = encode_container(&shard_entries(s * shard_size, chunk));
        let name = format!("shard{s:04}.rfck");
        write_file(&dir.join(&name), &bytes)?;
        all.extend_from_slice(&bytes);
        shards.push(name);
    }
    let meta = StoreMeta {
        id: content_id(&all),
        generation: store.meta.clone(),
        shards,
        shard_size,
        version: VERSION.into(),
        run_config,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| LabError::Config(e.to_string()))?;
    write_file(&dir.join(META_FILE), json.as_bytes())?;
    Ok(meta)
}

fn take(e: &mut std::collections::BTreeMap<String, Tensor<f32>>, name: &str) -> Result<Tensor<f32>, String> {
    e.remove(name).ok_or_else(|| format!("missing tensor `{name}`"))
}

pub fn load_store(dir: &Path) -> LabResult<(ReflowStore, StoreMeta)> {
    let meta_path = dir.join(META_FILE);
    if !dir.exists() {
        return Err(LabError::Missing(dir.into()));
    }
    let meta: StoreMeta = load_json(&meta_path)?;
    let mut triplets = Vec::with_capacity(meta.generation.item_count);
    for (s, name) in meta.shards.iter().enumerate() {
        let path: PathBuf = dir.join(name);
        let mut map: std::collections::BTreeMap<_, _> = load_container(&path)?.into_iter().collect();
        let first = s * meta.shard_size;
        let n = map.len() / 4;
        for i in first..first + n {
            let mut get = |suffix: &str| take(&mut map, &format!("item{i}.{suffix}")).map_err(|m| format_err(&path, m));
            let x0 = get("x0")?;
            let x1 = get("x1hat")?;
            let c = get("c")?;
            let null = get("null")?.data()[0] != 0.0;
            triplets.push(ReflowTriplet {
                x0_prime: x0,
                x1_hat: x1,
                c: ConditionSeq { features: c, null },
            });
        }
        if !map.is_empty() {
            return Err(format_err(&path, format!("unexpected tensors: {:?}", map.keys().collect::<Vec<_>>())));
        }
    }
    if triplets.len() != meta.generation.item_count {
        return Err(format_err(
            &meta_path,
            format!("meta lists {} items, shards hold {}", meta.generation.item_count, triplets.len()),
        ));
    }
    Ok((
        ReflowStore {
            triplets,
            meta: meta.generation.clone(),
        },
        meta,
    ))
}
