//! Model checkpoints: a container whose metadata snapshots the config and
//! the frozen-partition manifest.

use std::path::Path;

use mome_core::backbone::Model;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::container::Container;
use crate::error::{self, LabError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Backbone,
    Adapters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrozenManifest {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
    /// SHA-256 of the backbone group, hex.
    pub frozen_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub step: usize,
    pub config: ExperimentConfig,
    pub partition: FrozenManifest,
}

pub fn encode(model: &Model, kind: CheckpointKind, cfg: &ExperimentConfig, step: usize) -> Vec<u8> {
    let p = model.frozen_partition();
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind,
        step,
        config: cfg.clone(),
        partition: FrozenManifest {
            frozen: p.frozen,
            trainable: p.trainable,
            frozen_hash: hex::encode(p.frozen_hash),
        },
    };
    Container {
        meta: serde_json::to_value(&meta).expect("metadata serializes"),
        tensors: model.named_params(),
    }
    .encode()
}

pub fn save(path: &Path, model: &Model, kind: CheckpointKind, cfg: &ExperimentConfig, step: usize) -> Result<()> {
    error::write(path, &encode(model, kind, cfg, step))
}

/// Rebuilds the model stored at `path`, checking the content hash, the
/// frozen-partition hash and that its architecture matches `cfg`.
pub fn load(path: &Path, cfg: &ExperimentConfig) -> Result<(Model, CheckpointMeta)> {
    let bytes = error::read(path)?;
    let c = Container::decode(&bytes).map_err(|e| LabError::integrity(path, e.to_string()))?;
    let meta: CheckpointMeta =
        serde_json::from_value(c.meta).map_err(|e| LabError::integrity(path, format!("metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(LabError::integrity(path, format!("checkpoint format {}", meta.format_version)));
    }
    let saved = &meta.config;
    if saved.model != cfg.model {
        return Err(LabError::integrity(path, "model section differs from the current configuration"));
    }
    if meta.kind == CheckpointKind::Adapters && saved.adapter_spec() != cfg.adapter_spec() {
        return Err(LabError::integrity(
            path,
            "mome, grid or compression settings differ from the current configuration",
        ));
    }
    let mut model = Model::new(saved.model.clone(), 0)?;
    if meta.kind == CheckpointKind::Adapters {
        model.attach_adapters(saved.adapter_spec(), 0)?;
    }
    model
        .load_named(&c.tensors)
        .map_err(|e| LabError::integrity(path, e.to_string()))?;
    if hex::encode(model.frozen_partition().frozen_hash) != meta.partition.frozen_hash {
        return Err(LabError::integrity(path, "frozen-partition hash does not match the stored weights"));
    }
    Ok((model, meta))
}
