//! Checkpoints: parameters and Adam moments as named tensors, everything
//! else (config, step, random streams, batch order, controller and section
//! state, open window) in the container metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Batcher, RecordStore};
use crate::discriminator::SectionState;
use crate::exit_controller::ExitDistribution;
use crate::numerics::{encode_container, read_container, Container, Tensor};

use super::metrics::{MetricsWindow, WindowAccumulator};
use super::{Model, Streams, TrainConfig, TrainError, TrainResult, Trainer};

pub const CHECKPOINT_FORMAT: &str = "rtd-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: String,
    config: TrainConfig,
    step: usize,
    vocab_size: usize,
    max_len: usize,
    batcher: Batcher,
    streams: Streams,
    controller: Option<ExitDistribution>,
    sections: Option<SectionState>,
    window: WindowAccumulator,
    history: Vec<MetricsWindow>,
    adam_step: u64,
    adam_counts: Vec<u64>,
}

fn moment_name(kind: &str, name: &str) -> String {
    format!("adam.{kind}/{name}")
}

fn copy_into(dst: &mut Tensor<f32>, name: &str, ckpt: &Container) -> TrainResult<()> {
    let src = ckpt.get(name).ok_or_else(|| TrainError::MissingTensor(name.to_string()))?;
    if src.shape() != dst.shape() {
        return Err(TrainError::ShapeMismatch {
            name: name.to_string(),
            expected: dst.shape().to_vec(),
            found: src.shape().to_vec(),
        });
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

/// Copies `embed.tokens` from the configured checkpoint and freezes it.
pub(super) fn load_frozen_embeddings(cfg: &TrainConfig, model: &mut Model) -> TrainResult<()> {
    let path = cfg
        .embgen
        .frozen_embeddings_path
        .as_ref()
        .ok_or_else(|| TrainError::Config("frozen embeddings need embgen.frozen_embeddings_path".into()))?;
    let ckpt = read_container(path)?;
    let id = model.embed.tokens;
    copy_into(model.store.get_mut(id), "embed.tokens", &ckpt)?;
    model.store.set_frozen(id, true);
    Ok(())
}

impl<'a> Trainer<'a> {
    /// Serialized checkpoint bytes.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.cfg.clone(),
            step: self.step,
            vocab_size: self.model.vocab,
            max_len: self.model.max_len,
            batcher: self.batcher.clone(),
            streams: self.streams.clone(),
            controller: self.controller.clone(),
            sections: self.sections.clone(),
            window: self.window.clone(),
            history: self.history.clone(),
            adam_step: self.adam.step,
            adam_counts: self.adam.counts.clone(),
        };
        let store = &self.model.store;
        let mut names: Vec<String> = Vec::new();
        let mut tensors: Vec<&Tensor<f32>> = Vec::new();
        for (_, name, t) in store.iter() {
            names.push(name.to_string());
            tensors.push(t);
        }
        for (kind, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for ((_, name, _), t) in store.iter().zip(moments) {
                names.push(moment_name(kind, name));
                tensors.push(t);
            }
        }
        let meta = serde_json::to_value(&meta).expect("checkpoint metadata serializes");
        encode_container(names.iter().map(String::as_str).zip(tensors), &meta)
    }

    pub fn save_checkpoint(&self, path: &Path) -> TrainResult<()> {
        let io = |e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        std::fs::write(path, self.checkpoint_bytes()).map_err(io)?;
        log::info!("checkpoint written to {}", path.display());
        Ok(())
    }

    /// Rebuilds a trainer from `cfg` and restores the checkpoint into it.
    /// Tensor shapes must match what `cfg` builds. Metrics are appended to
    /// the configured log.
    pub fn resume(cfg: TrainConfig, data: &'a RecordStore, path: &Path) -> TrainResult<Self> {
        let ckpt = read_container(path)?;
        let meta: Meta =
            serde_json::from_value(ckpt.metadata.clone()).map_err(|e| TrainError::CheckpointMetadata(e.to_string()))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(TrainError::CheckpointMetadata(format!("unexpected format {:?}", meta.format)));
        }
        let metrics = cfg.metrics.clone();
        let mut t = Trainer::new(
            TrainConfig {
                metrics: None,
                ..cfg
            },
            data,
        )?;
        let ids: Vec<_> = t.model.store.ids().collect();
        for id in &ids {
            let name = t.model.store.name(*id).to_string();
            copy_into(t.model.store.get_mut(*id), &name, &ckpt)?;
            copy_into(&mut t.adam.m[id.index()], &moment_name("m", &name), &ckpt)?;
            copy_into(&mut t.adam.v[id.index()], &moment_name("v", &name), &ckpt)?;
        }
        if meta.adam_counts.len() != ids.len() {
            return Err(TrainError::CheckpointMetadata("optimizer state does not match parameters".into()));
        }
        t.adam.step = meta.adam_step;
        t.adam.counts = meta.adam_counts;
        t.step = meta.step;
        t.batcher = meta.batcher;
        t.streams = meta.streams;
        t.controller = meta.controller;
        t.sections = meta.sections;
        t.window = meta.window;
        t.history = meta.history;
        t.cfg.metrics = metrics;
        t.sink = super::open_sink(&t.cfg, true)?;
        Ok(t)
    }
}
