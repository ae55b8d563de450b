//! Checkpoint directories.
//!
//! ```text
//! manifest.json   format version, config hash, counters, tensor table
//! tensors.bin     little-endian f64 payload addressed by the table
//! replay.jsonl    replay buffer, oldest episode first
//! config.toml     resolved run configuration
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use gatecomm_core::diff::{ParameterSet, Tensor};
use gatecomm_core::nets::{ArchConfig, Networks};
use gatecomm_core::traffic::EnvSpec;
use gatecomm_core::train::{stream_rng, Episode, ReplayBuffer, Trainer, TrainerProgress};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{AppError, AppResult};

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const TENSORS: &str = "tensors.bin";
const REPLAY: &str = "replay.jsonl";
const CONFIG: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Params,
    Target,
    Optimizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: TensorGroup,
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset and length in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub episode: u64,
    pub progress: TrainerProgress,
    pub arch: ArchConfig,
    pub replay_capacity: usize,
    pub replay_inserted: u64,
    pub replay_len: usize,
    pub tensors: Vec<TensorEntry>,
}

/// Directory name used for the checkpoint taken after `episode` episodes.
pub fn checkpoint_dir(out_dir: &Path, episode: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("episode-{episode:06}"))
}

/// Writes a complete, resumable snapshot of `trainer` into `dir`.
pub fn save(dir: &Path, config: &RunConfig, trainer: &Trainer) -> AppResult<()> {
    fs::create_dir_all(dir).map_err(AppError::io(dir))?;
    let mut tensors = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let mut push = |group, name: &str, t: &Tensor| {
        tensors.push(TensorEntry {
            group,
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
            len: t.len(),
        });
        payload.extend_from_slice(t.data());
    };
    for (name, t) in trainer.params.iter() {
        push(TensorGroup::Params, name, t);
    }
    for (name, t) in trainer.target.iter() {
        push(TensorGroup::Target, name, t);
    }
    for ((name, _), t) in trainer.params.iter().zip(trainer.optimizer.state()) {
        push(TensorGroup::Optimizer, name, t);
    }

    let path = dir.join(TENSORS);
    let bytes: Vec<u8> = payload.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&path, bytes).map_err(AppError::io(&path))?;

    let path = dir.join(REPLAY);
    let file = fs::File::create(&path).map_err(AppError::io(&path))?;
    let mut w = BufWriter::new(file);
    for ep in trainer.buffer.iter() {
        serde_json::to_writer(&mut w, ep).map_err(|e| AppError::checkpoint(&path, e.to_string()))?;
        w.write_all(b"\n").map_err(AppError::io(&path))?;
    }
    w.flush().map_err(AppError::io(&path))?;

    config.archive(dir)?;

    let progress = trainer.progress();
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config_hash: config.hash()?,
        episode: progress.episodes,
        progress,
        arch: trainer.nets.arch.clone(),
        replay_capacity: trainer.buffer.capacity(),
        replay_inserted: trainer.buffer.inserted(),
        replay_len: trainer.buffer.len(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| AppError::checkpoint(&path, e.to_string()))?;
    fs::write(&path, text).map_err(AppError::io(&path))
}

/// A loaded checkpoint before it is turned into a trainer or a policy.
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: CheckpointManifest,
    pub config: RunConfig,
    pub env: EnvSpec,
    payload: Vec<f64>,
}

impl Checkpoint {
    pub fn open(dir: &Path) -> AppResult<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(AppError::io(&path))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| AppError::checkpoint(dir, format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(AppError::checkpoint(
                dir,
                format!("format version {} (expected {FORMAT_VERSION})", manifest.format_version),
            ));
        }
        let config = RunConfig::load(&dir.join(CONFIG))?;
        if config.hash()? != manifest.config_hash {
            return Err(AppError::checkpoint(dir, "config.toml does not match the manifest hash"));
        }
        let env = config.environment()?;
        let expected = config.arch.for_env(&env);
        if expected != manifest.arch {
            return Err(AppError::checkpoint(dir, "architecture does not match the configuration"));
        }

        let path = dir.join(TENSORS);
        let bytes = fs::read(&path).map_err(AppError::io(&path))?;
        if bytes.len() % 8 != 0 {
            return Err(AppError::checkpoint(dir, "tensor payload is not a whole number of f64 values"));
        }
        let payload: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        for t in &manifest.tensors {
            let n: usize = t.shape.iter().product();
            if n != t.len || t.offset + t.len > payload.len() {
                return Err(AppError::checkpoint(dir, format!("tensor {} lies outside the payload", t.name)));
            }
        }
        Ok(Self { dir: dir.to_path_buf(), manifest, config, env, payload })
    }

    fn tensors(&self, group: TensorGroup) -> AppResult<Vec<(&str, Tensor)>> {
        self.manifest
            .tensors
            .iter()
            .filter(|t| t.group == group)
            .map(|t| {
                let data = self.payload[t.offset..t.offset + t.len].to_vec();
                Ok((t.name.as_str(), Tensor::new(t.shape.clone(), data)?))
            })
            .collect()
    }

    /// Copies a tensor group into `params`, which must match name for name and shape for shape.
    fn fill(&self, group: TensorGroup, params: &mut ParameterSet) -> AppResult<()> {
        let saved = self.tensors(group)?;
        if saved.len() != params.len() {
            return Err(AppError::checkpoint(
                &self.dir,
                format!("{group:?}: {} tensors saved, {} expected", saved.len(), params.len()),
            ));
        }
        for (name, t) in saved {
            params.set(name, t).map_err(|e| AppError::checkpoint(&self.dir, e.to_string()))?;
        }
        Ok(())
    }

    /// Networks and online parameters only.
    pub fn policy(&self) -> AppResult<(Networks, ParameterSet)> {
        let (nets, mut params) = Networks::new(self.manifest.arch.clone(), &mut stream_rng(0, 0))?;
        self.fill(TensorGroup::Params, &mut params)?;
        Ok((nets, params))
    }

    /// Full training state, ready to continue where it stopped.
    pub fn trainer(&self) -> AppResult<Trainer> {
        let mut trainer = Trainer::with_arch(self.env.clone(), self.config.train.clone(), self.manifest.arch.clone())?;
        self.fill(TensorGroup::Params, &mut trainer.params)?;
        self.fill(TensorGroup::Target, &mut trainer.target)?;
        let state: Vec<Tensor> = self.tensors(TensorGroup::Optimizer)?.into_iter().map(|(_, t)| t).collect();
        trainer.optimizer.restore_state(state).map_err(|e| AppError::checkpoint(&self.dir, e.to_string()))?;

        let path = self.dir.join(REPLAY);
        let file = fs::File::open(&path).map_err(AppError::io(&path))?;
        let mut episodes = Vec::with_capacity(self.manifest.replay_len);
        for line in BufReader::new(file).lines() {
            let line = line.map_err(AppError::io(&path))?;
            let ep: Episode =
                serde_json::from_str(&line).map_err(|e| AppError::checkpoint(&path, e.to_string()))?;
            episodes.push(ep);
        }
        if episodes.len() != self.manifest.replay_len {
            return Err(AppError::checkpoint(&path, "replay length differs from the manifest"));
        }
        trainer.buffer = ReplayBuffer::restore(self.manifest.replay_capacity, episodes, self.manifest.replay_inserted)?;
        trainer.restore_progress(&self.manifest.progress);
        Ok(trainer)
    }
}
