//! Toy-backend checkpoints: a tensor dump plus a JSON sidecar with the
//! architecture, the training settings and content hashes.

use std::path::{Path, PathBuf};

use digress_core::backend::toy::{ToyBackend, ToyConfig};
use digress_core::backend::train::{TrainConfig, TrainReport};
use digress_core::schedule::ScheduleConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result, StageExt};
use crate::io;

pub const FORMAT: &str = "digress-toy-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfigFile {
    pub pixel_size: usize,
    pub downsample: usize,
    pub width: usize,
    pub mid_width: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub detail_gain: f64,
    pub max_timestep: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
}

impl From<ToyConfig> for ToyConfigFile {
    fn from(c: ToyConfig) -> Self {
        Self {
            pixel_size: c.pixel_size,
            downsample: c.downsample,
            width: c.width,
            mid_width: c.mid_width,
            embed_dim: c.embed_dim,
            vocab_size: c.vocab_size,
            max_tokens: c.max_tokens,
            detail_gain: c.detail_gain,
            max_timestep: c.schedule.max_timestep,
            beta_start: c.schedule.beta_start,
            beta_end: c.schedule.beta_end,
            seed: c.seed,
        }
    }
}

impl From<ToyConfigFile> for ToyConfig {
    fn from(c: ToyConfigFile) -> Self {
        Self {
            pixel_size: c.pixel_size,
            downsample: c.downsample,
            width: c.width,
            mid_width: c.mid_width,
            embed_dim: c.embed_dim,
            vocab_size: c.vocab_size,
            max_tokens: c.max_tokens,
            detail_gain: c.detail_gain,
            schedule: ScheduleConfig {
                max_timestep: c.max_timestep,
                beta_start: c.beta_start,
                beta_end: c.beta_end,
            },
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub null_prompt_prob: f64,
    pub random_mask_prob: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub corpus_sha256: String,
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
    pub first_step_loss: f64,
    pub last_step_loss: f64,
}

impl TrainingRecord {
    pub fn new(cfg: &TrainConfig, report: &TrainReport, corpus_sha256: String) -> Self {
        Self {
            steps: cfg.steps,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            null_prompt_prob: cfg.null_prompt_prob,
            random_mask_prob: cfg.random_mask_prob,
            clip_norm: cfg.clip_norm,
            seed: cfg.seed,
            corpus_sha256,
            initial_probe_loss: report.initial_probe_loss,
            final_probe_loss: report.final_probe_loss,
            first_step_loss: report.step_losses.first().copied().unwrap_or(f64::NAN),
            last_step_loss: report.step_losses.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub config: ToyConfigFile,
    /// Hex FNV-1a fingerprint of the weights.
    pub weights_fingerprint: String,
    pub tensors_sha256: String,
    pub training: Option<TrainingRecord>,
}

/// Sidecar path for a checkpoint: `x.bin` pairs with `x.json`.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn save(bin: &Path, backend: &ToyBackend, training: Option<TrainingRecord>) -> Result<Sidecar> {
    let bytes = io::encode_tensors(&backend.checkpoint_tensors());
    io::write_bytes(bin, &bytes)?;
    let sidecar = Sidecar {
        format: FORMAT.to_string(),
        config: (*backend.config()).into(),
        weights_fingerprint: format!("{:016x}", backend.weights_fingerprint()),
        tensors_sha256: io::sha256_hex(&bytes),
        training,
    };
    io::write_json(&sidecar_path(bin), &sidecar)?;
    Ok(sidecar)
}

pub fn load(bin: &Path) -> Result<(ToyBackend, Sidecar)> {
    let side_path = sidecar_path(bin);
    let sidecar: Sidecar = io::read_json(&side_path)?;
    if sidecar.format != FORMAT {
        return Err(AppError::format(&side_path, format!("unknown checkpoint format {:?}", sidecar.format)));
    }
    let bytes = io::read_bytes(bin)?;
    if io::sha256_hex(&bytes) != sidecar.tensors_sha256 {
        return Err(AppError::format(bin, "tensor file does not match the sidecar hash"));
    }
    let tensors = io::decode_tensors(&bytes).map_err(|e| AppError::format(bin, e))?;
    let mut backend = ToyBackend::new(sidecar.config.into()).stage("load checkpoint")?;
    backend.load_checkpoint_tensors(tensors).stage("load checkpoint")?;
    Ok((backend, sidecar))
}

/// Directory holding the bundled corpus and checkpoint.
pub fn assets_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets")
}

pub fn bundled_checkpoint() -> PathBuf {
    assets_dir().join("toy.bin")
}

pub fn bundled_corpus() -> PathBuf {
    assets_dir().join("corpus")
}
