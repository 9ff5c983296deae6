//! Run configuration: one JSON file describes a whole experiment
//! (paths, quantizer, model, training); CLI flags override individual
//! fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneKind, Mode};
use crate::dataset::Modality;
use crate::error::{MotorError, Result};
use crate::tcn::TcnVariant;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizerConfig {
    /// Sub-vector slots per modality, canonical order (vision, text).
    pub slots_vision: usize,
    pub slots_text: usize,
    pub codebook_size: usize,
    pub opq: bool,
    pub opq_outer_iters: usize,
    pub kmeans_iters: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            slots_vision: 8,
            slots_text: 8,
            codebook_size: 256,
            opq: false,
            opq_outer_iters: 10,
            kmeans_iters: 25,
        }
    }
}

impl QuantizerConfig {
    pub fn slots_for(&self, modality: Modality) -> usize {
        match modality {
            Modality::Vision => self.slots_vision,
            Modality::Text => self.slots_text,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub mode: Mode,
    pub tcn_variant: TcnVariant,
    /// Embedding width d.
    pub dim: usize,
    /// LightGCN propagation depth L; ignored by the other backbones.
    pub lightgcn_layers: usize,
    /// Token modalities fed to the model; dropping one is the
    /// single-modality ablation.
    pub modalities: Vec<Modality>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::BprMf,
            mode: Mode::IdFree,
            tcn_variant: TcnVariant::ModalAgnostic,
            dim: 64,
            lightgcn_layers: 2,
            modalities: vec![Modality::Vision, Modality::Text],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub interactions: PathBuf,
    pub vision_features: Option<PathBuf>,
    pub text_features: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub quantizer: QuantizerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            interactions: PathBuf::from("interactions.tsv"),
            vision_features: None,
            text_features: None,
            output_dir: PathBuf::from("out"),
            quantizer: QuantizerConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.dim == 0 {
            return Err(MotorError::Config("model.dim must be positive".into()));
        }
        if self.quantizer.codebook_size == 0 || self.quantizer.codebook_size > u16::MAX as usize + 1
        {
            return Err(MotorError::Config(format!(
                "codebook_size {} outside 1..=65536",
                self.quantizer.codebook_size
            )));
        }
        if self.model.modalities.is_empty() {
            return Err(MotorError::Config("at least one modality required".into()));
        }
        let mut seen = Vec::new();
        for &m in &self.model.modalities {
            if seen.contains(&m) {
                return Err(MotorError::Config(format!("duplicate modality {m:?}")));
            }
            seen.push(m);
        }
        for m in [Modality::Vision, Modality::Text] {
            let d = self.quantizer.slots_for(m);
            if !matches!(d, 2 | 4 | 8 | 16) {
                log::warn!("{m:?} slot count {d} is outside the studied range {{2,4,8,16}}");
            }
        }
        Ok(())
    }

    pub fn features_path(&self, modality: Modality) -> Option<&Path> {
        match modality {
            Modality::Vision => self.vision_features.as_deref(),
            Modality::Text => self.text_features.as_deref(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Deterministic run identifier: hex digest of the canonical config
    /// JSON (FNV-1a, 64-bit).
    pub fn run_id(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_json().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}
