//! Run configuration: one TOML file covering every tunable constant, with
//! desk-scale defaults. Unknown keys are rejected; a fully resolved copy is
//! echoed into every output artifact (logs, checkpoints, reports).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub augmentation: AugmentationConfig,
    pub evaluation: EvalConfig,
    pub synthesis: SynthesisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            augmentation: AugmentationConfig::default(),
            evaluation: EvalConfig::default(),
            synthesis: SynthesisConfig::default(),
        }
    }
}

/// Encoder dimensions. Full-scale reference values are d_tok 768 and d_share
/// 1024; the desk-scale defaults keep CPU runs fast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_tok: usize,
    pub d_share: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Accepted for completeness; only 0.0 is valid (no train/eval
    /// discrepancy by construction).
    pub dropout: f64,
    /// L2-normalize embeddings before the loss instead of relying on cosine
    /// normalization alone.
    pub normalize_embeddings: bool,
    /// Image feature dimension (precomputed-feature corpora) or the pixel
    /// frontend's output width (pixel corpora).
    pub image_input_dim: usize,
    /// Encoder input resolution for pixel corpora (square).
    pub image_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_tok: 32,
            d_share: 32,
            layers: 2,
            heads: 2,
            max_len: 512,
            dropout: 0.0,
            normalize_embeddings: false,
            image_input_dim: 64,
            image_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub margin: f64,
    pub lr_initial: f64,
    pub lr_after: f64,
    pub lr_switch_epoch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 32,
            epochs: 50,
            margin: 0.3,
            lr_initial: 1e-4,
            lr_after: 1e-5,
            lr_switch_epoch: 40,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Stage 1: uniform draw among the original text and the two
    /// back-translated paraphrases.
    pub language_stage1: bool,
    /// Stage 2: uniform draw among the stage-1 result and the four
    /// translations.
    pub language_stage2: bool,
    /// Pixel pipeline geometry; full-scale reference is resize 256, crop 224.
    pub resize_size: usize,
    pub crop_size: usize,
    pub rotation_degrees: f64,
    pub flip_probability: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            language_stage1: true,
            language_stage2: true,
            resize_size: 32,
            crop_size: 28,
            rotation_degrees: 10.0,
            flip_probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pool_size: usize,
    pub n_subsets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { pool_size: 1000, n_subsets: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub d_ca: usize,
    pub d_z: usize,
    pub gen_channels: usize,
    /// Generator output resolution (square); full-scale reference is 128.
    pub gen_image_size: usize,
    pub disc_channels: usize,
    pub lambda_c: f64,
    pub lambda_ca: f64,
    pub lambda_ret: f64,
    pub lr_initial: f64,
    pub lr_after: f64,
    pub lr_switch_epoch: usize,
    pub epochs: usize,
    /// Replace the saturating adversarial generator term log(1 - D_r) with
    /// -log D_r; useful at desk scale where the saturating form stalls.
    pub non_saturating: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            d_ca: 16,
            d_z: 16,
            gen_channels: 16,
            gen_image_size: 32,
            disc_channels: 8,
            lambda_c: 1.0,
            lambda_ca: 1.0,
            lambda_ret: 32.0,
            lr_initial: 1e-4,
            lr_after: 1e-5,
            lr_switch_epoch: 30,
            epochs: 50,
            non_saturating: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d_tok == 0 || m.d_share == 0 || m.layers == 0 || m.heads == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if !m.d_tok.is_multiple_of(m.heads) {
            return Err(Error::config(format!(
                "d_tok {} must be divisible by heads {}",
                m.d_tok, m.heads
            )));
        }
        if m.max_len < 2 {
            return Err(Error::config("max_len must be at least 2 (CLS plus one piece)"));
        }
        if m.dropout != 0.0 {
            return Err(Error::config("dropout must be 0.0; other values are unsupported"));
        }
        if m.image_input_dim == 0 || m.image_size == 0 {
            return Err(Error::config("image dimensions must be positive"));
        }

        let t = &self.training;
        if t.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 (mining needs a negative)"));
        }
        if t.margin < 0.0 {
            return Err(Error::config("margin must be non-negative"));
        }
        if t.lr_initial <= 0.0 || t.lr_after <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if t.lr_after > t.lr_initial {
            return Err(Error::config("lr_after must not exceed lr_initial"));
        }

        let a = &self.augmentation;
        if a.crop_size == 0 || a.crop_size > a.resize_size {
            return Err(Error::config("crop_size must be in 1..=resize_size"));
        }
        if !(0.0..=1.0).contains(&a.flip_probability) {
            return Err(Error::config("flip_probability must be in [0, 1]"));
        }
        if a.rotation_degrees < 0.0 {
            return Err(Error::config("rotation_degrees must be non-negative"));
        }

        let e = &self.evaluation;
        if e.pool_size == 0 || e.n_subsets == 0 {
            return Err(Error::config("pool_size and n_subsets must be positive"));
        }

        let s = &self.synthesis;
        if s.d_ca == 0 || s.d_z == 0 || s.gen_channels == 0 || s.disc_channels == 0 {
            return Err(Error::config("synthesis dimensions must be positive"));
        }
        if s.lambda_c < 0.0 || s.lambda_ca < 0.0 || s.lambda_ret < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if s.lr_initial <= 0.0 || s.lr_after <= 0.0 || s.lr_after > s.lr_initial {
            return Err(Error::config("synthesis learning rates must be positive, non-increasing"));
        }
        if s.gen_image_size == 0 || !m.image_size.is_multiple_of(s.gen_image_size) {
            return Err(Error::config(format!(
                "gen_image_size {} must divide image_size {} (integer upsampling)",
                s.gen_image_size, m.image_size
            )));
        }
        Ok(())
    }

    /// Fully resolved config as JSON, for embedding into artifacts.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<RunConfig> {
        let config: RunConfig = serde_json::from_value(value.clone())
            .map_err(|e| Error::config(format!("invalid embedded config: {e}")))?;
        config.validate()?;
        Ok(config)
    }
}
