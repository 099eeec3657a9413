//! Flat key=value run configuration with a closed key registry.
//!
//! Every tunable has a desk-scale default; a config file can override any of
//! them, command-line flags override the file, and the effective settings
//! hash into a short fingerprint that every output document embeds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diffusion::UNetConfig;
use crate::model::ModelConfig;
use crate::train::{StageConfig, DEFAULT_LR, DEFAULT_WEIGHT_DECAY, PRETRAIN_LR};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config line {line} is not key=value: {text:?}")]
    BadLine { line: usize, text: String },
    #[error("config key {key} rejects value {value:?}: {reason}")]
    BadValue { key: String, value: String, reason: String },
}

/// Every tunable the tools accept, with desk-scale defaults. The contrastive
/// weight is accepted for parity with the published training table but has no
/// effect; the loss it would scale is tied to a captioning pipeline outside
/// this project's scope.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub lr: f64,
    pub lr_pretrain: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub input_len: usize,
    pub pred_len: usize,
    pub heads: usize,
    pub dropout: f64,
    pub contrastive_weight: f64,
    pub frame_size: usize,
    pub channels0: usize,
    pub channels1: usize,
    pub d_time: usize,
    pub d_tok: usize,
    pub d_cond: usize,
    pub fusion: usize,
    pub time_hidden: usize,
    pub ddpm_steps: usize,
    pub stage0_steps: u64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub stage3_steps: u64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            lr: DEFAULT_LR,
            lr_pretrain: PRETRAIN_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            batch: 8,
            input_len: 3,
            pred_len: 1,
            heads: 2,
            dropout: 0.0,
            contrastive_weight: 0.0,
            frame_size: 16,
            channels0: 16,
            channels1: 32,
            d_time: 32,
            d_tok: 32,
            d_cond: 64,
            fusion: 32,
            time_hidden: 32,
            ddpm_steps: 100,
            stage0_steps: 1000,
            stage1_steps: 2000,
            stage2_steps: 1000,
            stage3_steps: 500,
        }
    }
}

/// Registry order; also the serialization order for the canonical form.
pub const KEYS: [&str; 22] = [
    "lr",
    "lr_pretrain",
    "weight_decay",
    "batch",
    "input_len",
    "pred_len",
    "heads",
    "dropout",
    "contrastive_weight",
    "frame_size",
    "channels0",
    "channels1",
    "d_time",
    "d_tok",
    "d_cond",
    "fusion",
    "time_hidden",
    "ddpm_steps",
    "stage0_steps",
    "stage1_steps",
    "stage2_steps",
    "stage3_steps",
];

fn parse_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: "expected a number".into(),
    })
}

fn parse_usize(key: &str, value: &str) -> Result<usize, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: "expected a non-negative integer".into(),
    })
}

fn parse_u64(key: &str, value: &str) -> Result<u64, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: "expected a non-negative integer".into(),
    })
}

impl RunConfig {
    /// Applies one key=value override. Unknown keys are errors, matching the
    /// closed registry the config file format promises.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "lr" => self.lr = parse_f64(key, value)?,
            "lr_pretrain" => self.lr_pretrain = parse_f64(key, value)?,
            "weight_decay" => self.weight_decay = parse_f64(key, value)?,
            "batch" => self.batch = parse_usize(key, value)?,
            "input_len" => self.input_len = parse_usize(key, value)?,
            "pred_len" => self.pred_len = parse_usize(key, value)?,
            "heads" => self.heads = parse_usize(key, value)?,
            "dropout" => self.dropout = parse_f64(key, value)?,
            "contrastive_weight" => self.contrastive_weight = parse_f64(key, value)?,
            "frame_size" => self.frame_size = parse_usize(key, value)?,
            "channels0" => self.channels0 = parse_usize(key, value)?,
            "channels1" => self.channels1 = parse_usize(key, value)?,
            "d_time" => self.d_time = parse_usize(key, value)?,
            "d_tok" => self.d_tok = parse_usize(key, value)?,
            "d_cond" => self.d_cond = parse_usize(key, value)?,
            "fusion" => self.fusion = parse_usize(key, value)?,
            "time_hidden" => self.time_hidden = parse_usize(key, value)?,
            "ddpm_steps" => self.ddpm_steps = parse_usize(key, value)?,
            "stage0_steps" => self.stage0_steps = parse_u64(key, value)?,
            "stage1_steps" => self.stage1_steps = parse_u64(key, value)?,
            "stage2_steps" => self.stage2_steps = parse_u64(key, value)?,
            "stage3_steps" => self.stage3_steps = parse_u64(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "lr" => format!("{}", self.lr),
            "lr_pretrain" => format!("{}", self.lr_pretrain),
            "weight_decay" => format!("{}", self.weight_decay),
            "batch" => format!("{}", self.batch),
            "input_len" => format!("{}", self.input_len),
            "pred_len" => format!("{}", self.pred_len),
            "heads" => format!("{}", self.heads),
            "dropout" => format!("{}", self.dropout),
            "contrastive_weight" => format!("{}", self.contrastive_weight),
            "frame_size" => format!("{}", self.frame_size),
            "channels0" => format!("{}", self.channels0),
            "channels1" => format!("{}", self.channels1),
            "d_time" => format!("{}", self.d_time),
            "d_tok" => format!("{}", self.d_tok),
            "d_cond" => format!("{}", self.d_cond),
            "fusion" => format!("{}", self.fusion),
            "time_hidden" => format!("{}", self.time_hidden),
            "ddpm_steps" => format!("{}", self.ddpm_steps),
            "stage0_steps" => format!("{}", self.stage0_steps),
            "stage1_steps" => format!("{}", self.stage1_steps),
            "stage2_steps" => format!("{}", self.stage2_steps),
            "stage3_steps" => format!("{}", self.stage3_steps),
            _ => return None,
        };
        Some(s)
    }

    /// Parses a flat key=value file over the defaults. Blank lines and lines
    /// starting with '#' are skipped.
    pub fn from_str(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::BadValue {
            key: "config".into(),
            value: path.display().to_string(),
            reason: e.to_string(),
        })?;
        RunConfig::from_str(&text)
    }

    /// One line per registry key in registry order; the hash input and a
    /// valid config file.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.get(key).expect("registry key");
            writeln!(out, "{key}={value}").expect("string write");
        }
        out
    }

    /// First 16 hex digits of the canonical form's SHA-256.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut hex = String::with_capacity(16);
        for b in &digest[..8] {
            write!(hex, "{b:02x}").expect("string write");
        }
        hex
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, reason: &str| {
            Err(ConfigError::BadValue { key: key.into(), value, reason: reason.into() })
        };
        if self.pred_len != 1 {
            return bad("pred_len", self.pred_len.to_string(), "the model forecasts exactly one frame");
        }
        if self.input_len < 2 {
            return bad("input_len", self.input_len.to_string(), "history needs at least two frames");
        }
        if self.batch == 0 {
            return bad("batch", self.batch.to_string(), "must be positive");
        }
        if self.frame_size < 2 || self.frame_size % 2 != 0 {
            return bad("frame_size", self.frame_size.to_string(), "must be even and at least 2");
        }
        for (key, v) in [
            ("channels0", self.channels0),
            ("channels1", self.channels1),
            ("d_time", self.d_time),
            ("d_tok", self.d_tok),
            ("d_cond", self.d_cond),
            ("fusion", self.fusion),
            ("time_hidden", self.time_hidden),
        ] {
            if v == 0 {
                return bad(key, v.to_string(), "must be positive");
            }
        }
        if self.heads == 0 || self.channels0 % self.heads != 0 || self.channels1 % self.heads != 0 {
            return bad("heads", self.heads.to_string(), "must divide both channel counts");
        }
        if self.d_time % 2 != 0 {
            return bad("d_time", self.d_time.to_string(), "sinusoidal embedding needs an even width");
        }
        if self.ddpm_steps == 0 {
            return bad("ddpm_steps", self.ddpm_steps.to_string(), "must be positive");
        }
        if !(self.lr > 0.0) || !(self.lr_pretrain > 0.0) {
            return bad("lr", format!("{}", self.lr), "learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{}", self.dropout), "must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", format!("{}", self.weight_decay), "must be non-negative");
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            unet: UNetConfig {
                in_channels: 3,
                channels: [self.channels0, self.channels1],
                d_time: self.d_time,
            },
            d_tok: self.d_tok,
            d_cond: self.d_cond,
            fusion: self.fusion,
            heads: self.heads,
            dropout: self.dropout,
            time_hidden: self.time_hidden,
            history_len: self.input_len,
            frame_hw: (self.frame_size, self.frame_size),
        }
    }

    pub fn stage(&self, stage: u8) -> StageConfig {
        let (steps, lr) = match stage {
            0 => (self.stage0_steps, self.lr_pretrain),
            1 => (self.stage1_steps, self.lr),
            2 => (self.stage2_steps, self.lr),
            _ => (self.stage3_steps, self.lr),
        };
        let mut cfg = StageConfig::new(stage, steps, self.batch, lr);
        cfg.weight_decay = self.weight_decay;
        cfg.ddpm_steps = self.ddpm_steps;
        cfg
    }
}
