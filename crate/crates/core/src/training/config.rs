//! Flat TOML training configuration with `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::DiscConfig;
use crate::error::{Error, IoContext, Result};
use crate::model::ModelConfig;
use crate::perceptual::PerceptualKind;
use crate::text::TextBackendKind;

pub const K_MSE: f64 = 1.0;
pub const K_PERCEPTUAL: f64 = 0.075 / 32.0;
pub const BETA: f64 = 0.15;
/// Supported operating points in bits per pixel.
pub const TARGET_BPPS: [f64; 3] = [0.15, 0.30, 0.45];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoGText,
    NoDText,
    NoText,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoGText, Variant::NoDText, Variant::NoText];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGText => "no_g_text",
            Variant::NoDText => "no_d_text",
            Variant::NoText => "no_text",
        }
    }

    pub fn generator_uses_text(self) -> bool {
        matches!(self, Variant::Full | Variant::NoDText)
    }

    pub fn discriminator_uses_text(self) -> bool {
        matches!(self, Variant::Full | Variant::NoGText)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Dataset manifest (line-delimited records).
    pub manifest: Option<PathBuf>,
    pub stage: u8,
    /// Stage-1 checkpoint a stage-2 run starts from.
    pub init_checkpoint: Option<PathBuf>,
    pub target_bpp: f64,
    /// Rate weight while the batch rate is at or below target.
    pub lambda_low: f64,
    /// Rate weight while the batch rate is above target.
    pub lambda_high: f64,
    pub beta: f64,
    pub k_mse: f64,
    pub k_perceptual: f64,
    pub batch_size_stage1: usize,
    pub batch_size_stage2: usize,
    pub epochs: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub variant: Variant,
    pub seed: u64,
    pub deterministic: bool,
    pub text_backend: TextBackendKind,
    pub text_seed: u64,
    pub text_weights: Option<PathBuf>,
    pub perceptual: PerceptualKind,
    pub perceptual_weights: Option<PathBuf>,
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub disc: DiscConfig,
}

/// Rate-weight pair for an operating point.
///
/// A narrow low/high gap matters: with a weak lambda_low the rate settles
/// just under the target and per-batch switching makes the loss jumpy.
pub fn default_lambdas(target_bpp: f64) -> (f64, f64) {
    let high = 0.6 * (0.3 / target_bpp.max(0.05)).powf(1.5);
    (high / 4.0, high)
}

impl Default for TrainConfig {
    fn default() -> Self {
        let (lambda_low, lambda_high) = default_lambdas(0.30);
        Self {
            manifest: None,
            stage: 1,
            init_checkpoint: None,
            target_bpp: 0.30,
            lambda_low,
            lambda_high,
            beta: BETA,
            k_mse: K_MSE,
            k_perceptual: K_PERCEPTUAL,
            batch_size_stage1: 8,
            batch_size_stage2: 16,
            epochs: 5,
            lr: 1e-4,
            disc_lr: 1e-4,
            variant: Variant::Full,
            seed: 0,
            deterministic: true,
            text_backend: TextBackendKind::DeterministicStub,
            text_seed: 0,
            text_weights: None,
            perceptual: PerceptualKind::MsSsim,
            perceptual_weights: None,
            model: ModelConfig::default(),
            disc: DiscConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl TrainConfig {
    fn known_keys() -> toml::Table {
        toml::Table::try_from(TrainConfig::default()).expect("default config serializes")
    }

    /// Defaults, then the file (if any), then `key=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let known = Self::known_keys();
        const OPTIONAL: [&str; 5] = ["manifest", "init_checkpoint", "text_weights", "perceptual_weights", "lambda"];
        let unknown: Vec<&String> = table
            .keys()
            .filter(|k| !known.contains_key(*k) && !OPTIONAL.contains(&k.as_str()))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {unknown:?}")));
        }
        let explicit_lambdas = table.contains_key("lambda_low") || table.contains_key("lambda_high");
        let mut cfg: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if !explicit_lambdas {
            (cfg.lambda_low, cfg.lambda_high) = default_lambdas(cfg.target_bpp);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every violated constraint, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(1..=2).contains(&self.stage) {
            errs.push(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if !(self.lambda_low < self.lambda_high) || self.lambda_low < 0.0 {
            errs.push("need 0 <= lambda_low < lambda_high".to_string());
        }
        if self.k_mse < 0.0 || self.k_perceptual < 0.0 {
            errs.push("k_mse and k_perceptual must be non-negative".to_string());
        }
        if self.batch_size_stage1 == 0 || self.batch_size_stage2 == 0 {
            errs.push("batch sizes must be positive".to_string());
        }
        if !(self.lr > 0.0 && self.disc_lr > 0.0) {
            errs.push("learning rates must be positive".to_string());
        }
        if !(self.target_bpp > 0.0) {
            errs.push("target_bpp must be positive".to_string());
        }
        if self.model.res_blocks == 0 {
            errs.push("res_blocks must be at least 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn batch_size(&self) -> usize {
        if self.stage == 1 {
            self.batch_size_stage1
        } else {
            self.batch_size_stage2
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short stable digest of the effective configuration.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}
