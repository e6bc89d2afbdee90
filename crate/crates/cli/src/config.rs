//! Flat TOML run configuration with `key=value` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pst_core::losses::LossConfig;
use pst_core::model::ModelConfig;
use pst_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // model
    pub dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub rho_text: f64,
    pub rho_motion: f64,
    pub n_p: usize,
    pub stride: usize,
    pub max_text_len: usize,
    pub max_windows: usize,
    pub sti_channels: usize,
    pub sti_heads: usize,
    pub knn_k: Option<usize>,
    // loss
    pub temperature: f64,
    pub lambda_s: f64,
    pub lambda_d: f64,
    // training
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_model: f64,
    pub lr_sti_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mc_permutations: usize,
    pub mc_pair_subsample: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let l = LossConfig::default();
        let t = TrainConfig::default();
        Self {
            dim: m.dim,
            heads: m.heads,
            encoder_depth: m.encoder_depth,
            rho_text: m.rho_text,
            rho_motion: m.rho_motion,
            n_p: m.n_p,
            stride: m.stride,
            max_text_len: m.max_text_len,
            max_windows: m.max_windows,
            sti_channels: m.sti_channels,
            sti_heads: m.sti_heads,
            knn_k: m.knn_k,
            temperature: l.temperature,
            lambda_s: l.lambda_s,
            lambda_d: l.lambda_d,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr_model: t.lr_model,
            lr_sti_head: t.lr_sti_head,
            beta1: t.beta1,
            beta2: t.beta2,
            mc_permutations: t.mc_permutations,
            mc_pair_subsample: t.mc_pair_subsample,
            seed: t.seed,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides`, and falls back to `env_seed`
    /// when neither sets `seed`.
    pub fn resolve(
        path: Option<&Path>,
        overrides: &[String],
        env_seed: Option<u64>,
    ) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for kv in overrides {
            let Some((key, raw)) = kv.split_once('=') else {
                bail!("override {kv:?} is not key=value");
            };
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.trim().to_string(), value);
        }
        if !table.contains_key("seed") {
            if let Some(s) = env_seed {
                table.insert("seed".into(), toml::Value::Integer(s as i64));
            }
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        cfg.model().validate_shape()?;
        cfg.loss().validate()?;
        cfg.train().validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            encoder_depth: self.encoder_depth,
            rho_text: self.rho_text,
            rho_motion: self.rho_motion,
            n_p: self.n_p,
            stride: self.stride,
            max_text_len: self.max_text_len,
            max_windows: self.max_windows,
            sti_channels: self.sti_channels,
            sti_heads: self.sti_heads,
            knn_k: self.knn_k,
            ..ModelConfig::default()
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            lambda_s: self.lambda_s,
            lambda_d: self.lambda_d,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_model: self.lr_model,
            lr_sti_head: self.lr_sti_head,
            beta1: self.beta1,
            beta2: self.beta2,
            mc_permutations: self.mc_permutations,
            mc_pair_subsample: self.mc_pair_subsample,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

trait ValidateShape {
    fn validate_shape(&self) -> pst_core::Result<()>;
}

impl ValidateShape for ModelConfig {
    /// Everything except the vocabulary, which comes from the data.
    fn validate_shape(&self) -> pst_core::Result<()> {
        ModelConfig {
            vocabulary: vec![String::new()],
            ..self.clone()
        }
        .validate()
    }
}
