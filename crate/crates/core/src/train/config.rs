//! Flat `key=value` training configuration.
//!
//! Keys (defaults in parentheses):
//!
//! | key | meaning |
//! |---|---|
//! | `seed` (1) | initialization, shuffling and dropout seed |
//! | `steps` (5000) | maximum optimizer updates |
//! | `batch_size` (32) | sequences per batch |
//! | `lambda` (0.5) | ASR weight of the multi-task loss |
//! | `label_smoothing` (0.1) | cross-entropy smoothing |
//! | `warmup` (400) | warm-up updates of the learning-rate schedule |
//! | `lr_scale` (1.0) | peak-scale factor of the schedule |
//! | `clip_norm` (0) | gradient-norm clip, 0 disables |
//! | `adapt_ratio` (1) | text-only updates per ST update |
//! | `ckpt_interval` (200) | updates between checkpoints |
//! | `ckpt_keep` (8) | snapshots kept in memory |
//! | `avg_k` (8) | best snapshots averaged at the end |
//! | `patience` (5) | checkpoints without improvement before stopping |
//! | `d_model`, `n_heads`, `ff_dim`, `enc_layers`, `dec_layers`, `dropout`, `max_len` | model shape |
//!
//! Blank lines and lines starting with `#` are ignored; unknown keys are
//! errors.

use std::fmt::Write as _;
use std::str::FromStr;

use super::optim::AdamConfig;
use crate::error::{Error, Result};
use crate::model::TransformerConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub label_smoothing: f64,
    pub warmup: u64,
    pub lr_scale: f64,
    pub clip_norm: f64,
    pub adapt_ratio: usize,
    pub ckpt_interval: usize,
    pub ckpt_keep: usize,
    pub avg_k: usize,
    pub patience: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = TransformerConfig::default();
        TrainConfig {
            seed: 1,
            steps: 5000,
            batch_size: 32,
            lambda: 0.5,
            label_smoothing: 0.1,
            warmup: 400,
            lr_scale: 1.0,
            clip_norm: 0.0,
            adapt_ratio: 1,
            ckpt_interval: 200,
            ckpt_keep: 8,
            avg_k: 8,
            patience: 5,
            d_model: m.d_model,
            n_heads: m.n_heads,
            ff_dim: m.ff_dim,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            dropout: m.dropout,
            max_len: m.max_len,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 20] = [
        "seed",
        "steps",
        "batch_size",
        "lambda",
        "label_smoothing",
        "warmup",
        "lr_scale",
        "clip_norm",
        "adapt_ratio",
        "ckpt_interval",
        "ckpt_keep",
        "avg_k",
        "patience",
        "d_model",
        "n_heads",
        "ff_dim",
        "enc_layers",
        "dec_layers",
        "dropout",
        "max_len",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "label_smoothing" => self.label_smoothing = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "lr_scale" => self.lr_scale = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "adapt_ratio" => self.adapt_ratio = parse(key, v)?,
            "ckpt_interval" => self.ckpt_interval = parse(key, v)?,
            "ckpt_keep" => self.ckpt_keep = parse(key, v)?,
            "avg_k" => self.avg_k = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "ff_dim" => self.ff_dim = parse(key, v)?,
            "enc_layers" => self.enc_layers = parse(key, v)?,
            "dec_layers" => self.dec_layers = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lambda" => self.lambda.to_string(),
            "label_smoothing" => self.label_smoothing.to_string(),
            "warmup" => self.warmup.to_string(),
            "lr_scale" => self.lr_scale.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "adapt_ratio" => self.adapt_ratio.to_string(),
            "ckpt_interval" => self.ckpt_interval.to_string(),
            "ckpt_keep" => self.ckpt_keep.to_string(),
            "avg_k" => self.avg_k.to_string(),
            "patience" => self.patience.to_string(),
            "d_model" => self.d_model.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "ff_dim" => self.ff_dim.to_string(),
            "enc_layers" => self.enc_layers.to_string(),
            "dec_layers" => self.dec_layers.to_string(),
            "dropout" => self.dropout.to_string(),
            "max_len" => self.max_len.to_string(),
            _ => return None,
        })
    }

    /// Every key with its effective value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.warmup == 0 || self.ckpt_interval == 0 {
            return bad("batch_size, warmup and ckpt_interval must be positive");
        }
        if self.ckpt_keep == 0 || self.avg_k == 0 || self.avg_k > self.ckpt_keep {
            return bad("need 1 <= avg_k <= ckpt_keep");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.lr_scale >= 0.0 && self.lr_scale.is_finite()) || !(self.clip_norm >= 0.0) {
            return bad("lr_scale and clip_norm must be nonnegative");
        }
        self.model(1, 1, 1).validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            warmup: self.warmup,
            lr_scale: self.lr_scale,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            ..AdamConfig::default()
        }
    }

    pub fn model(&self, src_vocab: usize, tgt_vocab: usize, feature_dim: usize) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            ff_dim: self.ff_dim,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            src_vocab,
            tgt_vocab,
            feature_dim,
            dropout: self.dropout,
            max_len: self.max_len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_echo() {
        let c = TrainConfig::from_text("# run\nsteps = 10\nlambda=0.25\n\n").unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.lambda, 0.25);
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(matches!(TrainConfig::from_text("stepz=3"), Err(Error::Config(_))));
        assert!(TrainConfig::from_text("steps=x").is_err());
        assert!(TrainConfig::from_text("lambda=2").is_err());
    }
}
