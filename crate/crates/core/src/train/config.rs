use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{AdamConfig, EmbeddingLayer};
use crate::objectives::Hyperparams;

/// Learning rate commonly used when fine-tuning large pretrained encoders.
pub const REFERENCE_LR: f64 = 2e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hp: Hyperparams,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Text batches per multimodal batch; `None` derives it from corpus sizes.
    pub ratio_a: Option<usize>,
    pub hidden: usize,
    pub text_dim: usize,
    pub dropout: f64,
    pub eval_layer: EmbeddingLayer,
    /// Redraw mismatched pairs at every epoch instead of once per run.
    pub reshuffle_per_epoch: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hp: Hyperparams::default(),
            lr: 1e-3,
            steps: 2000,
            batch_size: 128,
            eval_every: 125,
            seed: 42,
            ratio_a: None,
            hidden: 768,
            text_dim: 768,
            dropout: 0.1,
            eval_layer: EmbeddingLayer::Encoder,
            reshuffle_per_epoch: false,
            adam: AdamConfig::default(),
        }
    }
}

pub(crate) const TRAIN_KEYS: [&str; 20] = [
    "tau",
    "tau_dist",
    "lambda",
    "mu",
    "margin",
    "reduction",
    "lr",
    "steps",
    "batch_size",
    "eval_every",
    "seed",
    "ratio_a",
    "hidden",
    "text_dim",
    "dropout",
    "eval_layer",
    "reshuffle_per_epoch",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::param("lr", format!("must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::param("batch_size", "must be at least 2"));
        }
        if self.eval_every == 0 {
            return Err(Error::param("eval_every", "must be positive"));
        }
        if self.ratio_a == Some(0) {
            return Err(Error::param("ratio_a", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param("dropout", "must lie in [0, 1)"));
        }
        if self.hidden == 0 || self.text_dim == 0 {
            return Err(Error::param("hidden/text_dim", "must be positive"));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "tau" => self.hp.tau.to_string(),
            "tau_dist" => self.hp.tau_dist.to_string(),
            "lambda" => self.hp.lambda_w.to_string(),
            "mu" => self.hp.mu_w.to_string(),
            "margin" => self.hp.margin_m.to_string(),
            "reduction" => self.hp.reduction.to_string(),
            "lr" => self.lr.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "seed" => self.seed.to_string(),
            "ratio_a" => self.ratio_a.map_or_else(|| "auto".into(), |a| a.to_string()),
            "hidden" => self.hidden.to_string(),
            "text_dim" => self.text_dim.to_string(),
            "dropout" => self.dropout.to_string(),
            "eval_layer" => self.eval_layer.to_string(),
            "reshuffle_per_epoch" => self.reshuffle_per_epoch.to_string(),
            "adam_beta1" => self.adam.beta1.to_string(),
            "adam_beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            _ => return None,
        })
    }

    /// Sets one key. Returns `Ok(false)` when the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "tau" => self.hp.tau = parse(key, value)?,
            "tau_dist" => self.hp.tau_dist = parse(key, value)?,
            "lambda" => self.hp.lambda_w = parse(key, value)?,
            "mu" => self.hp.mu_w = parse(key, value)?,
            "margin" => self.hp.margin_m = parse(key, value)?,
            "reduction" => self.hp.reduction = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "ratio_a" => {
                self.ratio_a = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "hidden" => self.hidden = parse(key, value)?,
            "text_dim" => self.text_dim = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "eval_layer" => self.eval_layer = parse(key, value)?,
            "reshuffle_per_epoch" => self.reshuffle_per_epoch = parse(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every key as `key = value`, one per line, in a fixed order.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        for key in TRAIN_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_exact() {
        let mut cfg = TrainConfig {
            lr: 0.1 + 0.2,
            ratio_a: Some(3),
            eval_layer: EmbeddingLayer::SharedHead,
            ..Default::default()
        };
        cfg.hp.tau = 1.0 / 3.0;
        let mut back = TrainConfig::default();
        for line in cfg.to_config_text().lines() {
            let (k, v) = line.split_once(" = ").unwrap();
            assert!(back.set(k, v).unwrap());
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_values_and_unknown_keys() {
        let mut cfg = TrainConfig::default();
        assert!(!cfg.set("nope", "1").unwrap());
        assert!(cfg.set("steps", "-1").is_err());
        assert!(cfg.set("eval_layer", "pooler").is_err());
        cfg.eval_every = 0;
        assert!(cfg.validate().is_err());
    }
}
