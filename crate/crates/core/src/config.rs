//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Training keys are bare
//! (`batch_size`, `max_lr`, …); model, loss and data keys carry a `model.`,
//! `loss.` or `data.` prefix. Unknown keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_lr: f64,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub seed: Option<u64>,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub data: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_lr: 0.05,
            epochs: 50,
            warmup_fraction: 0.05,
            seed: None,
            grad_clip: None,
            checkpoint_every: 1,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            data: AugmentConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if matches!(value, "none" | "off" | "") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "max_lr" => self.max_lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "seed" => self.seed = parse_optional(key, value)?,
            "grad_clip" => self.grad_clip = parse_optional(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "backbone" | "model.backbone" => self.model.backbone = value.parse()?,
            "model.use_fcb" => self.model.use_fcb = parse_bool(key, value)?,
            "model.use_dcm_u" => self.model.use_dcm_u = parse_bool(key, value)?,
            "model.use_dcm_d" => self.model.use_dcm_d = parse_bool(key, value)?,
            "model.bcd_stages" => self.model.bcd_stages = parse(key, value)?,
            "loss.lambda" => self.loss.lambda = parse(key, value)?,
            "loss.mu" => self.loss.mu = parse(key, value)?,
            "loss.eta3" => self.loss.eta3 = parse(key, value)?,
            "loss.eta4" => self.loss.eta4 = parse(key, value)?,
            "loss.eta5" => self.loss.eta5 = parse(key, value)?,
            "data.flip_prob" => self.data.flip_prob = parse(key, value)?,
            "data.crop_min_scale" => self.data.crop_min_scale = parse(key, value)?,
            "data.train_size" => self.data.train_size = parse(key, value)?,
            "data.scale_set" => {
                self.data.scale_set = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("epochs", self.epochs as f64),
            ("max_lr", self.max_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be non-negative", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        self.model.bcd().validate()?;
        self.loss.validate()?;
        self.data.validate()
    }

    /// Serializes every key; [`TrainConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "max_lr = {}", self.max_lr);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "warmup_fraction = {}", self.warmup_fraction);
        let _ = writeln!(s, "seed = {}", opt(self.seed.map(|v| v.to_string())));
        let _ = writeln!(s, "grad_clip = {}", opt(self.grad_clip.map(|v| v.to_string())));
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s.push_str(&model_text(&self.model));
        let _ = writeln!(s, "loss.lambda = {}", self.loss.lambda);
        let _ = writeln!(s, "loss.mu = {}", self.loss.mu);
        let _ = writeln!(s, "loss.eta3 = {}", self.loss.eta3);
        let _ = writeln!(s, "loss.eta4 = {}", self.loss.eta4);
        let _ = writeln!(s, "loss.eta5 = {}", self.loss.eta5);
        let _ = writeln!(s, "data.flip_prob = {}", self.data.flip_prob);
        let _ = writeln!(s, "data.crop_min_scale = {}", self.data.crop_min_scale);
        let scales: Vec<String> = self.data.scale_set.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "data.scale_set = {}", scales.join(","));
        let _ = writeln!(s, "data.train_size = {}", self.data.train_size);
        s
    }
}

/// The architecture-defining keys of a model configuration.
pub fn model_text(m: &ModelConfig) -> String {
    format!(
        "backbone = {}\nmodel.use_fcb = {}\nmodel.use_dcm_u = {}\nmodel.use_dcm_d = {}\nmodel.bcd_stages = {}\n",
        m.backbone, m.use_fcb, m.use_dcm_u, m.use_dcm_d, m.bcd_stages
    )
}

/// Architecture keys whose values differ between two model configurations.
pub fn model_differences(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    model_text(a)
        .lines()
        .zip(model_text(b).lines())
        .filter(|(x, y)| x != y)
        .map(|(x, y)| format!("{x} vs {}", y.split_once('=').map(|p| p.1.trim()).unwrap_or(y)))
        .collect()
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = TrainConfig::default();
        cfg.seed = Some(7);
        cfg.grad_clip = Some(5.0);
        cfg.model.bcd_stages = 2;
        cfg.data.scale_set = vec![1.0, 0.5];
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parsing_rules() {
        let cfg = TrainConfig::parse("# comment\nepochs = 3  # trailing\n\nmodel.use_fcb = false\nbackbone = toy\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(!cfg.model.use_fcb);
        assert!(matches!(TrainConfig::parse("epochs = 0"), Err(Error::Config(_))));
        let err = TrainConfig::parse("model.use_fbc = true").unwrap_err().to_string();
        assert!(err.contains("unknown configuration key"), "{err}");
        assert!(TrainConfig::parse("epochs 3").is_err());
        assert!(TrainConfig::parse("model.bcd_stages = 4").is_err());
        assert!(TrainConfig::parse("backbone = vgg").is_err());
    }

    #[test]
    fn model_diff_names_keys() {
        let a = ModelConfig::default();
        let b = ModelConfig { bcd_stages: 2, ..a.clone() };
        assert_eq!(model_differences(&a, &b), vec!["model.bcd_stages = 3 vs 2".to_string()]);
    }
}
