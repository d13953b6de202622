//! Training configuration, read from JSON. Every field is optional and
//! falls back to the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::regression::LossKind;
use crate::tokenizer::ClipSampling;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub lr0: f64,
    pub momentum: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub mode: Mode,
    pub loss: LossKind,
    /// Frame selection at inference.
    pub sampling: ClipSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr0: 0.005,
            momentum: 0.9,
            decay_every: 10,
            decay_factor: 0.1,
            epochs: 30,
            batch: 8,
            seed: 0,
            mode: Mode::Video,
            loss: LossKind::Vr,
            sampling: ClipSampling::Uniform,
        }
    }
}

impl TrainConfig {
    /// Parses a JSON object, rejecting keys that name no field.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let known = serde_json::to_value(Self::default()).expect("config serializes");
        if let (Some(obj), Some(known)) = (value.as_object(), known.as_object()) {
            let unknown: Vec<&String> = obj.keys().filter(|k| !known.contains_key(*k)).collect();
            if !unknown.is_empty() {
                return Err(Error::Config(format!("unknown config keys {unknown:?}")));
            }
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let rates = [
            ("lr0", self.lr0),
            ("decay_factor", self.decay_factor),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.decay_every == 0 || self.batch == 0 {
            return Err(Error::Config("decay_every and batch must be at least 1".into()));
        }
        Ok(())
    }

    /// `lr0 · decay_factor^⌊epoch / decay_every⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self)
    }
}

pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.decay_every) as i32;
    cfg.lr0 * cfg.decay_factor.powi(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 0.005);
        assert!((lr_schedule(10, &c) - 0.0005).abs() < 1e-18);
        assert!((lr_schedule(25, &c) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(9, &c), 0.005);
    }

    #[test]
    fn json_is_flat_and_checked() {
        let c = TrainConfig::from_json(r#"{"n_frames": 8, "dim": 96, "heads": 4, "crop": 64, "loss": "l2"}"#).unwrap();
        assert_eq!(c.model.n_frames, 8);
        assert_eq!(c.model.width(), 96);
        assert_eq!(c.loss, LossKind::L2);
        assert_eq!(c.lr0, 0.005);
        assert!(TrainConfig::from_json(r#"{"n_frame": 8}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"heads": 7}"#).is_err());
        let back = TrainConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
