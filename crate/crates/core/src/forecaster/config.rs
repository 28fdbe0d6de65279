use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::rhl::DEFAULT_ALPHA;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaMode {
    Fixed,
    Learnable,
}

/// Training hyperparameters. The flat `key=value` config file uses exactly
/// these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Model dimension.
    pub dim: usize,
    /// Weight of the history score in the total score (initial value when learnable).
    pub gamma: f64,
    pub gamma_mode: GammaMode,
    /// Weight of the history-score binary cross-entropy.
    pub eta: f64,
    /// Weight of the learned correction in the history prediction.
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Maximum number of queries per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Number of snapshots the entity representations evolve over.
    pub window: usize,
    pub max_history_len: usize,
    /// Negatives per query; 0 scores every entity.
    pub negatives: usize,
    pub no_rhl: bool,
    pub random_frozen_rel_emb: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            gamma: 1.0,
            gamma_mode: GammaMode::Fixed,
            eta: 1.0,
            alpha: DEFAULT_ALPHA,
            learning_rate: 1e-2,
            epochs: 10,
            batch_size: 512,
            seed: 0,
            window: 3,
            max_history_len: 8,
            negatives: 0,
            no_rhl: false,
            random_frozen_rel_emb: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.dim == 0 || self.batch_size == 0 || self.max_history_len == 0 {
            return bad("dim, batch_size and max_history_len must be positive");
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("eta must be finite and non-negative");
        }
        if !self.gamma.is_finite() || !self.alpha.is_finite() {
            return bad("gamma and alpha must be finite");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    /// The weights actually used: disabling the history learner zeroes both.
    pub fn effective_gamma_eta(&self) -> (f64, f64) {
        if self.no_rhl {
            (0.0, 0.0)
        } else {
            (self.gamma, self.eta)
        }
    }

    /// Parses `key=value` lines; `#` starts a comment. Keys not named here are
    /// rejected; omitted keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = Map::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected key=value".into(),
            })?;
            let v = v.trim();
            let value = serde_json::from_str::<Value>(v)
                .ok()
                .filter(|x| !x.is_string())
                .unwrap_or_else(|| Value::String(v.to_owned()));
            map.insert(k.trim().to_owned(), value);
        }
        let cfg: Self =
            serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        if let Ok(Value::Object(map)) = serde_json::to_value(self) {
            for (k, v) in map {
                let v = match v {
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                writeln!(out, "{k}={v}").expect("write to string");
            }
        }
        out
    }
}
