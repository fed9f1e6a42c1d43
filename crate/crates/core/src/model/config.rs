use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BENCHMARK_HORIZONS: [usize; 4] = [96, 192, 336, 720];

/// How exogenous tokens meet the endogenous patch tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bridging {
    /// Exogenous tokens are appended to the patch sequence; no global token.
    Concat,
    /// A global token cross-attends to the exogenous tokens.
    Cross,
}

impl fmt::Display for Bridging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bridging::Concat => "concat",
            Bridging::Cross => "cross",
        })
    }
}

impl FromStr for Bridging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "concat" => Ok(Bridging::Concat),
            "cross" => Ok(Bridging::Cross),
            other => Err(Error::Config(format!("unknown bridging mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub lookback: usize,
    pub exo_lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub bridging: Bridging,
    pub tws_enabled: bool,
    pub threshold: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Optional cap on the total number of optimiser steps.
    pub max_steps: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            exo_lookback: 96,
            horizon: 96,
            patch_len: 16,
            d_model: 128,
            heads: 8,
            blocks: 2,
            dropout: 0.1,
            bridging: Bridging::Cross,
            tws_enabled: true,
            threshold: 0.90,
            seed: 2024,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 10,
            patience: 3,
            max_steps: None,
        }
    }
}

const KEYS: [&str; 17] = [
    "lookback",
    "exo_lookback",
    "horizon",
    "patch_len",
    "d_model",
    "heads",
    "blocks",
    "dropout",
    "bridging",
    "tws_enabled",
    "threshold",
    "seed",
    "learning_rate",
    "batch_size",
    "epochs",
    "patience",
    "max_steps",
];

impl RunConfig {
    pub fn num_patches(&self) -> usize {
        self.lookback / self.patch_len
    }

    pub fn ff_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Tokens flattened into the prediction head.
    pub fn head_tokens(&self) -> usize {
        match self.bridging {
            Bridging::Cross => self.num_patches() + 1,
            Bridging::Concat => self.num_patches(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let positive = [
            ("lookback", self.lookback),
            ("exo_lookback", self.exo_lookback),
            ("horizon", self.horizon),
            ("patch_len", self.patch_len),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("patience", self.patience),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if !self.lookback.is_multiple_of(self.patch_len) {
            return fail(format!(
                "lookback {} is not divisible by patch length {}",
                self.lookback, self.patch_len
            ));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if self.exo_lookback > self.lookback {
            return fail("exo_lookback may not exceed lookback".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return fail(format!("threshold {} outside (0, 1]", self.threshold));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.max_steps == Some(0) {
            return fail("max_steps must be positive when set".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: String| Error::Config(format!("{key} = {value:?}: {e}"));
        fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.trim().parse::<T>().map_err(|e| e.to_string())
        }
        match key.trim() {
            "lookback" => self.lookback = parse(value).map_err(bad)?,
            "exo_lookback" => self.exo_lookback = parse(value).map_err(bad)?,
            "horizon" => self.horizon = parse(value).map_err(bad)?,
            "patch_len" => self.patch_len = parse(value).map_err(bad)?,
            "d_model" => self.d_model = parse(value).map_err(bad)?,
            "heads" => self.heads = parse(value).map_err(bad)?,
            "blocks" => self.blocks = parse(value).map_err(bad)?,
            "dropout" => self.dropout = parse(value).map_err(bad)?,
            "bridging" => self.bridging = value.parse()?,
            "tws_enabled" => {
                self.tws_enabled = match value.trim() {
                    "true" | "on" | "1" => true,
                    "false" | "off" | "0" => false,
                    other => return Err(bad(format!("not a boolean: {other}"))),
                }
            }
            "threshold" => self.threshold = parse(value).map_err(bad)?,
            "seed" => self.seed = parse(value).map_err(bad)?,
            "learning_rate" => self.learning_rate = parse(value).map_err(bad)?,
            "batch_size" => self.batch_size = parse(value).map_err(bad)?,
            "epochs" => self.epochs = parse(value).map_err(bad)?,
            "patience" => self.patience = parse(value).map_err(bad)?,
            "max_steps" => {
                self.max_steps = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse(v).map_err(bad)?),
                }
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_text(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn to_kv_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k)))
            .collect()
    }

    fn get(&self, key: &str) -> String {
        match key {
            "lookback" => self.lookback.to_string(),
            "exo_lookback" => self.exo_lookback.to_string(),
            "horizon" => self.horizon.to_string(),
            "patch_len" => self.patch_len.to_string(),
            "d_model" => self.d_model.to_string(),
            "heads" => self.heads.to_string(),
            "blocks" => self.blocks.to_string(),
            "dropout" => format!("{:?}", self.dropout),
            "bridging" => self.bridging.to_string(),
            "tws_enabled" => self.tws_enabled.to_string(),
            "threshold" => format!("{:?}", self.threshold),
            "seed" => self.seed.to_string(),
            "learning_rate" => format!("{:?}", self.learning_rate),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "patience" => self.patience.to_string(),
            "max_steps" => self.max_steps.map_or("none".into(), |s| s.to_string()),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Names of the fields whose values differ between two configs.
    pub fn diff(&self, other: &Self) -> Vec<&'static str> {
        KEYS.iter()
            .copied()
            .filter(|k| self.get(k) != other.get(k))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_patches(), 6);
        assert_eq!(cfg.head_tokens(), 7);
    }

    #[test]
    fn indivisible_lookback_is_a_config_error() {
        let cfg = RunConfig {
            lookback: 100,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = RunConfig {
            heads: 3,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_text_round_trip_and_diff() {
        let mut cfg = RunConfig::default();
        cfg.set("bridging", "concat").unwrap();
        cfg.set("tws_enabled", "off").unwrap();
        cfg.set("max_steps", "200").unwrap();
        let back = RunConfig::from_kv_text(&cfg.to_kv_text()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(
            RunConfig::default().diff(&cfg),
            vec!["bridging", "tws_enabled", "max_steps"]
        );
        assert!(RunConfig::from_kv_text("nope=1").is_err());
        assert!(RunConfig::from_kv_text("d_model 3").is_err());
        let c = RunConfig::from_kv_text("# comment\nd_model = 64 # inline\n").unwrap();
        assert_eq!(c.d_model, 64);
    }
}
