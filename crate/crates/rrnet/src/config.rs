//! Flat `key=value` run configuration: network keys plus training keys.

use std::fmt::Write as _;

use rrnet_core::train::TrainConfig;
use rrnet_core::NetworkConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("{key}: bad value `{value}`")]
    BadValue { key: String, value: String },
    #[error(transparent)]
    Network(#[from] rrnet_core::Error),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
    })
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (key, value) = (key.trim(), value.trim());
        let t = &mut self.train;
        match key {
            "iterations" => t.iterations = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_initial" => t.lr_initial = parse(key, value)?,
            "lr_final" => t.lr_final = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "log_every" => t.log_every = parse(key, value)?,
            "augment" => t.augment = parse(key, value)?,
            "adam_beta1" => t.adam.beta1 = parse(key, value)?,
            "adam_beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            _ => {
                if !self.network.set(key, value)? {
                    return Err(ConfigError::UnknownKey(key.into()));
                }
            }
        }
        Ok(())
    }

    /// Apply every `key=value` line of `text`; blank lines and `#` comments
    /// are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.into(),
                });
            };
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut out = self.network.to_kv();
        for (k, v) in [
            ("iterations", t.iterations.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr_initial", t.lr_initial.to_string()),
            ("lr_final", t.lr_final.to_string()),
            ("seed", t.seed.to_string()),
            ("log_every", t.log_every.to_string()),
            ("augment", t.augment.to_string()),
            ("adam_beta1", t.adam.beta1.to_string()),
            ("adam_beta2", t.adam.beta2.to_string()),
            ("adam_eps", t.adam.eps.to_string()),
        ] {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
