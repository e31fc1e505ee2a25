//! Flat `key = value` settings shared by every subcommand.
//!
//! Precedence: command-line values, then the config file, then defaults.

use std::collections::BTreeMap;
use std::path::Path;

use persona_mtl::decoding::{Axis, DecodeConfig, GridSpec, RerankWeights};
use persona_mtl::training::{TrainConfig, Variant};

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub beam: usize,
    pub max_len: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub grid: GridSpec,
    pub sd_mult: f64,
    /// Reject malformed corpus lines instead of skipping them.
    pub strict: bool,
    /// Fraction of the general conversations held out for pre-training and
    /// reverse-model selection.
    pub holdout: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let decode = DecodeConfig::default();
        Settings {
            train: TrainConfig::default(),
            beam: decode.beam,
            max_len: decode.max_len,
            lambda: 0.0,
            gamma: 0.0,
            grid: GridSpec::default(),
            sd_mult: 2.0,
            strict: false,
            holdout: 0.1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.trim().parse().map_err(|_| CliError::Usage(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("bad value {value:?} for {key} (expected true or false)"))),
    }
}

impl Settings {
    pub const KEYS: &'static [&'static str] = &[
        "ae_batches_per_iter",
        "batch_size",
        "beam",
        "beta1",
        "beta2",
        "clip_norm",
        "conv_batches_per_iter",
        "epsilon",
        "eval_interval",
        "gamma",
        "gamma_max",
        "gamma_min",
        "gamma_step",
        "hidden",
        "holdout",
        "init_range",
        "lambda",
        "lambda_max",
        "lambda_min",
        "lambda_step",
        "layers",
        "learning_rate",
        "max_epochs",
        "max_len",
        "patience",
        "pretrain",
        "refinements",
        "sd_mult",
        "seed",
        "strict",
        "variant",
        "vocab_cap",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let t = &mut self.train;
        match key {
            "ae_batches_per_iter" => t.ae_batches_per_iter = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "beam" => self.beam = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "conv_batches_per_iter" => t.conv_batches_per_iter = parse(key, value)?,
            "epsilon" => t.epsilon = parse(key, value)?,
            "eval_interval" => t.eval_interval = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "gamma_max" => self.grid.gamma.max = parse(key, value)?,
            "gamma_min" => self.grid.gamma.min = parse(key, value)?,
            "gamma_step" => self.grid.gamma.step = parse(key, value)?,
            "hidden" => t.hidden = parse(key, value)?,
            "holdout" => self.holdout = parse(key, value)?,
            "init_range" => t.init_range = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "lambda_max" => self.grid.lambda.max = parse(key, value)?,
            "lambda_min" => self.grid.lambda.min = parse(key, value)?,
            "lambda_step" => self.grid.lambda.step = parse(key, value)?,
            "layers" => t.layers = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "pretrain" => t.pretrain = parse_bool(key, value)?,
            "refinements" => self.grid.refinements = parse(key, value)?,
            "sd_mult" => self.sd_mult = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "strict" => self.strict = parse_bool(key, value)?,
            "variant" => t.variant = value.trim().parse::<Variant>().map_err(CliError::Usage)?,
            "vocab_cap" => t.vocab_cap = parse(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Every setting as text, keyed by name.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let variant = match t.variant {
            Variant::MtaskS => "mtask-s",
            Variant::MtaskM => "mtask-m",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("ae_batches_per_iter", t.ae_batches_per_iter.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("beam", self.beam.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("conv_batches_per_iter", t.conv_batches_per_iter.to_string()),
            ("epsilon", t.epsilon.to_string()),
            ("eval_interval", t.eval_interval.to_string()),
            ("gamma", self.gamma.to_string()),
            ("gamma_max", self.grid.gamma.max.to_string()),
            ("gamma_min", self.grid.gamma.min.to_string()),
            ("gamma_step", self.grid.gamma.step.to_string()),
            ("hidden", t.hidden.to_string()),
            ("holdout", self.holdout.to_string()),
            ("init_range", t.init_range.to_string()),
            ("lambda", self.lambda.to_string()),
            ("lambda_max", self.grid.lambda.max.to_string()),
            ("lambda_min", self.grid.lambda.min.to_string()),
            ("lambda_step", self.grid.lambda.step.to_string()),
            ("layers", t.layers.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("max_len", self.max_len.to_string()),
            ("patience", t.patience.to_string()),
            ("pretrain", t.pretrain.to_string()),
            ("refinements", self.grid.refinements.to_string()),
            ("sd_mult", self.sd_mult.to_string()),
            ("seed", t.seed.to_string()),
            ("strict", self.strict.to_string()),
            ("variant", variant.to_string()),
            ("vocab_cap", t.vocab_cap.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `key=value` command-line overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| CliError::Usage(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn decode_config(&self, speaker: Option<usize>) -> DecodeConfig {
        DecodeConfig { beam: self.beam, max_len: self.max_len, speaker, ..DecodeConfig::default() }
    }

    pub fn weights(&self) -> RerankWeights {
        RerankWeights::new(self.lambda, self.gamma)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(CliError::Usage("holdout must lie strictly between 0 and 1".into()));
        }
        if self.beam == 0 || self.max_len == 0 {
            return Err(CliError::Usage("beam and max_len must be >= 1".into()));
        }
        for axis in [self.grid.lambda, self.grid.gamma] {
            Axis::points(&axis).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_roundtrips() {
        let s = Settings::default();
        let map = s.to_map();
        assert_eq!(map.keys().map(String::as_str).collect::<Vec<_>>(), Settings::KEYS);
        let mut back = Settings { beam: 99, ..Settings::default() };
        for (k, v) in &map {
            back.set(k, v).unwrap();
        }
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let mut s = Settings::default();
        assert!(matches!(s.set("hiddn", "3"), Err(CliError::Usage(_))));
        assert!(matches!(s.set("hidden", "x"), Err(CliError::Usage(_))));
        assert!(matches!(s.set("pretrain", "maybe"), Err(CliError::Usage(_))));
        assert!(matches!(s.apply_text("hidden 3", "f"), Err(CliError::Usage(_))));
    }

    #[test]
    fn file_then_cli_precedence() {
        let mut s = Settings::default();
        s.apply_text("# comment\nhidden = 32\nbeam = 4 # trailing\n\n", "f").unwrap();
        s.apply_overrides(&["hidden=16".into()]).unwrap();
        assert_eq!((s.train.hidden, s.beam), (16, 4));
        assert_eq!(s.max_len, Settings::default().max_len);
    }
}
