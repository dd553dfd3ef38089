//! Plain-text `key = value` files.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("{key}: cannot parse {value:?}: {detail}")]
    Value {
        key: String,
        value: String,
        detail: String,
    },
    #[error("{key}: {detail}")]
    Invalid { key: String, detail: String },
    #[error("missing required key {0:?}")]
    Missing(String),
}

/// Parsed key/value pairs. Keys are consumed as they are read so leftovers
/// can be reported as unknown.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    /// `#` starts a comment; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: n + 1,
                    text: raw.to_string(),
                });
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: n + 1, key });
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Parses and removes `key`, leaving `slot` untouched when absent.
    pub fn take<T>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        if let Some(value) = self.entries.remove(key) {
            *slot = value.parse().map_err(|e: T::Err| ConfigError::Value {
                key: key.to_string(),
                value: value.clone(),
                detail: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Errors on the first key nobody consumed.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_keys().next() {
            Some(k) => Err(ConfigError::UnknownKey(k)),
            None => Ok(()),
        }
    }
}

/// Accumulates `key = value` lines in insertion order.
#[derive(Debug, Default)]
pub struct Writer(String);

impl Writer {
    pub fn put(&mut self, key: &str, value: impl fmt::Display) -> &mut Self {
        self.0.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn finish(self) -> String {
        self.0
    }
}

/// Everything a run needs: model shape, training settings, corpus path.
/// `train.seed` also seeds parameter initialization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: Option<String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with(text, &[])
    }

    /// Parses `text`, then applies `overrides` on top, then validates.
    pub fn parse_with(text: &str, overrides: &[(&str, String)]) -> Result<Self, ConfigError> {
        let mut kv = KeyValues::parse(text)?;
        for (k, v) in overrides {
            kv.set(k, v);
        }
        let mut c = Self::default();
        let e = &mut c.model.encoder;
        kv.take("encoder.stem_channels", &mut e.stem_channels)?;
        kv.take("encoder.growth_rate", &mut e.growth_rate)?;
        if let Some(layers) = kv.take_str("encoder.layers_per_block") {
            let parsed: Vec<usize> = layers
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|err: std::num::ParseIntError| ConfigError::Value {
                    key: "encoder.layers_per_block".into(),
                    value: layers.clone(),
                    detail: err.to_string(),
                })?;
            e.layers_per_block = parsed.try_into().map_err(|_| ConfigError::Value {
                key: "encoder.layers_per_block".into(),
                value: layers.clone(),
                detail: "expected three counts".into(),
            })?;
        }
        kv.take("encoder.reduced_channels", &mut e.reduced_channels)?;
        let d = &mut c.model.decoder;
        kv.take("decoder.hidden_dim", &mut d.hidden_dim)?;
        kv.take("decoder.embed_dim", &mut d.embed_dim)?;
        kv.take("decoder.attn_dim", &mut d.attn_dim)?;
        kv.take("decoder.coverage_channels", &mut d.coverage_channels)?;
        kv.take("decoder.coverage_kernel", &mut d.coverage_kernel)?;
        kv.take("decoder.max_decode_len", &mut d.max_decode_len)?;
        kv.take("decoder.share_attention", &mut d.share_attention)?;
        let t = &mut c.train;
        kv.take("train.learning_rate", &mut t.learning_rate)?;
        kv.take("train.teacher_forcing_rate", &mut t.teacher_forcing_rate)?;
        kv.take("train.epochs", &mut t.epochs)?;
        kv.take("train.max_steps", &mut t.max_steps)?;
        kv.take("train.seed", &mut t.seed)?;
        kv.take("train.coverage", &mut t.coverage_enabled)?;
        kv.take("train.checkpoint_interval", &mut t.checkpoint_interval)?;
        kv.take("train.clip_norm", &mut t.clip_norm)?;
        kv.take("train.holdout_fraction", &mut t.holdout_fraction)?;
        c.corpus = kv.take_str("paths.corpus");
        kv.finish()?;
        c.model.decoder.coverage = c.train.coverage_enabled;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, e: String| ConfigError::Invalid {
            key: key.into(),
            detail: e,
        };
        self.model.encoder.validate().map_err(|e| invalid("encoder", e.to_string()))?;
        self.model.decoder.validate().map_err(|e| invalid("decoder", e.to_string()))?;
        self.train.validate().map_err(|e| invalid("train", e.to_string()))?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (e, d, t): (&EncoderConfig, &DecoderConfig, &TrainConfig) =
            (&self.model.encoder, &self.model.decoder, &self.train);
        let l = e.layers_per_block;
        let mut w = Writer::default();
        w.put("encoder.stem_channels", e.stem_channels)
            .put("encoder.growth_rate", e.growth_rate)
            .put("encoder.layers_per_block", format!("{} {} {}", l[0], l[1], l[2]))
            .put("encoder.reduced_channels", e.reduced_channels)
            .put("decoder.hidden_dim", d.hidden_dim)
            .put("decoder.embed_dim", d.embed_dim)
            .put("decoder.attn_dim", d.attn_dim)
            .put("decoder.coverage_channels", d.coverage_channels)
            .put("decoder.coverage_kernel", d.coverage_kernel)
            .put("decoder.max_decode_len", d.max_decode_len)
            .put("decoder.share_attention", d.share_attention)
            .put("train.learning_rate", format!("{:?}", t.learning_rate))
            .put("train.teacher_forcing_rate", format!("{:?}", t.teacher_forcing_rate))
            .put("train.epochs", t.epochs)
            .put("train.max_steps", t.max_steps)
            .put("train.seed", t.seed)
            .put("train.coverage", t.coverage_enabled)
            .put("train.checkpoint_interval", t.checkpoint_interval)
            .put("train.clip_norm", format!("{:?}", t.clip_norm))
            .put("train.holdout_fraction", format!("{:?}", t.holdout_fraction));
        if let Some(c) = &self.corpus {
            w.put("paths.corpus", c);
        }
        w.finish()
    }
}
