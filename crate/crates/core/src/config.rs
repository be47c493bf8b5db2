//! Model and training hyperparameters.
//!
//! The text form is a flat `key = value` file. A `profile = full|toy|tiny` line
//! supplies defaults for keys the file leaves out; without one, every
//! hyperparameter key must be present.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::data("precision", format!("expected f32 or f64, got {other:?}"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// N_v: self-attention + FFN blocks refining grounded object features.
    pub grounding_layers: usize,
    /// N_h: layers of the incremental encoder.
    pub encoder_layers: usize,
    /// N_y: layers of the gated cross-attention decoder.
    pub decoder_layers: usize,
    pub max_caption_len: usize,
    pub max_question_len: usize,
    pub max_answer_len: usize,
    pub vocab_min_count: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub warmup_steps: u64,
    pub seed: u64,
    pub precision: Precision,
    pub use_vg: bool,
    pub dropout: f64,
    pub tie_final_round: bool,
    pub layer_norm_eps: f64,
    /// Score candidates by mean instead of summed log-likelihood.
    pub length_normalize: bool,
    pub grad_accum: usize,
}

impl ModelConfig {
    /// The published configuration: 3/3/3 layers, 8 heads, width 512, filter 2048.
    pub fn full() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            grounding_layers: 3,
            encoder_layers: 3,
            decoder_layers: 3,
            max_caption_len: 40,
            max_question_len: 20,
            max_answer_len: 20,
            vocab_min_count: 5,
            vocab_size: 0,
            feature_dim: 2048,
            warmup_steps: 4000,
            seed: 0,
            precision: Precision::F32,
            use_vg: true,
            dropout: 0.0,
            tie_final_round: true,
            layer_norm_eps: 1e-6,
            length_normalize: false,
            grad_accum: 1,
        }
    }

    /// Desk-scale profile used for the synthetic benchmark. Eight accumulated
    /// instances per step keep the short warmup stable.
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            d_ff: 128,
            grounding_layers: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            feature_dim: 64,
            warmup_steps: 200,
            grad_accum: 8,
            ..Self::full()
        }
    }

    /// Smallest profile, for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            grounding_layers: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            vocab_size: 20,
            feature_dim: 6,
            warmup_steps: 10,
            precision: Precision::F64,
            ..Self::full()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::data("profile", format!("unknown profile {other:?}"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::data(field, msg));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("heads", "d_model must be a positive multiple of heads");
        }
        if self.d_ff == 0 {
            return bad("d_ff", "must be positive");
        }
        if self.max_caption_len == 0 || self.max_question_len == 0 || self.max_answer_len == 0 {
            return bad("max_*_len", "truncation lengths must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        if self.grad_accum == 0 {
            return bad("grad_accum", "must be at least 1");
        }
        if self.vocab_size <= crate::data::NUM_SPECIALS {
            return bad("vocab_size", "vocabulary must hold more than the special tokens");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be positive");
        }
        Ok(())
    }

    /// Longest token sequence any text stream can produce, plus BOS/EOS/SEP slack.
    pub fn max_positions(&self) -> usize {
        self.max_caption_len
            .max(self.max_question_len + self.max_answer_len + 1)
            .max(self.max_answer_len + 1)
            + 2
    }

    const KEYS: &'static [&'static str] = &[
        "d_model",
        "heads",
        "d_ff",
        "grounding_layers",
        "encoder_layers",
        "decoder_layers",
        "max_caption_len",
        "max_question_len",
        "max_answer_len",
        "vocab_min_count",
        "warmup_steps",
        "seed",
        "precision",
        "use_vg",
        "dropout",
        "tie_final_round",
        "layer_norm_eps",
        "length_normalize",
        "grad_accum",
    ];
    // data-derived; filled in from the vocabulary and feature files when absent
    const OPTIONAL_KEYS: &'static [&'static str] = &["vocab_size", "feature_dim"];

    /// Parses the flat key-value form.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::data_at(n + 1, "config", "expected `key = value`"))?;
            let k = k.trim().to_string();
            if k != "profile" && !Self::KEYS.contains(&k.as_str()) && !Self::OPTIONAL_KEYS.contains(&k.as_str()) {
                return Err(Error::data_at(n + 1, k, "unknown config key"));
            }
            entries.insert(k, (n + 1, v.trim().to_string()));
        }
        let mut cfg = match entries.remove("profile") {
            Some((_, p)) => Self::profile(&p)?,
            None => {
                if let Some(missing) = Self::KEYS.iter().find(|k| !entries.contains_key(**k)) {
                    return Err(Error::data(*missing, "missing config key"));
                }
                Self::full()
            }
        };
        for (k, (line, v)) in &entries {
            cfg.set(k, v).map_err(|e| match e {
                Error::Data { field, message, .. } => Error::Data {
                    line: Some(*line),
                    field,
                    message,
                },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<N: FromStr>(key: &str, v: &str) -> Result<N> {
            v.parse().map_err(|_| Error::data(key, format!("cannot parse {v:?}")))
        }
        match key {
            "d_model" => self.d_model = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            "grounding_layers" => self.grounding_layers = num(key, value)?,
            "encoder_layers" => self.encoder_layers = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            "max_caption_len" => self.max_caption_len = num(key, value)?,
            "max_question_len" => self.max_question_len = num(key, value)?,
            "max_answer_len" => self.max_answer_len = num(key, value)?,
            "vocab_min_count" => self.vocab_min_count = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "feature_dim" => self.feature_dim = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "precision" => self.precision = value.parse()?,
            "use_vg" => self.use_vg = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "tie_final_round" => self.tie_final_round = num(key, value)?,
            "layer_norm_eps" => self.layer_norm_eps = num(key, value)?,
            "length_normalize" => self.length_normalize = num(key, value)?,
            "grad_accum" => self.grad_accum = num(key, value)?,
            other => return Err(Error::data(other, "unknown config key")),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for k in Self::KEYS.iter().chain(Self::OPTIONAL_KEYS) {
            let field = &v[*k];
            let text = match field {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {text}\n"));
        }
        out
    }
}
