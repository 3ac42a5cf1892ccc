use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::world::{Vocab, L_MAX};

/// How many past-step tokens the memory bank keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemoryCapacity {
    Finite(usize),
    Variable,
}

impl MemoryCapacity {
    pub fn limit(self) -> Option<usize> {
        match self {
            MemoryCapacity::Finite(n) => Some(n),
            MemoryCapacity::Variable => None,
        }
    }

    /// Bank length after `t` completed steps.
    pub fn len_after(self, t: usize) -> usize {
        self.limit().map_or(t, |n| n.min(t))
    }
}

impl fmt::Display for MemoryCapacity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemoryCapacity::Finite(n) => write!(f, "{n}"),
            MemoryCapacity::Variable => f.write_str("VARIABLE"),
        }
    }
}

impl FromStr for MemoryCapacity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("variable") {
            return Ok(MemoryCapacity::Variable);
        }
        t.parse::<usize>()
            .map(MemoryCapacity::Finite)
            .map_err(|_| Error::Config(format!("memory capacity must be an integer or VARIABLE, got {s:?}")))
    }
}

impl Serialize for MemoryCapacity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MemoryCapacity::Finite(n) => s.serialize_u64(*n as u64),
            MemoryCapacity::Variable => s.serialize_str("VARIABLE"),
        }
    }
}

impl<'de> Deserialize<'de> for MemoryCapacity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(usize),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(MemoryCapacity::Finite(n)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossAttn {
    /// Language attends to memory+vision and vice versa.
    Bidirectional,
    /// Language only supplies keys and values.
    Single,
}

impl FromStr for CrossAttn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bidirectional" => Ok(CrossAttn::Bidirectional),
            "single" => Ok(CrossAttn::Single),
            other => Err(Error::Config(format!("cross_attn must be bidirectional or single, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub lang_layers: usize,
    pub cross_layers: usize,
    /// Candidate feature width.
    pub d_v: usize,
    pub d_dir: usize,
    /// Hidden width of every feed-forward block.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub l_max: usize,
    pub memory_capacity: MemoryCapacity,
    pub dropout_rate: f64,
    pub memory_backprop: bool,
    pub cross_attn: CrossAttn,
    pub ln_eps: f64,
    /// Weights start as N(0, (init_gain / sqrt(fan_in))^2).
    pub init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            lang_layers: 2,
            cross_layers: 2,
            d_v: 64,
            d_dir: 8,
            d_ff: 128,
            vocab_size: Vocab::get().len(),
            l_max: L_MAX,
            memory_capacity: MemoryCapacity::Variable,
            dropout_rate: 0.0,
            memory_backprop: false,
            cross_attn: CrossAttn::Bidirectional,
            ln_eps: 1e-5,
            init_gain: 1.0,
        }
    }
}

impl ModelConfig {
    /// The configuration used by the whole-model gradient check.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            lang_layers: 1,
            cross_layers: 1,
            d_v: 4,
            d_dir: 4,
            d_ff: 12,
            memory_capacity: MemoryCapacity::Variable,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_model < 2 {
            return bad("d_model must be at least 2".into());
        }
        if self.d_dir == 0 || self.d_dir % 4 != 0 {
            return bad(format!("d_dir {} must be a positive multiple of 4", self.d_dir));
        }
        if self.d_v == 0 || self.d_ff == 0 {
            return bad("d_v and d_ff must be positive".into());
        }
        if self.vocab_size < Vocab::get().len() {
            return bad(format!("vocab_size {} below vocabulary of {}", self.vocab_size, Vocab::get().len()));
        }
        if self.l_max == 0 {
            return bad("l_max must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.memory_capacity == MemoryCapacity::Finite(0) {
            return bad("memory capacity 0 is not supported; use 1 or more".into());
        }
        if !(self.ln_eps > 0.0) || !(self.init_gain > 0.0) {
            return bad("ln_eps and init_gain must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_serde() {
        assert_eq!(serde_json::to_string(&MemoryCapacity::Finite(3)).unwrap(), "3");
        assert_eq!(serde_json::to_string(&MemoryCapacity::Variable).unwrap(), "\"VARIABLE\"");
        let c: MemoryCapacity = serde_json::from_str("\"variable\"").unwrap();
        assert_eq!(c, MemoryCapacity::Variable);
        assert!(serde_json::from_str::<MemoryCapacity>("\"lots\"").is_err());
        assert_eq!(MemoryCapacity::Finite(2).len_after(5), 2);
        assert_eq!(MemoryCapacity::Variable.len_after(5), 5);
    }

    #[test]
    fn config_invariants() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::tiny().validate().is_ok());
        let c = ModelConfig { n_heads: 3, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { d_dir: 6, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let text = ModelConfig::default().to_json().unwrap();
        assert_eq!(ModelConfig::from_json(&text).unwrap(), ModelConfig::default());
        assert!(ModelConfig::from_json(r#"{"d_model": 64, "bogus": 1}"#).is_err());
    }
}
