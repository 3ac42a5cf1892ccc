use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, RewardConfig};
use crate::model::ModelConfig;

/// How IL iterations choose the moves they roll out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IlRollout {
    /// Student forcing with sampled moves.
    Sample,
    /// Student forcing with greedy moves.
    Greedy,
    /// Teacher forcing: follow the oracle.
    Teacher,
}

/// What the masked-instruction pass is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// KL between the full and masked passes.
    On,
    /// No masked pass.
    Off,
    /// Imitation loss on the masked pass, no KL.
    WordDropAug,
}

impl std::str::FromStr for IlRollout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.trim().to_string()))
            .map_err(|_| Error::Config(format!("il_rollout must be sample, greedy or teacher, got {s:?}")))
    }
}

impl std::str::FromStr for ConsistencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.trim().to_string()))
            .map_err(|_| Error::Config(format!("consistency must be on, off or word_drop_aug, got {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Episodes per optimiser step.
    pub batch_size: usize,
    /// Share of iterations that are IL; 0.5 alternates IL and RL.
    pub il_fraction: f64,
    pub il_rollout: IlRollout,
    pub consistency: ConsistencyMode,
    /// Evaluate on val_unseen every this many iterations; 0 disables.
    pub eval_every: usize,
    /// Keep the parameters with the best val_unseen SPL.
    pub early_stop: bool,
    pub max_steps: usize,
    /// Global gradient-norm clip; `None` disables.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 8,
            il_fraction: 0.5,
            il_rollout: IlRollout::Sample,
            consistency: ConsistencyMode::On,
            eval_every: 500,
            early_stop: true,
            max_steps: crate::model::DEFAULT_MAX_STEPS,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.il_fraction) {
            return bad("il_fraction must lie in [0, 1]");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    /// Iteration `i` is IL iff `ceil((i+1)·f) > ceil(i·f)`, so `f = 0.5`
    /// gives IL on even and RL on odd iterations.
    pub fn is_il_iteration(&self, i: usize) -> bool {
        let f = self.il_fraction;
        ((i + 1) as f64 * f).ceil() > (i as f64 * f).ceil()
    }
}

/// Worlds and episodes the run trains and evaluates on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train_worlds: usize,
    pub val_unseen_worlds: usize,
    pub nodes: usize,
    pub max_degree: usize,
    pub train_episodes_per_world: usize,
    pub eval_episodes_per_world: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_worlds: 40,
            val_unseen_worlds: 8,
            nodes: 50,
            max_degree: 5,
            train_episodes_per_world: 25,
            eval_episodes_per_world: 10,
            min_len: crate::world::DEFAULT_MIN_LEN,
            max_len: crate::world::DEFAULT_MAX_LEN,
        }
    }
}

/// Everything a run depends on. `--set section.field=value` addresses it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub loss: LossWeights,
    pub reward: RewardConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        self.loss.validate()?;
        self.reward.validate()?;
        if self.data.min_len > self.data.max_len || self.data.min_len == 0 {
            return Err(Error::Config("data.min_len must be in 1..=max_len".into()));
        }
        if crate::world::max_instruction_tokens(self.data.max_len) > self.model.l_max {
            return Err(Error::Config(format!(
                "paths of {} hops can render instructions longer than l_max {}",
                self.data.max_len, self.model.l_max
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Returns a copy with the dotted field `path` (e.g. `trainer.lr`) set
    /// from `raw`. `raw` is read as JSON when it parses, else as a string.
    pub fn with_override(&self, path: &str, raw: &str) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        let mut slot = &mut root;
        for key in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown config key {path}")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let cfg: Self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{path}={raw}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_string(self).expect("config serialises"))
    }
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
