//! One-axis ablation sweeps: every cell gets the same training budget and
//! is scored on both validation splits.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{evaluate_split, train_experiment, Dataset, ExperimentConfig};
use crate::world::SplitTag;

use super::MetricReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    MemoryCapacity,
    DropRate,
    #[serde(rename = "lambda_s")]
    LambdaS,
    #[serde(rename = "lambda_m")]
    LambdaM,
    ConsistencyOnOff,
    CrossAttn,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::MemoryCapacity,
        AblationAxis::DropRate,
        AblationAxis::LambdaS,
        AblationAxis::LambdaM,
        AblationAxis::ConsistencyOnOff,
        AblationAxis::CrossAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::MemoryCapacity => "memory_capacity",
            AblationAxis::DropRate => "drop_rate",
            AblationAxis::LambdaS => "lambda_s",
            AblationAxis::LambdaM => "lambda_m",
            AblationAxis::ConsistencyOnOff => "consistency_on_off",
            AblationAxis::CrossAttn => "cross_attn",
        }
    }

    /// Config field the axis sets.
    pub fn config_path(self) -> &'static str {
        match self {
            AblationAxis::MemoryCapacity => "model.memory_capacity",
            AblationAxis::DropRate => "loss.drop_rate",
            AblationAxis::LambdaS => "loss.lambda_s",
            AblationAxis::LambdaM => "loss.lambda_m",
            AblationAxis::ConsistencyOnOff => "trainer.consistency",
            AblationAxis::CrossAttn => "model.cross_attn",
        }
    }

    /// The values the corresponding study sweeps.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::MemoryCapacity => &["1", "2", "VARIABLE"],
            AblationAxis::DropRate => &["0.1", "0.3", "0.5", "0.7"],
            AblationAxis::LambdaS | AblationAxis::LambdaM => &["0", "0.2", "0.4", "0.6", "0.8"],
            AblationAxis::ConsistencyOnOff => &["on", "off", "word_drop_aug"],
            AblationAxis::CrossAttn => &["bidirectional", "single"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    pub fn new(axis: AblationAxis, seeds: Vec<u64>) -> Self {
        Self { axis, values: axis.default_values(), seeds }
    }

    /// Config of one cell: the axis value applied, and `seed` driving both
    /// initialisation and training.
    pub fn cell_config(&self, base: &ExperimentConfig, value: &str, seed: u64) -> Result<ExperimentConfig> {
        let mut cfg = base.with_override(self.axis.config_path(), value)?;
        cfg.trainer.seed = seed;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub sr: f64,
    pub spl: f64,
    pub ne: f64,
    pub goal_progress: f64,
    pub n_episodes: usize,
}

impl From<&MetricReport> for SplitScore {
    fn from(r: &MetricReport) -> Self {
        Self { sr: r.sr, spl: r.spl, ne: r.ne_mean, goal_progress: r.goal_progress_mean, n_episodes: r.n_episodes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub value: String,
    pub seed: u64,
    pub config_hash: String,
    /// Iteration of the retained parameters.
    pub iteration: usize,
    pub val_seen: SplitScore,
    pub val_unseen: SplitScore,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResults {
    pub axis: AblationAxis,
    pub base_config_hash: String,
    pub cells: Vec<AblationCell>,
}

/// Mean of one metric over seeds, per axis value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueSummary {
    pub value: String,
    pub seeds: usize,
    pub val_seen: SplitScore,
    pub val_unseen: SplitScore,
}

impl AblationResults {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,seed,split,sr,spl,ne,goal_progress,n_episodes,iteration,seconds\n");
        for c in &self.cells {
            for (split, s) in [("val_seen", &c.val_seen), ("val_unseen", &c.val_unseen)] {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{:.3}",
                    self.axis, c.value, c.seed, split, s.sr, s.spl, s.ne, s.goal_progress, s.n_episodes, c.iteration, c.seconds
                );
            }
        }
        out
    }

    /// Seed-averaged scores, in the order values first appear.
    pub fn summary(&self) -> Vec<ValueSummary> {
        let mut order: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !order.contains(&c.value.as_str()) {
                order.push(&c.value);
            }
        }
        order
            .into_iter()
            .map(|v| {
                let cells: Vec<&AblationCell> = self.cells.iter().filter(|c| c.value == v).collect();
                let mean = |f: &dyn Fn(&AblationCell) -> SplitScore| {
                    let n = cells.len() as f64;
                    let s: Vec<SplitScore> = cells.iter().map(|c| f(c)).collect();
                    SplitScore {
                        sr: s.iter().map(|x| x.sr).sum::<f64>() / n,
                        spl: s.iter().map(|x| x.spl).sum::<f64>() / n,
                        ne: s.iter().map(|x| x.ne).sum::<f64>() / n,
                        goal_progress: s.iter().map(|x| x.goal_progress).sum::<f64>() / n,
                        n_episodes: s.iter().map(|x| x.n_episodes).sum(),
                    }
                };
                ValueSummary {
                    value: v.to_string(),
                    seeds: cells.len(),
                    val_seen: mean(&|c| c.val_seen),
                    val_unseen: mean(&|c| c.val_unseen),
                }
            })
            .collect()
    }
}

/// Trains one cell and scores its retained parameters.
pub fn run_cell(cfg: &ExperimentConfig, data: &Dataset, value: &str) -> Result<AblationCell> {
    let started = Instant::now();
    let (model, outcome) = train_experiment(cfg, data)?;
    let iteration = outcome.best.as_ref().map_or(cfg.trainer.iterations, |b| b.iteration);
    let max_steps = cfg.trainer.max_steps;
    let seen = evaluate_split(&model, data, SplitTag::ValSeen, max_steps)?;
    let unseen = evaluate_split(&model, data, SplitTag::ValUnseen, max_steps)?;
    Ok(AblationCell {
        value: value.to_string(),
        seed: cfg.trainer.seed,
        config_hash: cfg.hash(),
        iteration,
        val_seen: (&seen).into(),
        val_unseen: (&unseen).into(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Runs every (value, seed) cell, up to `jobs` at a time. Cells are
/// independent, so the results do not depend on `jobs`.
pub fn run_ablation(base: &ExperimentConfig, grid: &AblationGrid, data: &Dataset, jobs: usize) -> Result<AblationResults> {
    if grid.values.is_empty() || grid.seeds.is_empty() {
        return Err(Error::Config("ablation grid needs at least one value and one seed".into()));
    }
    let mut plan = Vec::new();
    for v in &grid.values {
        for &s in &grid.seeds {
            plan.push((v.clone(), grid.cell_config(base, v, s)?));
        }
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<AblationCell>>>> = Mutex::new((0..plan.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, plan.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((value, cfg)) = plan.get(i) else { break };
                let r = run_cell(cfg, data, value);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let cells = slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationResults { axis: grid.axis, base_config_hash: base.hash(), cells })
}
