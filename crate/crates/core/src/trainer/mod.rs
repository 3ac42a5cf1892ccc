//! Mixed imitation / actor-critic training with the consistency loss, and
//! greedy evaluation.

mod config;
mod data;
mod eval;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{checkpoint_from_str, checkpoint_to_string, clip_grad_norm, AdamW, AdamWConfig, CheckpointMeta, ParamStore, RngState};
use crate::error::{Error, Result};
use crate::losses::{a2c_loss, cross_consistency, imitation_loss, language_consistency, random_drop, step_rewards};
use crate::model::{run_episode_with, Mtvm, Policy, RolloutOptions};
use crate::rng::{derive_seed, stream, Purpose};
use crate::world::{EpisodeSpec, SplitTag, World};
use crate::Tensor;

pub use config::{config_hash, ConsistencyMode, DataConfig, ExperimentConfig, IlRollout, TrainConfig};
pub use data::{Dataset, Episode};
pub use eval::{evaluate, evaluate_split, Navigator, OracleNavigator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    /// "il" or "rl"
    pub kind: String,
    /// Batch means of the unweighted terms.
    pub il: f64,
    pub rl: f64,
    pub consis: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub mean_steps: f64,
    pub rng: RngState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub split: SplitTag,
    pub sr: f64,
    pub spl: f64,
    pub ne: f64,
    pub goal_progress: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    Iter(IterRecord),
    Eval(EvalRecord),
}

/// Append-only run log. Wall-clock timings are kept apart so that the log
/// of a seeded run is reproducible byte for byte.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub entries: Vec<LogEntry>,
    #[serde(skip)]
    pub wall_clock: Vec<(usize, f64)>,
}

impl RunLog {
    pub fn push(&mut self, e: LogEntry) {
        self.entries.push(e);
    }

    pub fn iterations(&self) -> impl Iterator<Item = &IterRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Iter(r) => Some(r),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = &EvalRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Eval(r) => Some(r),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn timing_jsonl(&self) -> String {
        self.wall_clock
            .iter()
            .map(|(i, s)| format!("{{\"iteration\":{i},\"seconds\":{s}}}\n"))
            .collect()
    }
}

/// Parameters with the best val_unseen SPL seen so far.
#[derive(Clone)]
pub struct BestCheckpoint {
    pub iteration: usize,
    pub spl: f64,
    pub params: ParamStore<f64>,
}

pub struct TrainOutcome {
    pub log: RunLog,
    pub best: Option<BestCheckpoint>,
}

/// Per-episode loss pieces. `total = λ_l·il·[IL] + rl·[RL] + consis`.
pub struct EpisodeLoss {
    pub total: Tensor,
    pub il: f64,
    pub rl: f64,
    pub consis: f64,
    pub steps: usize,
}

/// Builds the loss of one episode. `il_iter` selects the IL or RL recipe.
pub fn episode_loss(
    model: &Mtvm,
    world: &World,
    spec: &EpisodeSpec,
    cfg: &ExperimentConfig,
    il_iter: bool,
    seeds: (u64, u64),
) -> Result<EpisodeLoss> {
    let tc = &cfg.trainer;
    let masked = match tc.consistency {
        ConsistencyMode::Off => None,
        _ => {
            let mut rng = stream(seeds.0, Purpose::WordDrop, seeds.1, 0);
            Some(random_drop(&spec.instruction, cfg.loss.drop_rate, &mut rng))
        }
    };
    let policy = if il_iter {
        match tc.il_rollout {
            IlRollout::Sample => Policy::Sample,
            IlRollout::Greedy => Policy::Greedy,
            IlRollout::Teacher => Policy::Teacher,
        }
    } else {
        Policy::Sample
    };
    let opts = RolloutOptions {
        policy,
        max_steps: tc.max_steps,
        masked,
        keep_graph: true,
        dropout_seed: (cfg.model.dropout_rate > 0.0).then(|| derive_seed(seeds.0, Purpose::Rollout, seeds.1, 1)),
    };
    let mut rng = stream(seeds.0, Purpose::Rollout, seeds.1, 0);
    let trace = run_episode_with(model, world, spec, &opts, &mut rng)?;
    let logits: Vec<Tensor> = trace.graph.iter().map(|g| g.full.logits.clone()).collect();
    let teacher: Vec<usize> = trace.steps.iter().map(|s| s.teacher).collect();
    let n = trace.steps.len();

    let mut total = Tensor::scalar(0.0);
    let mut il = 0.0;
    let mut rl = 0.0;
    if il_iter {
        let l = imitation_loss(&logits, &teacher)?;
        il = l.item();
        total = total.add(&l.scale(cfg.loss.lambda_l))?;
    } else {
        let rewards = step_rewards(world, spec, &trace.path, n, &cfg.reward)?;
        let values: Vec<Tensor> = trace.graph.iter().map(|g| g.full.value.clone()).collect();
        let terms = a2c_loss(&logits, &values, &trace.actions(), &rewards.total, &cfg.reward)?;
        rl = terms.total.item();
        total = total.add(&terms.total)?;
    }

    let mut consis_t = Tensor::scalar(0.0);
    match tc.consistency {
        ConsistencyMode::Off => {}
        ConsistencyMode::On => {
            let lang = trace.lang.as_ref().expect("graph kept");
            let lang_m = trace.lang_masked.as_ref().expect("masked pass requested");
            // mean over steps of λ_s·lang + λ_m·cross_t; the language term is the same at every step
            let mut parts = Vec::with_capacity(n);
            for g in &trace.graph {
                let m = g.masked.as_ref().expect("masked pass requested");
                parts.push(cross_consistency(lang, &g.full, lang_m, m)?.reshape(&[1])?);
            }
            let cross = Tensor::concat_rows(&parts)?.mean();
            let language = language_consistency(lang, lang_m)?;
            consis_t = language.scale(cfg.loss.lambda_s).add(&cross.scale(cfg.loss.lambda_m))?;
        }
        ConsistencyMode::WordDropAug => {
            if il_iter {
                let masked_logits: Vec<Tensor> =
                    trace.graph.iter().map(|g| g.masked.as_ref().expect("masked pass requested").logits.clone()).collect();
                consis_t = imitation_loss(&masked_logits, &teacher)?.scale(cfg.loss.lambda_l);
            }
        }
    }
    let consis = consis_t.item();
    total = total.add(&consis_t)?;
    Ok(EpisodeLoss { total, il, rl, consis, steps: n })
}

/// Training-time options that do not affect the parameter trajectory.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where to write a dump when the loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
    /// Print one progress line every this many iterations; 0 is silent.
    pub progress_every: usize,
}

fn batch_indices(seed: u64, iteration: usize, batch: usize, n: usize) -> Vec<usize> {
    // walk an endless sequence of per-epoch shuffles
    let mut out = Vec::with_capacity(batch);
    let mut pos = iteration * batch;
    let mut perm_epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for _ in 0..batch {
        let epoch = pos / n;
        if epoch != perm_epoch {
            perm = (0..n).collect();
            perm.shuffle(&mut stream(seed, Purpose::Batch, 0, epoch as u64));
            perm_epoch = epoch;
        }
        out.push(perm[pos % n]);
        pos += 1;
    }
    out
}

fn write_dump(dir: &Path, iteration: usize, spec: &EpisodeSpec, detail: &str) {
    let dump = serde_json::json!({
        "iteration": iteration,
        "detail": detail,
        "episode": spec,
    });
    let _ = std::fs::create_dir_all(dir);
    let _ = std::fs::write(dir.join("nonfinite_dump.json"), serde_json::to_string_pretty(&dump).unwrap_or_default());
}

pub fn train(model: &mut Mtvm, data: &Dataset, cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    train_with(model, data, cfg, &TrainOptions::default())
}

pub fn train_with(model: &mut Mtvm, data: &Dataset, cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.config() != &cfg.model {
        return Err(Error::Config("model was built from a different configuration".into()));
    }
    if data.train.is_empty() {
        return Err(Error::Input("train split has no episodes".into()));
    }
    if data.feature_dim() != cfg.model.d_v {
        return Err(Error::Config(format!("worlds carry {}-d features, model.d_v is {}", data.feature_dim(), cfg.model.d_v)));
    }
    let tc = &cfg.trainer;
    let adam = AdamWConfig {
        lr: tc.lr,
        beta1: tc.beta1,
        beta2: tc.beta2,
        eps: tc.adam_eps,
        weight_decay: tc.weight_decay,
    };
    let mut opt = AdamW::new(adam, model.params());
    let mut log = RunLog::default();
    let mut best: Option<BestCheckpoint> = None;
    let started = std::time::Instant::now();
    let inv_b = 1.0 / tc.batch_size as f64;

    for it in 0..tc.iterations {
        let il_iter = tc.is_il_iteration(it);
        model.params().zero_grad();
        let (mut il, mut rl, mut consis, mut total, mut steps) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for (b, idx) in batch_indices(tc.seed, it, tc.batch_size, data.train.len()).into_iter().enumerate() {
            let ep = &data.train[idx];
            let world = &data.train_worlds[ep.world];
            let seeds = (tc.seed, (it as u64) << 16 | b as u64);
            let loss = episode_loss(model, world, &ep.spec, cfg, il_iter, seeds)?;
            let value = loss.total.item();
            if !value.is_finite() {
                let detail = format!("episode {b} of the batch produced loss {value}");
                if let Some(dir) = &opts.dump_dir {
                    write_dump(dir, it, &ep.spec, &detail);
                }
                return Err(Error::NonFiniteLoss { iteration: it, detail });
            }
            loss.total.scale(inv_b).backward()?;
            il += loss.il * inv_b;
            rl += loss.rl * inv_b;
            consis += loss.consis * inv_b;
            total += value * inv_b;
            steps += loss.steps;
        }
        let grad_norm = match tc.grad_clip {
            Some(c) => clip_grad_norm(model.params_mut(), c)?,
            None => grad_norm(model.params()),
        };
        opt.step(model.params_mut())?;
        log.push(LogEntry::Iter(IterRecord {
            iteration: it,
            kind: if il_iter { "il" } else { "rl" }.into(),
            il,
            rl,
            consis,
            total,
            grad_norm,
            mean_steps: steps as f64 * inv_b,
            rng: RngState { seed: tc.seed, position: it as u64 + 1 },
        }));
        log.wall_clock.push((it, started.elapsed().as_secs_f64()));
        if opts.progress_every > 0 && (it + 1) % opts.progress_every == 0 {
            eprintln!("iter {:>6} {} total {:.4} il {:.4} rl {:.4} consis {:.4}", it + 1, if il_iter { "il" } else { "rl" }, total, il, rl, consis);
        }

        let last = it + 1 == tc.iterations;
        if tc.eval_every > 0 && ((it + 1) % tc.eval_every == 0 || last) && !data.val_unseen.is_empty() {
            let report = evaluate_split(model, data, SplitTag::ValUnseen, tc.max_steps)?;
            log.push(LogEntry::Eval(EvalRecord {
                iteration: it + 1,
                split: SplitTag::ValUnseen,
                sr: report.sr,
                spl: report.spl,
                ne: report.ne_mean,
                goal_progress: report.goal_progress_mean,
            }));
            if opts.progress_every > 0 {
                eprintln!("eval {:>6} val_unseen sr {:.3} spl {:.3}", it + 1, report.sr, report.spl);
            }
            if tc.early_stop && best.as_ref().is_none_or(|b| report.spl > b.spl) {
                best = Some(BestCheckpoint { iteration: it + 1, spl: report.spl, params: model.params().clone() });
            }
        }
    }
    Ok(TrainOutcome { log, best })
}

/// Builds a model seeded by `trainer.seed`, trains it, and restores the
/// best checkpoint when early stopping kept one.
pub fn train_experiment(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Mtvm, TrainOutcome)> {
    let mut model = Mtvm::new(cfg.model.clone(), cfg.trainer.seed)?;
    let outcome = train(&mut model, data, cfg)?;
    if let Some(best) = &outcome.best {
        model.params_mut().load_from(&best.params)?;
    }
    Ok((model, outcome))
}

fn grad_norm(store: &ParamStore<f64>) -> f64 {
    store
        .iter()
        .filter_map(|(_, p)| p.value.grad())
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rebuilds a model from a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(Mtvm, CheckpointMeta)> {
    let ck = checkpoint_from_str(&std::fs::read_to_string(path)?)?;
    let cfg = ck
        .meta
        .model_config
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no model configuration".into()))?;
    let cfg: crate::model::ModelConfig = serde_json::from_value(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = Mtvm::new(cfg, 0)?;
    ck.apply_to(model.params_mut())?;
    Ok((model, ck.meta))
}

/// Serialises `store` with run metadata.
pub fn save_checkpoint(path: &Path, store: &ParamStore<f64>, cfg: &ExperimentConfig, step: usize) -> Result<()> {
    let meta = CheckpointMeta {
        config_hash: cfg.hash(),
        step: step as u64,
        rng: RngState { seed: cfg.trainer.seed, position: step as u64 },
        model_config: Some(serde_json::to_value(&cfg.model)?),
    };
    std::fs::write(path, checkpoint_to_string(store, &meta)?)?;
    Ok(())
}
