//! The per-episode decision loop.

use crate::error::Result;
use crate::rng::Prng;
use crate::world::{observe, oracle_action, EpisodeSpec, Instruction, World};

use super::{predict_action, ActionMode, LangEncoding, Mtvm, StepOutput};

pub const DEFAULT_MAX_STEPS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Greedy,
    Sample,
    /// Follow the oracle action at every visited node.
    Teacher,
}

#[derive(Clone)]
pub struct RolloutOptions {
    pub policy: Policy,
    pub max_steps: usize,
    /// When set, every step also runs the cross-modal encoder on this
    /// instruction with the same memory and vision inputs.
    pub masked: Option<Instruction>,
    /// Keep the differentiable step outputs for loss computation.
    pub keep_graph: bool,
    /// Seed for dropout masks; `None` runs without dropout.
    pub dropout_seed: Option<u64>,
}

impl RolloutOptions {
    pub fn inference(policy: Policy) -> Self {
        Self { policy, max_steps: DEFAULT_MAX_STEPS, masked: None, keep_graph: false, dropout_seed: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub node: usize,
    pub heading: f64,
    pub action: usize,
    /// Oracle action at this node.
    pub teacher: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub value: f64,
    pub memory_len: usize,
}

/// Differentiable outputs of one step.
#[derive(Clone)]
pub struct StepGraph {
    pub full: StepOutput,
    pub masked: Option<StepOutput>,
}

#[derive(Clone)]
pub struct EpisodeTrace {
    pub start: usize,
    pub goal: usize,
    /// Visited nodes, starting with `start`.
    pub path: Vec<usize>,
    pub steps: Vec<TraceStep>,
    pub stopped: bool,
    pub lang: Option<LangEncoding>,
    pub lang_masked: Option<LangEncoding>,
    pub graph: Vec<StepGraph>,
}

impl EpisodeTrace {
    pub fn final_node(&self) -> usize {
        *self.path.last().expect("path starts with the start node")
    }

    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }
}

pub fn run_episode(
    model: &Mtvm,
    world: &World,
    spec: &EpisodeSpec,
    policy: Policy,
    rng: &mut Prng,
    max_steps: usize,
) -> Result<EpisodeTrace> {
    let opts = RolloutOptions { max_steps, ..RolloutOptions::inference(policy) };
    run_episode_with(model, world, spec, &opts, rng)
}

pub fn run_episode_with(
    model: &Mtvm,
    world: &World,
    spec: &EpisodeSpec,
    opts: &RolloutOptions,
    rng: &mut Prng,
) -> Result<EpisodeTrace> {
    let mut drop = model.dropout_for(opts.dropout_seed);
    let lang = model.encode_language_with(&spec.instruction, &mut drop)?;
    let lang_masked = match &opts.masked {
        Some(m) => Some(model.encode_language_with(m, &mut drop)?),
        None => None,
    };
    let mut memory = model.new_memory();
    let mut node = spec.start;
    let mut heading = spec.start_heading;
    let mut trace = EpisodeTrace {
        start: spec.start,
        goal: spec.goal,
        path: vec![node],
        steps: Vec::new(),
        stopped: false,
        lang: None,
        lang_masked: None,
        graph: Vec::new(),
    };
    for _ in 0..opts.max_steps.max(1) {
        let obs = observe(world, node, heading);
        let vision = model.encode_vision(&obs)?;
        let out = model.cross_modality_forward_with(&lang, &memory, &vision, &mut drop)?;
        let masked = match &lang_masked {
            Some(lm) => Some(model.cross_modality_forward_with(lm, &memory, &vision, &mut drop)?),
            None => None,
        };
        let teacher = oracle_action(world, spec, node, heading);
        let action = match opts.policy {
            Policy::Greedy => predict_action(&out.probs, ActionMode::Greedy, rng),
            Policy::Sample => predict_action(&out.probs, ActionMode::Sample, rng),
            Policy::Teacher => teacher,
        };
        trace.steps.push(TraceStep {
            node,
            heading,
            action,
            teacher,
            logits: out.logits.to_vec(),
            probs: out.probs.clone(),
            value: out.value.item(),
            memory_len: memory.len(),
        });
        let cand = &obs.candidates[action];
        if let Some(next) = cand.target {
            model.update_memory(&mut memory, &out, action, cand.heading, cand.elevation)?;
            heading = world.heading(node, next);
            node = next;
            trace.path.push(node);
        }
        if opts.keep_graph {
            trace.graph.push(StepGraph { full: out, masked });
        }
        if cand.target.is_none() {
            trace.stopped = true;
            break;
        }
    }
    if opts.keep_graph {
        trace.lang = Some(lang);
        trace.lang_masked = lang_masked;
    }
    Ok(trace)
}
