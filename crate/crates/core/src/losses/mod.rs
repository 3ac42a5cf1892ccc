//! Training objectives: imitation, advantage actor-critic with shaped
//! rewards, and the consistency loss between full and word-dropped passes.

#[cfg(test)]
mod tests;

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LangEncoding, StepOutput};
use crate::rng::Prng;
use crate::world::{EpisodeSpec, Instruction, Vocab, World, MASK};
use crate::Tensor;

/// Probability floor inside every logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_m: f64,
    pub lambda_l: f64,
    pub drop_rate: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_s: 0.6, lambda_m: 0.2, lambda_l: 0.2, drop_rate: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_s, self.lambda_m, self.lambda_l].iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!("drop_rate {} outside [0, 1]", self.drop_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub success_radius: f64,
    pub success_reward: f64,
    pub step_distance_scale: f64,
    pub fidelity_weight: f64,
    pub gamma: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            success_radius: 3.0,
            success_reward: 2.0,
            step_distance_scale: 1.0,
            fidelity_weight: 0.5,
            gamma: 0.9,
            value_coef: 0.5,
            entropy_coef: 0.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.success_radius > 0.0) {
            return Err(Error::Config("success_radius must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }
}

thread_local! {
    static DROP_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// How many times `random_drop` ran on this thread.
pub fn random_drop_calls() -> u64 {
    DROP_CALLS.with(|c| c.get())
}

/// Replaces each non-special token by `[MASK]` with probability `p`.
pub fn random_drop(instruction: &Instruction, p: f64, rng: &mut Prng) -> Instruction {
    DROP_CALLS.with(|c| c.set(c.get() + 1));
    let tokens = instruction
        .tokens
        .iter()
        .map(|&t| {
            if Vocab::is_special(t) {
                t
            } else if rng.random::<f64>() < p {
                MASK
            } else {
                t
            }
        })
        .collect();
    Instruction { tokens }
}

/// Row-wise softmax over the hidden dimension.
pub fn token_distributions(h: &Tensor) -> Tensor {
    h.softmax_last()
}

/// Mean over rows of `KL(P‖Q) + KL(Q‖P)`.
pub fn bidirectional_kl(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.shape() != q.shape() {
        return Err(Error::shape("bidirectional_kl", format!("{:?} vs {:?}", p.shape(), q.shape())));
    }
    let rows = p.rows();
    if rows == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    // KL(P‖Q) + KL(Q‖P) = Σ (p − q)(ln p − ln q)
    let log_ratio = p.log_clamped(PROB_EPS).sub(&q.log_clamped(PROB_EPS))?;
    Ok(p.sub(q)?.mul(&log_ratio)?.sum().scale(1.0 / rows as f64))
}

/// Rows of `x` whose flag is false, kept in order.
fn select_rows(x: &Tensor, hidden: &[bool]) -> Result<Option<Tensor>> {
    let mut parts = Vec::new();
    let mut r = 0;
    while r < hidden.len() {
        if hidden[r] {
            r += 1;
            continue;
        }
        let start = r;
        while r < hidden.len() && !hidden[r] {
            r += 1;
        }
        parts.push(x.slice_rows(start, r - start)?);
    }
    Ok(match parts.len() {
        0 => None,
        1 => parts.pop(),
        _ => Some(Tensor::concat_rows(&parts)?),
    })
}

/// Breakdown of one consistency term.
#[derive(Clone)]
pub struct ConsistencyTerms {
    pub language: Tensor,
    pub cross: Tensor,
    pub total: Tensor,
}

fn aligned(full_lang: &LangEncoding, masked_lang: &LangEncoding) -> Result<Vec<bool>> {
    if full_lang.x.shape() != masked_lang.x.shape() || full_lang.pad != masked_lang.pad {
        return Err(Error::shape("consistency_loss", "full and masked instructions are not aligned"));
    }
    // rows that are [PAD] in either pass, or [MASK] in the masked pass
    Ok(full_lang.pad.iter().zip(&masked_lang.masked).map(|(a, b)| *a || *b).collect())
}

fn kl_kept_rows(a: &Tensor, b: &Tensor, hide: &[bool]) -> Result<Tensor> {
    Ok(match (select_rows(a, hide)?, select_rows(b, hide)?) {
        (Some(a), Some(b)) => bidirectional_kl(&token_distributions(&a), &token_distributions(&b))?,
        _ => Tensor::scalar(0.0),
    })
}

/// `KL(X, X′)` over the kept language rows. Step-independent.
pub fn language_consistency(full_lang: &LangEncoding, masked_lang: &LangEncoding) -> Result<Tensor> {
    let hide = aligned(full_lang, masked_lang)?;
    kl_kept_rows(&full_lang.x, &masked_lang.x, &hide)
}

/// `KL([X̂;M̂;V̂], [X̂′;M̂′;V̂′])` over the kept language rows and every
/// memory and vision row.
pub fn cross_consistency(full_lang: &LangEncoding, full: &StepOutput, masked_lang: &LangEncoding, masked: &StepOutput) -> Result<Tensor> {
    let mut hide = aligned(full_lang, masked_lang)?;
    if full.m_hat.shape() != masked.m_hat.shape() || full.v_hat.shape() != masked.v_hat.shape() {
        return Err(Error::shape("consistency_loss", "full and masked passes saw different memory or vision"));
    }
    let (fa, ma) = (full.all_tokens()?, masked.all_tokens()?);
    hide.resize(fa.rows(), false);
    kl_kept_rows(&fa, &ma, &hide)
}

/// `λ_s·KL(X, X′) + λ_m·KL([X̂;M̂;V̂], [X̂′;M̂′;V̂′])`, both bidirectional.
/// Language rows that are `[PAD]`, or `[MASK]` in the masked instruction,
/// are left out of both terms; memory and vision rows are always compared.
pub fn consistency_loss(
    full_lang: &LangEncoding,
    full: &StepOutput,
    masked_lang: &LangEncoding,
    masked: &StepOutput,
    weights: &LossWeights,
) -> Result<ConsistencyTerms> {
    let language = language_consistency(full_lang, masked_lang)?;
    let cross = cross_consistency(full_lang, full, masked_lang, masked)?;
    let total = language.scale(weights.lambda_s).add(&cross.scale(weights.lambda_m))?;
    Ok(ConsistencyTerms { language, cross, total })
}

/// Mean over steps of `−ln softmax(logits_t)[a*_t]`.
pub fn imitation_loss(logits: &[Tensor], teacher: &[usize]) -> Result<Tensor> {
    if logits.len() != teacher.len() || logits.is_empty() {
        return Err(Error::Input(format!("{} logit rows for {} teacher actions", logits.len(), teacher.len())));
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (l, &a) in logits.iter().zip(teacher) {
        terms.push(l.log_softmax().pick(a)?.reshape(&[1])?);
    }
    Ok(Tensor::concat_rows(&terms)?.mean().scale(-1.0))
}

/// Normalised dynamic time warping between two node sequences, with
/// geodesic distance as the local cost: `exp(−DTW / (|reference|·radius))`.
pub fn ndtw(world: &World, path: &[usize], reference: &[usize], radius: f64) -> f64 {
    if path.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (n, m) = (path.len(), reference.len());
    let mut dp = vec![f64::INFINITY; (n + 1) * (m + 1)];
    dp[0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let cost = world.distance(path[i - 1], reference[j - 1]);
            let best = dp[(i - 1) * (m + 1) + j].min(dp[i * (m + 1) + j - 1]).min(dp[(i - 1) * (m + 1) + j - 1]);
            dp[i * (m + 1) + j] = cost + best;
        }
    }
    (-dp[n * (m + 1) + m] / (m as f64 * radius)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rewards {
    /// Distance reduction earned by each step's action.
    pub intermediate: Vec<f64>,
    pub success: bool,
    pub ndtw: f64,
    /// `intermediate` plus the terminal bonuses on the last step.
    pub total: Vec<f64>,
}

/// Per-step shaped rewards for a rollout over `path` (visited nodes,
/// starting at the episode start) that took `steps` decisions.
pub fn step_rewards(world: &World, spec: &EpisodeSpec, path: &[usize], steps: usize, cfg: &RewardConfig) -> Result<Rewards> {
    if path.is_empty() || steps == 0 || path.len() > steps + 1 {
        return Err(Error::Input(format!("path of {} nodes for {steps} steps", path.len())));
    }
    let d = world.distances_to(spec.goal);
    let mut intermediate = vec![0.0; steps];
    for (t, hop) in path.windows(2).enumerate() {
        intermediate[t] = cfg.step_distance_scale * (d[hop[0]] - d[hop[1]]);
    }
    let final_node = *path.last().expect("nonempty");
    let success = d[final_node] <= cfg.success_radius;
    let ndtw = ndtw(world, path, &spec.gt_path, cfg.success_radius);
    let mut total = intermediate.clone();
    let last = total.last_mut().expect("at least one step");
    if success {
        *last += cfg.success_reward;
    }
    *last += cfg.fidelity_weight * ndtw;
    Ok(Rewards { intermediate, success, ndtw, total })
}

/// `G_t = r_t + γ·G_{t+1}`
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

#[derive(Clone)]
pub struct A2cTerms {
    pub policy: Tensor,
    pub value: Tensor,
    pub entropy: Tensor,
    pub total: Tensor,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// `Σ_t −ln π(a_t)·A_t + c_v·Σ_t (G_t − V_t)² − c_e·Σ_t H(π_t)` with the
/// advantage `A_t = G_t − V_t` held constant.
pub fn a2c_loss(logits: &[Tensor], values: &[Tensor], actions: &[usize], rewards: &[f64], cfg: &RewardConfig) -> Result<A2cTerms> {
    let n = logits.len();
    if values.len() != n || actions.len() != n || rewards.len() != n || n == 0 {
        return Err(Error::Input("a2c_loss needs one logit row, value, action and reward per step".into()));
    }
    let returns = discounted_returns(rewards, cfg.gamma);
    let mut policy = Vec::with_capacity(n);
    let mut value = Vec::with_capacity(n);
    let mut entropy = Vec::with_capacity(n);
    let mut advantages = Vec::with_capacity(n);
    for t in 0..n {
        let logp = logits[t].log_softmax();
        let adv = returns[t] - values[t].item();
        advantages.push(adv);
        policy.push(logp.pick(actions[t])?.scale(-adv).reshape(&[1])?);
        let err = values[t].reshape(&[1])?.sub(&Tensor::from_vec(vec![returns[t]], &[1])?)?;
        value.push(err.mul(&err)?);
        if cfg.entropy_coef != 0.0 {
            entropy.push(logp.exp().mul(&logp)?.sum().scale(-1.0).reshape(&[1])?);
        }
    }
    let policy = Tensor::concat_rows(&policy)?.sum();
    let value = Tensor::concat_rows(&value)?.sum();
    let entropy = if entropy.is_empty() { Tensor::scalar(0.0) } else { Tensor::concat_rows(&entropy)?.sum() };
    let total = policy.add(&value.scale(cfg.value_coef))?.sub(&entropy.scale(cfg.entropy_coef))?;
    Ok(A2cTerms { policy, value, entropy, total, returns, advantages })
}
