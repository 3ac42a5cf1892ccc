//! Whole-model gradient check against central finite differences.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{consistency_loss, imitation_loss, LossWeights};
use crate::model::{directional_feature, MemoryBank, ModelConfig, Mtvm};
use crate::rng::{stream, Purpose};
use crate::world::{Candidate, Instruction, Observation, CLS, MASK, PAD};
use crate::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub seed: u64,
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Instruction length including `[CLS]`; the last position is `[PAD]`.
    pub lang_len: usize,
    pub candidates: usize,
    pub memory_len: usize,
    pub weights: LossWeights,
    /// Return target for the value head.
    pub value_target: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            lang_len: 5,
            candidates: 3,
            memory_len: 2,
            weights: LossWeights::default(),
            value_target: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElementError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub n_params: usize,
    pub n_elements: usize,
    pub loss: f64,
    pub max_rel_err: f64,
    pub worst: Option<ElementError>,
    /// Every element above tolerance.
    pub failures: Vec<ElementError>,
    /// Parameters whose analytic gradient is exactly zero everywhere.
    pub zero_grad_params: Vec<String>,
    pub seconds: f64,
    pub passed: bool,
}

/// One synthetic decision step with a non-empty memory bank.
struct Fixture {
    full: Instruction,
    masked: Instruction,
    obs: Observation,
    memory: Vec<Vec<f64>>,
    teacher: usize,
}

fn fixture(cfg: &GradcheckConfig) -> Result<Fixture> {
    let m = &cfg.model;
    if cfg.lang_len < 3 || cfg.candidates < 2 {
        return Err(Error::Config("gradcheck needs lang_len >= 3 and candidates >= 2".into()));
    }
    let mut rng = stream(cfg.seed, Purpose::Fixture, 0x9c, 0);
    let mut tokens = vec![CLS];
    while tokens.len() < cfg.lang_len - 1 {
        tokens.push(rng.random_range(3..m.vocab_size as u16));
    }
    tokens.push(PAD);
    let full = Instruction::new(tokens)?;
    // mask every other word so both kinds of row are present
    let masked = Instruction {
        tokens: full
            .tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| if i % 2 == 0 && t != CLS && t != PAD { MASK } else { t })
            .collect(),
    };
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let mut candidates = Vec::with_capacity(cfg.candidates);
    for k in 0..cfg.candidates {
        let heading = -2.0 + 4.0 * k as f64 / cfg.candidates as f64;
        candidates.push(Candidate { feature: normal(m.d_v), heading, elevation: 0.1 * k as f64, target: Some(k) });
    }
    let memory = (0..cfg.memory_len)
        .map(|j| {
            let mut row = normal(m.d_model);
            row.extend(directional_feature(0.7 * j as f64 - 0.3, 0.0, m.d_dir));
            row
        })
        .collect();
    Ok(Fixture {
        full,
        masked,
        obs: Observation { node: 0, candidates },
        memory,
        teacher: 1 % cfg.candidates,
    })
}

/// `λ_l·IL + c·(G − V)² + L_consis` on the fixture step.
fn fixture_loss(model: &Mtvm, fx: &Fixture, cfg: &GradcheckConfig) -> Result<Tensor> {
    let mut memory = MemoryBank::new(model.config().memory_capacity);
    for row in &fx.memory {
        memory.push(Tensor::from_vec(row.clone(), &[1, row.len()])?);
    }
    let vision = model.encode_vision(&fx.obs)?;
    let lang = model.encode_language(&fx.full)?;
    let lang_m = model.encode_language(&fx.masked)?;
    let full = model.cross_modality_forward(&lang, &memory, &vision)?;
    let masked = model.cross_modality_forward(&lang_m, &memory, &vision)?;
    let il = imitation_loss(std::slice::from_ref(&full.logits), &[fx.teacher])?;
    let err = full.value.reshape(&[1])?.sub(&Tensor::from_vec(vec![cfg.value_target], &[1])?)?;
    let consis = consistency_loss(&lang, &full, &lang_m, &masked, &cfg.weights)?;
    il.scale(cfg.weights.lambda_l).add(&err.mul(&err)?.sum().scale(0.5))?.add(&consis.total)
}

pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    gradcheck_with(cfg, |_, _| {})
}

/// Like [`gradcheck`], but `tamper` may edit each parameter's analytic
/// gradient before comparison. Used to confirm the checker catches errors.
pub fn gradcheck_with(cfg: &GradcheckConfig, tamper: impl Fn(&str, &mut [f64])) -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut model = Mtvm::new(cfg.model.clone(), cfg.seed)?;
    let fx = fixture(cfg)?;
    let loss = fixture_loss(&model, &fx, cfg)?;
    loss.backward()?;
    let ids: Vec<_> = model.params().iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut analytic = Vec::with_capacity(ids.len());
    for &id in &ids {
        let p = model.params().param(id);
        let mut g = p.value.grad().unwrap_or_else(|| vec![0.0; p.value.numel()]);
        tamper(&p.name, &mut g);
        analytic.push(g);
    }

    let h = cfg.step;
    let mut n_elements = 0;
    let mut max_rel_err: f64 = 0.0;
    let mut worst: Option<ElementError> = None;
    let mut failures = Vec::new();
    let mut zero_grad_params = Vec::new();
    for (&id, g) in ids.iter().zip(&analytic) {
        let name = model.params().param(id).name.clone();
        if g.iter().all(|x| *x == 0.0) {
            zero_grad_params.push(name.clone());
        }
        let base = model.params().get(id).to_vec();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            model.params_mut().set_data(id, probe.clone())?;
            let up = fixture_loss(&model, &fx, cfg)?.item();
            probe[i] = base[i] - h;
            model.params_mut().set_data(id, probe)?;
            let down = fixture_loss(&model, &fx, cfg)?.item();
            let numeric = (up - down) / (2.0 * h);
            let rel_err = (g[i] - numeric).abs() / numeric.abs().max(1e-8);
            n_elements += 1;
            let e = ElementError { param: name.clone(), index: i, analytic: g[i], numeric, rel_err };
            if rel_err > max_rel_err || worst.is_none() {
                max_rel_err = max_rel_err.max(rel_err);
                worst = Some(e.clone());
            }
            if rel_err > cfg.tolerance {
                failures.push(e);
            }
        }
        model.params_mut().set_data(id, base)?;
    }
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        n_params: ids.len(),
        n_elements,
        loss: loss.item(),
        max_rel_err,
        worst,
        passed: failures.is_empty(),
        failures,
        zero_grad_params,
        seconds: started.elapsed().as_secs_f64(),
    })
}
