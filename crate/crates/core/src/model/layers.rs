//! Parameterised building blocks. Each layer only stores parameter ids; the
//! values live in the model's `ParamStore` so checkpoints and optimisers see
//! one flat registry.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{ParamId, ParamStore};
use crate::error::Result;
use crate::rng::Prng;
use crate::Tensor;

/// Additive logit used for masked attention keys. `exp` of it underflows to
/// exactly zero, so masked keys have no influence at all.
pub const MASKED_LOGIT: f64 = -1e9;

pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore<f64>,
    pub rng: Prng,
    pub gain: f64,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        self.store.add(name, data, shape, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.store.add(name, vec![value; n], shape, true)
    }
}

/// Inverted dropout. Disabled when no generator is attached or the rate is 0.
pub struct Dropout {
    rate: f64,
    rng: Option<Prng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: Prng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        let Some(rng) = self.rng.as_mut().filter(|_| self.rate > 0.0) else {
            return Ok(x.clone());
        };
        let keep = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        x.mul(&Tensor::from_vec(mask, x.shape())?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub(crate) fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let std = init.gain / (fan_in as f64).sqrt();
        Ok(Self {
            w: init.normal(&format!("{name}.w"), &[fan_in, fan_out], std)?,
            b: Some(init.constant(&format!("{name}.b"), &[fan_out], 0.0)?),
        })
    }

    /// A bias-free projection, for outputs that feed a softmax over rows
    /// where a shared offset would cancel.
    pub(crate) fn without_bias(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let std = init.gain / (fan_in as f64).sqrt();
        Ok(Self { w: init.normal(&format!("{name}.w"), &[fan_in, fan_out], std)?, b: None })
    }

    pub fn forward(&self, p: &ParamStore<f64>, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(p.get(self.w))?;
        match self.b {
            Some(b) => y.add_row(p.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub(crate) fn new(init: &mut Init, name: &str, width: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gain: init.constant(&format!("{name}.gain"), &[width], 1.0)?,
            bias: init.constant(&format!("{name}.bias"), &[width], 0.0)?,
            eps,
        })
    }

    pub fn forward(&self, p: &ParamStore<f64>, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(p.get(self.gain), p.get(self.bias), self.eps)
    }
}

/// Multi-head scaled dot-product attention.
///
/// The key projection has no bias: it would add the same constant to every
/// logit of a query row, which softmax ignores.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: ParamId,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

/// Softmax weights of one attention call, flattened as `[head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMap {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub weights: Vec<f64>,
}

impl Attention {
    pub(crate) fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Result<Self> {
        let std = init.gain / (d as f64).sqrt();
        Ok(Self {
            wq: Linear::new(init, &format!("{name}.q"), d, d)?,
            wk: init.normal(&format!("{name}.k.w"), &[d, d], std)?,
            wv: Linear::new(init, &format!("{name}.v"), d, d)?,
            wo: Linear::new(init, &format!("{name}.o"), d, d)?,
            heads,
        })
    }

    /// `query` is `[n×d]`, `context` is `[m×d]`; `mask` is an additive `[n×m]`
    /// constant. Returns the `[n×d]` output and the attention weights.
    pub fn forward(
        &self,
        p: &ParamStore<f64>,
        query: &Tensor,
        context: &Tensor,
        mask: Option<&Tensor>,
        drop: &mut Dropout,
    ) -> Result<(Tensor, AttnMap)> {
        let q = self.wq.forward(p, query)?;
        let k = context.matmul(p.get(self.wk))?;
        let v = self.wv.forward(p, context)?;
        let d = q.cols();
        let hd = d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (n, m) = (query.rows(), context.rows());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads * n * m);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * hd, hd)?;
            let kh = k.slice_cols(h * hd, hd)?;
            let vh = v.slice_cols(h * hd, hd)?;
            let mut logits = qh.matmul_nt(&kh)?.scale(scale);
            if let Some(mask) = mask {
                logits = logits.add(mask)?;
            }
            let a = logits.softmax_last();
            weights.extend_from_slice(a.data());
            let a = drop.apply(&a)?;
            outs.push(a.matmul(&vh)?);
        }
        let merged = if outs.len() == 1 { outs.pop().expect("one head") } else { Tensor::concat_cols(&outs)? };
        let out = self.wo.forward(p, &merged)?;
        Ok((out, AttnMap { heads: self.heads, queries: n, keys: m, weights }))
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub(crate) fn new(init: &mut Init, name: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(init, &format!("{name}.fc1"), d, hidden)?,
            l2: Linear::new(init, &format!("{name}.fc2"), hidden, d)?,
        })
    }

    pub fn forward(&self, p: &ParamStore<f64>, x: &Tensor, drop: &mut Dropout) -> Result<Tensor> {
        let h = self.l1.forward(p, x)?.gelu();
        let h = drop.apply(&h)?;
        self.l2.forward(p, &h)
    }
}

/// Additive mask hiding the given key columns from every query row.
pub fn key_mask(queries: usize, hidden_keys: &[bool]) -> Result<Option<Tensor>> {
    if !hidden_keys.iter().any(|h| *h) {
        return Ok(None);
    }
    let row: Vec<f64> = hidden_keys.iter().map(|h| if *h { MASKED_LOGIT } else { 0.0 }).collect();
    let data = (0..queries).flat_map(|_| row.iter().copied()).collect();
    Ok(Some(Tensor::from_vec(data, &[queries, hidden_keys.len()])?))
}
