//! The navigation agent: language encoder, candidate encoder, cross-modal
//! encoder over `[memory; vision]`, action and value heads, and the memory
//! bank fed by the agent's own output activations.

mod config;
mod layers;
mod rollout;
#[cfg(test)]
mod tests;

use rand::Rng;
use serde::Serialize;

use crate::autograd::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::{stream, Prng, Purpose};
use crate::world::{Instruction, Observation, MASK, PAD};
use crate::Tensor;

pub use config::{CrossAttn, MemoryCapacity, ModelConfig};
pub use layers::{key_mask, Attention, AttnMap, Dropout, FeedForward, LayerNorm, Linear, MASKED_LOGIT};
pub use rollout::{run_episode, run_episode_with, EpisodeTrace, Policy, RolloutOptions, StepGraph, TraceStep, DEFAULT_MAX_STEPS};

use layers::Init;

/// `[sin θ, cos θ, sin φ, cos φ]` repeated `d_dir / 4` times.
pub fn directional_feature(theta: f64, phi: f64, d_dir: usize) -> Vec<f64> {
    assert!(d_dir % 4 == 0, "d_dir must be a multiple of 4");
    let unit = [theta.sin(), theta.cos(), phi.sin(), phi.cos()];
    unit.iter().copied().cycle().take(d_dir).collect()
}

/// Encoded instruction plus the key mask derived from its `[PAD]` positions.
#[derive(Clone)]
pub struct LangEncoding {
    pub x: Tensor,
    pub pad: Vec<bool>,
    /// Positions holding `[MASK]`.
    pub masked: Vec<bool>,
}

/// Past-step tokens, oldest first.
#[derive(Clone)]
pub struct MemoryBank {
    capacity: MemoryCapacity,
    tokens: Vec<Tensor>,
    appended: usize,
}

impl MemoryBank {
    pub fn new(capacity: MemoryCapacity) -> Self {
        Self { capacity, tokens: Vec::new(), appended: 0 }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn capacity(&self) -> MemoryCapacity {
        self.capacity
    }

    /// Number of tokens ever appended, including evicted ones.
    pub fn appended(&self) -> usize {
        self.appended
    }

    pub fn tokens(&self) -> &[Tensor] {
        &self.tokens
    }

    pub fn push(&mut self, token: Tensor) {
        self.tokens.push(token);
        self.appended += 1;
        if let Some(n) = self.capacity.limit() {
            if self.tokens.len() > n {
                let excess = self.tokens.len() - n;
                self.tokens.drain(..excess);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossAttnRecord {
    pub layer: usize,
    /// Language queries over `[memory; vision]` keys; absent in single mode.
    pub lang_to_vision: Option<AttnMap>,
    /// `[memory; vision]` queries over language keys.
    pub vision_to_lang: AttnMap,
}

impl Serialize for AttnMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let per = self.queries * self.keys;
        let heads: Vec<Vec<&[f64]>> = (0..self.heads)
            .map(|h| self.weights[h * per..(h + 1) * per].chunks(self.keys.max(1)).collect())
            .collect();
        let mut st = s.serialize_struct("AttnMap", 3)?;
        st.serialize_field("queries", &self.queries)?;
        st.serialize_field("keys", &self.keys)?;
        st.serialize_field("heads", &heads)?;
        st.end()
    }
}

/// Outputs of one cross-modal forward pass.
#[derive(Clone)]
pub struct StepOutput {
    pub x_hat: Tensor,
    pub m_hat: Tensor,
    pub v_hat: Tensor,
    /// `[K]`
    pub logits: Tensor,
    pub probs: Vec<f64>,
    /// Scalar state value.
    pub value: Tensor,
    pub attn: Vec<CrossAttnRecord>,
}

impl StepOutput {
    /// `[X̂; M̂; V̂]` stacked by rows.
    pub fn all_tokens(&self) -> Result<Tensor> {
        let parts: Vec<Tensor> =
            [&self.x_hat, &self.m_hat, &self.v_hat].into_iter().filter(|t| t.rows() > 0).cloned().collect();
        Tensor::concat_rows(&parts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Greedy,
    Sample,
}

/// Argmax with lowest-index tie-break, or a categorical draw.
pub fn predict_action(probs: &[f64], mode: ActionMode, rng: &mut Prng) -> usize {
    match mode {
        ActionMode::Greedy => {
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            best
        }
        ActionMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            // rounding left the cumulative sum just below 1
            probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
        }
    }
}

struct TransformerBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl TransformerBlock {
    fn new(init: &mut Init, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), cfg.d_model, cfg.ln_eps)?,
            attn: Attention::new(init, &format!("{name}.attn"), cfg.d_model, cfg.n_heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), cfg.d_model, cfg.ln_eps)?,
            ffn: FeedForward::new(init, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff)?,
        })
    }

    fn self_attend(&self, p: &ParamStore<f64>, x: &Tensor, mask: Option<&Tensor>, drop: &mut Dropout) -> Result<Tensor> {
        let h = self.ln1.forward(p, x)?;
        let (a, _) = self.attn.forward(p, &h, &h, mask, drop)?;
        x.add(&drop.apply(&a)?)
    }

    fn feed_forward(&self, p: &ParamStore<f64>, x: &Tensor, drop: &mut Dropout) -> Result<Tensor> {
        let h = self.ln2.forward(p, x)?;
        let f = self.ffn.forward(p, &h, drop)?;
        x.add(&drop.apply(&f)?)
    }
}

struct CrossLayer {
    lang: TransformerBlock,
    vis: TransformerBlock,
    ln_lang_q: LayerNorm,
    ln_vis_q: LayerNorm,
    lang_from_vis: Option<Attention>,
    vis_from_lang: Attention,
}

struct Modules {
    tok_emb: ParamId,
    pos_emb: ParamId,
    lang_blocks: Vec<TransformerBlock>,
    lang_ln: LayerNorm,
    vis_proj: Linear,
    vis_ln: LayerNorm,
    mem_proj: Linear,
    cross: Vec<CrossLayer>,
    out_lang_ln: LayerNorm,
    out_vis_ln: LayerNorm,
    action_hidden: Linear,
    action_out: Linear,
    value_hidden: Linear,
    value_out: Linear,
}

pub struct Mtvm {
    cfg: ModelConfig,
    params: ParamStore<f64>,
    m: Modules,
}

impl Mtvm {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init { store: &mut params, rng: stream(seed, Purpose::Init, 0, 0), gain: cfg.init_gain };
        let d = cfg.d_model;
        let tok_emb = init.normal("lang.tok_emb", &[cfg.vocab_size, d], 1.0)?;
        let pos_emb = init.normal("lang.pos_emb", &[cfg.l_max, d], 0.5)?;
        let lang_blocks = (0..cfg.lang_layers)
            .map(|i| TransformerBlock::new(&mut init, &format!("lang.layer{i}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let lang_ln = LayerNorm::new(&mut init, "lang.ln_out", d, cfg.ln_eps)?;
        let vis_proj = Linear::new(&mut init, "vision.proj", cfg.d_v + cfg.d_dir, d)?;
        let vis_ln = LayerNorm::new(&mut init, "vision.ln", d, cfg.ln_eps)?;
        let mem_proj = Linear::new(&mut init, "memory.proj", d + cfg.d_dir, d)?;
        let mut cross = Vec::with_capacity(cfg.cross_layers);
        for i in 0..cfg.cross_layers {
            let name = format!("cross.layer{i}");
            cross.push(CrossLayer {
                lang: TransformerBlock::new(&mut init, &format!("{name}.lang"), &cfg)?,
                vis: TransformerBlock::new(&mut init, &format!("{name}.vis"), &cfg)?,
                ln_lang_q: LayerNorm::new(&mut init, &format!("{name}.ln_lang_x"), d, cfg.ln_eps)?,
                ln_vis_q: LayerNorm::new(&mut init, &format!("{name}.ln_vis_x"), d, cfg.ln_eps)?,
                lang_from_vis: match cfg.cross_attn {
                    CrossAttn::Bidirectional => {
                        Some(Attention::new(&mut init, &format!("{name}.lang_from_vis"), d, cfg.n_heads)?)
                    }
                    CrossAttn::Single => None,
                },
                vis_from_lang: Attention::new(&mut init, &format!("{name}.vis_from_lang"), d, cfg.n_heads)?,
            });
        }
        let m = Modules {
            tok_emb,
            pos_emb,
            lang_blocks,
            lang_ln,
            vis_proj,
            vis_ln,
            mem_proj,
            cross,
            out_lang_ln: LayerNorm::new(&mut init, "cross.ln_out_lang", d, cfg.ln_eps)?,
            out_vis_ln: LayerNorm::new(&mut init, "cross.ln_out_vis", d, cfg.ln_eps)?,
            action_hidden: Linear::new(&mut init, "head.action.fc1", d, d)?,
            action_out: Linear::without_bias(&mut init, "head.action.fc2", d, 1)?,
            value_hidden: Linear::new(&mut init, "head.value.fc1", d, d)?,
            value_out: Linear::new(&mut init, "head.value.fc2", d, 1)?,
        };
        Ok(Self { cfg, params, m })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }

    pub fn new_memory(&self) -> MemoryBank {
        MemoryBank::new(self.cfg.memory_capacity)
    }

    fn dropout(&self, rng: Option<Prng>) -> Dropout {
        match rng {
            Some(r) if self.cfg.dropout_rate > 0.0 => Dropout::new(self.cfg.dropout_rate, r),
            _ => Dropout::off(),
        }
    }

    pub fn encode_language(&self, instruction: &Instruction) -> Result<LangEncoding> {
        self.encode_language_with(instruction, &mut Dropout::off())
    }

    pub fn encode_language_with(&self, instruction: &Instruction, drop: &mut Dropout) -> Result<LangEncoding> {
        let n = instruction.len();
        if n == 0 {
            return Err(Error::Input("empty instruction".into()));
        }
        if n > self.cfg.l_max {
            return Err(Error::Input(format!("instruction of {n} tokens exceeds l_max {}", self.cfg.l_max)));
        }
        let ids = instruction.ids();
        if let Some(bad) = ids.iter().find(|i| **i >= self.cfg.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocab_size {}", self.cfg.vocab_size)));
        }
        let p = &self.params;
        let positions: Vec<usize> = (0..n).collect();
        let mut x = Tensor::embedding(p.get(self.m.tok_emb), &ids)?
            .add(&Tensor::embedding(p.get(self.m.pos_emb), &positions)?)?;
        x = drop.apply(&x)?;
        let pad: Vec<bool> = instruction.tokens.iter().map(|t| *t == PAD).collect();
        let mask = key_mask(n, &pad)?;
        for block in &self.m.lang_blocks {
            x = block.self_attend(p, &x, mask.as_ref(), drop)?;
            x = block.feed_forward(p, &x, drop)?;
        }
        let masked = instruction.tokens.iter().map(|t| *t == MASK).collect();
        Ok(LangEncoding { x: self.m.lang_ln.forward(p, &x)?, pad, masked })
    }

    /// Candidate features concatenated with their directional features,
    /// projected to `d_model` and normalised. One row per candidate.
    pub fn encode_vision(&self, obs: &Observation) -> Result<Tensor> {
        if obs.is_empty() {
            return Err(Error::Input("observation without candidates".into()));
        }
        let mut rows = Vec::with_capacity(obs.len());
        for c in &obs.candidates {
            if c.feature.len() != self.cfg.d_v {
                return Err(Error::shape(
                    "encode_vision",
                    format!("candidate feature of {} for d_v {}", c.feature.len(), self.cfg.d_v),
                ));
            }
            let mut row = c.feature.clone();
            row.extend(directional_feature(c.heading, c.elevation, self.cfg.d_dir));
            rows.push(row);
        }
        let input = Tensor::from_rows(&rows)?;
        let p = &self.params;
        self.m.vis_ln.forward(p, &self.m.vis_proj.forward(p, &input)?)
    }

    pub fn cross_modality_forward(&self, lang: &LangEncoding, memory: &MemoryBank, vision: &Tensor) -> Result<StepOutput> {
        self.cross_modality_forward_with(lang, memory, vision, &mut Dropout::off())
    }

    pub fn cross_modality_forward_with(
        &self,
        lang: &LangEncoding,
        memory: &MemoryBank,
        vision: &Tensor,
        drop: &mut Dropout,
    ) -> Result<StepOutput> {
        let d = self.cfg.d_model;
        if lang.x.cols() != d || vision.cols() != d {
            return Err(Error::shape(
                "cross_modality_forward",
                format!("language width {} and vision width {} for d_model {d}", lang.x.cols(), vision.cols()),
            ));
        }
        if lang.pad.len() != lang.x.rows() {
            return Err(Error::shape("cross_modality_forward", "pad mask length differs from language rows"));
        }
        let p = &self.params;
        let n_mem = memory.len();
        let k = vision.rows();
        let mut mv = if n_mem == 0 {
            vision.clone()
        } else {
            let raw = Tensor::concat_rows(memory.tokens())?;
            if raw.cols() != d + self.cfg.d_dir {
                return Err(Error::shape("cross_modality_forward", format!("memory tokens of width {}", raw.cols())));
            }
            Tensor::concat_rows(&[self.m.mem_proj.forward(p, &raw)?, vision.clone()])?
        };
        let mut l = lang.x.clone();
        let n_lang = l.rows();
        let lang_self_mask = key_mask(n_lang, &lang.pad)?;
        let vis_lang_mask = key_mask(mv.rows(), &lang.pad)?;
        let mut attn = Vec::with_capacity(self.m.cross.len());
        for (i, layer) in self.m.cross.iter().enumerate() {
            l = layer.lang.self_attend(p, &l, lang_self_mask.as_ref(), drop)?;
            mv = layer.vis.self_attend(p, &mv, None, drop)?;
            let lq = layer.ln_lang_q.forward(p, &l)?;
            let vq = layer.ln_vis_q.forward(p, &mv)?;
            let lang_to_vision = match &layer.lang_from_vis {
                Some(att) => {
                    let (a, w) = att.forward(p, &lq, &vq, None, drop)?;
                    l = l.add(&drop.apply(&a)?)?;
                    Some(w)
                }
                None => None,
            };
            let (a, vision_to_lang) = layer.vis_from_lang.forward(p, &vq, &lq, vis_lang_mask.as_ref(), drop)?;
            mv = mv.add(&drop.apply(&a)?)?;
            l = layer.lang.feed_forward(p, &l, drop)?;
            mv = layer.vis.feed_forward(p, &mv, drop)?;
            attn.push(CrossAttnRecord { layer: i, lang_to_vision, vision_to_lang });
        }
        let x_hat = self.m.out_lang_ln.forward(p, &l)?;
        let mv = self.m.out_vis_ln.forward(p, &mv)?;
        let m_hat = if n_mem == 0 { Tensor::zeros(&[0, d]) } else { mv.slice_rows(0, n_mem)? };
        let v_hat = if n_mem == 0 { mv.clone() } else { mv.slice_rows(n_mem, k)? };

        let h = self.m.action_hidden.forward(p, &v_hat)?.gelu();
        let logits = self.m.action_out.forward(p, &h)?.reshape(&[k])?;
        let probs = logits.softmax_last().to_vec();

        let pooled = Tensor::concat_rows(&[x_hat.clone(), mv])?.mean_rows()?;
        let hv = self.m.value_hidden.forward(p, &pooled)?.gelu();
        let value = self.m.value_out.forward(p, &hv)?.reshape(&[])?;
        Ok(StepOutput { x_hat, m_hat, v_hat, logits, probs, value, attn })
    }

    /// The token appended to memory after choosing candidate `k`.
    pub fn memory_token(&self, out: &StepOutput, k: usize, theta: f64, phi: f64) -> Result<Tensor> {
        if k >= out.v_hat.rows() {
            return Err(Error::Input(format!("candidate {k} of {}", out.v_hat.rows())));
        }
        let row = out.v_hat.slice_rows(k, 1)?;
        let row = if self.cfg.memory_backprop { row } else { row.detach() };
        let dir = Tensor::from_vec(directional_feature(theta, phi, self.cfg.d_dir), &[1, self.cfg.d_dir])?;
        Tensor::concat_cols(&[row, dir])
    }

    pub fn update_memory(&self, memory: &mut MemoryBank, out: &StepOutput, k: usize, theta: f64, phi: f64) -> Result<()> {
        memory.push(self.memory_token(out, k, theta, phi)?);
        Ok(())
    }

    pub(crate) fn dropout_for(&self, seed: Option<u64>) -> Dropout {
        self.dropout(seed.map(|s| stream(s, Purpose::Rollout, 0xd409, 0)))
    }
}
