//! Small GPT-style decoder with maskable weight matrices.
//!
//! Blocks are pre-norm: `x + attn(ln(x))`, `x + mlp(ln(x))`, no biases, no
//! dropout, learned absolute position embeddings, GELU MLP of width `4·E`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::AttentionPattern;
use crate::rng::Rng;
use crate::tensor::{Moments, Scalar, Tape, Tensor, TensorError, Var};
use crate::topology::{er_allocate, init_masks, LayerMask, LayerView, TopologyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds block size {block}")]
    TooLong { len: usize, block: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("attention pattern covers {pattern} positions, sequence needs {needed}")]
    PatternLength { pattern: usize, needed: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_embd: usize,
    pub block_size: usize,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
    /// Whether the output head (the shared table when tied) is maskable.
    pub mask_lm_head: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let c = self;
        if c.n_layers == 0 || c.n_heads == 0 || c.n_embd == 0 || c.block_size == 0 || c.vocab_size == 0 {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if !c.n_embd.is_multiple_of(c.n_heads) {
            return Err(ModelError::Config(format!("n_embd {} not divisible by n_heads {}", c.n_embd, c.n_heads)));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let e = self.n_embd;
        let v = self.vocab_size;
        let per_block = 2 * e + 4 * e * e + 8 * e * e;
        let head = if self.tie_embeddings { 0 } else { v * e };
        v * e + self.block_size * e + self.n_layers * per_block + e + head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    TokenEmbedding,
    PositionEmbedding,
    Gain,
    Query,
    Key,
    Value,
    Projection,
    Ffw1,
    Ffw2,
    LmHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
    pub decay: bool,
    /// Index into [`ModelState::masks`].
    pub mask: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    ln1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2: usize,
    ffw1: usize,
    ffw2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    wte: usize,
    wpe: usize,
    blocks: Vec<BlockIdx>,
    ln_f: usize,
    lm: usize,
}

/// Parameters, masks and optimizer moments of a model.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
    pub masks: Vec<LayerMask>,
    pub moments: Vec<Moments<T>>,
    layout: Layout,
}

impl<T: Scalar> ModelState<T> {
    /// Random init (`N(0, 0.02)`, residual projections scaled by
    /// `1/√(2·layers)`, unit gains) with masks drawn at global sparsity
    /// `initial_sparsity`.
    pub fn new(config: ModelConfig, initial_sparsity: f64, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let e = config.n_embd;
        let v = config.vocab_size;
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut params: Vec<Param<T>> = Vec::new();
        let mut push = |name: String, role: ParamRole, rows: usize, cols: usize, init: Init, decay: bool| {
            let data = match init {
                Init::Normal(s) => (0..rows * cols).map(|_| T::from_f64_lossy(rng.normal(0.0, s))).collect(),
                Init::Ones => vec![T::one(); rows * cols],
            };
            params.push(Param { name, role, rows, cols, data, decay, mask: None });
            params.len() - 1
        };
        let wte = push("wte".into(), ParamRole::TokenEmbedding, v, e, Init::Normal(std), true);
        let wpe = push("wpe".into(), ParamRole::PositionEmbedding, config.block_size, e, Init::Normal(std), true);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for b in 0..config.n_layers {
            let p = |s: &str| format!("h{b}.{s}");
            blocks.push(BlockIdx {
                ln1: push(p("ln1"), ParamRole::Gain, 1, e, Init::Ones, false),
                wq: push(p("wq"), ParamRole::Query, e, e, Init::Normal(std), true),
                wk: push(p("wk"), ParamRole::Key, e, e, Init::Normal(std), true),
                wv: push(p("wv"), ParamRole::Value, e, e, Init::Normal(std), true),
                wo: push(p("proj"), ParamRole::Projection, e, e, Init::Normal(resid_std), true),
                ln2: push(p("ln2"), ParamRole::Gain, 1, e, Init::Ones, false),
                ffw1: push(p("ffw1"), ParamRole::Ffw1, e, 4 * e, Init::Normal(std), true),
                ffw2: push(p("ffw2"), ParamRole::Ffw2, 4 * e, e, Init::Normal(resid_std), true),
            });
        }
        let ln_f = push("ln_f".into(), ParamRole::Gain, 1, e, Init::Ones, false);
        let lm = if config.tie_embeddings {
            wte
        } else {
            push("lm_head".into(), ParamRole::LmHead, v, e, Init::Normal(std), true)
        };
        let layout = Layout { wte, wpe, blocks, ln_f, lm };

        let mut maskable: Vec<usize> =
            layout.blocks.iter().flat_map(|b| [b.wq, b.wk, b.wv, b.wo, b.ffw1, b.ffw2]).collect();
        if config.mask_lm_head {
            maskable.push(layout.lm);
        }
        let shapes: Vec<(usize, usize)> = maskable.iter().map(|&i| (params[i].rows, params[i].cols)).collect();
        let alloc = er_allocate(initial_sparsity, &shapes)?;
        let masks = init_masks(&alloc, rng);
        for (m, &pi) in maskable.iter().enumerate() {
            params[pi].mask = Some(m);
            masks[m].apply(&mut params[pi].data);
        }
        let moments = params.iter().map(|p| Moments::zeros(p.data.len())).collect();
        Ok(ModelState { config, params, masks, moments, layout })
    }

    /// Rebuilds a state from stored parts (checkpoint restore).
    pub fn from_parts(
        config: ModelConfig,
        datas: Vec<Vec<T>>,
        masks: Vec<LayerMask>,
        moments: Vec<Moments<T>>,
    ) -> Result<Self, ModelError> {
        let mut rng = Rng::new(0);
        let mut state = ModelState::new(config, 0.0, &mut rng)?;
        if datas.len() != state.params.len() || moments.len() != state.params.len() || masks.len() != state.masks.len()
        {
            return Err(ModelError::Config("stored tensors do not match the model layout".into()));
        }
        for ((p, d), m) in state.params.iter_mut().zip(datas).zip(&moments) {
            if d.len() != p.data.len() || m.m.len() != p.data.len() || m.v.len() != p.data.len() {
                return Err(ModelError::Config(format!("stored tensor `{}` has the wrong size", p.name)));
            }
            p.data = d;
        }
        for (old, new) in state.masks.iter().zip(&masks) {
            if (old.rows(), old.cols()) != (new.rows(), new.cols()) {
                return Err(ModelError::Config("stored mask shape mismatch".into()));
            }
        }
        state.masks = masks;
        state.moments = moments;
        Ok(state)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Indices of the maskable parameters in mask order.
    pub fn maskable_params(&self) -> Vec<usize> {
        let mut out = vec![0; self.masks.len()];
        for (i, p) in self.params.iter().enumerate() {
            if let Some(m) = p.mask {
                out[m] = i;
            }
        }
        out
    }

    pub fn mask_for(&self, param: usize) -> Option<&LayerMask> {
        self.params[param].mask.map(|m| &self.masks[m])
    }

    pub fn param_by_name(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Zeroes every masked-out weight. Holds as an invariant after each
    /// optimizer and topology step; exposed for tests and restores.
    pub fn enforce_masks(&mut self) {
        for p in &mut self.params {
            if let Some(m) = p.mask {
                self.masks[m].apply(&mut p.data);
            }
        }
    }

    /// Global sparsity over maskable layers.
    pub fn global_sparsity(&self) -> f64 {
        crate::topology::global_sparsity(&self.masks)
    }

    /// Per-mask views for a topology update, with dense gradients `grads`
    /// indexed like `params`.
    pub fn layer_views<'a>(&'a mut self, grads: &'a [Vec<T>]) -> Vec<LayerView<'a, T>> {
        let mut slots: Vec<Option<LayerView<'a, T>>> = (0..self.masks.len()).map(|_| None).collect();
        let mut masks: Vec<Option<&'a mut LayerMask>> = self.masks.iter_mut().map(Some).collect();
        for ((p, mom), g) in self.params.iter_mut().zip(self.moments.iter_mut()).zip(grads) {
            if let Some(m) = p.mask {
                let mask = masks[m].take().expect("each mask owned by one parameter");
                slots[m] = Some(LayerView { weights: &mut p.data, grads: g, moments: mom, mask });
            }
        }
        slots.into_iter().map(|s| s.expect("every mask has a parameter")).collect()
    }

    fn check_inputs(&self, tokens: &[usize], batch: usize, pattern: &AttentionPattern) -> Result<usize, ModelError> {
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(ModelError::Config(format!("{} tokens cannot form {batch} sequences", tokens.len())));
        }
        let seq = tokens.len() / batch;
        if seq > self.config.block_size {
            return Err(ModelError::TooLong { len: seq, block: self.config.block_size });
        }
        if pattern.n < seq {
            return Err(ModelError::PatternLength { pattern: pattern.n, needed: seq });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::Token { id, vocab: self.config.vocab_size });
        }
        Ok(seq)
    }

    /// Records the forward pass on `tape`; returns the parameter leaves and
    /// the `(batch·seq)×vocab` logits.
    pub fn record_forward(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        batch: usize,
        pattern: &AttentionPattern,
        requires_grad: bool,
    ) -> Result<(Vec<Var>, Var), ModelError> {
        let seq = self.check_inputs(tokens, batch, pattern)?;
        let leaves: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let t = Tensor::new([p.rows, p.cols], p.data.clone()).expect("param shape");
                tape.leaf(t, requires_grad)
            })
            .collect();
        let lay = &self.layout;
        let allowed = pattern.to_mask(seq);
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();

        let tok = tape.gather(leaves[lay.wte], tokens, self.mask_for(lay.wte))?;
        let pos = tape.gather(leaves[lay.wpe], &positions, None)?;
        let mut x = tape.add(tok, pos)?;
        for b in &lay.blocks {
            let mm = |tape: &mut Tape<T>, input: Var, idx: usize| -> Result<Var, TensorError> {
                match self.mask_for(idx) {
                    Some(mask) => tape.masked_matmul(input, leaves[idx], mask),
                    None => tape.matmul(input, leaves[idx]),
                }
            };
            let h = tape.layernorm(x, leaves[b.ln1])?;
            let q = mm(tape, h, b.wq)?;
            let k = mm(tape, h, b.wk)?;
            let v = mm(tape, h, b.wv)?;
            let a = tape.attention(q, k, v, batch, self.config.n_heads, &allowed)?;
            let o = mm(tape, a, b.wo)?;
            x = tape.add(x, o)?;
            let h = tape.layernorm(x, leaves[b.ln2])?;
            let f = mm(tape, h, b.ffw1)?;
            let f = tape.gelu(f);
            let f = mm(tape, f, b.ffw2)?;
            x = tape.add(x, f)?;
        }
        let x = tape.layernorm(x, leaves[lay.ln_f])?;
        let logits = tape.masked_matmul_t(x, leaves[lay.lm], self.mask_for(lay.lm))?;
        Ok((leaves, logits))
    }

    /// Logits for `batch` sequences packed in `tokens`.
    pub fn forward(&self, tokens: &[usize], batch: usize, pattern: &AttentionPattern) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let (_, logits) = self.record_forward(&mut tape, tokens, batch, pattern, false)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean next-token loss without gradients.
    pub fn loss(
        &self,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        pattern: &AttentionPattern,
    ) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let (_, logits) = self.record_forward(&mut tape, inputs, batch, pattern, false)?;
        let loss = tape.cross_entropy(logits, targets)?;
        Ok(tape.value(loss).data()[0].to_f64_lossy())
    }

    /// Loss and dense gradients for every parameter (indexed like `params`).
    pub fn loss_and_grad(
        &self,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        pattern: &AttentionPattern,
    ) -> Result<(f64, Vec<Vec<T>>), ModelError> {
        let mut tape = Tape::new();
        let (leaves, logits) = self.record_forward(&mut tape, inputs, batch, pattern, true)?;
        let loss = tape.cross_entropy(logits, targets)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(TensorError::NonFinite { what: "loss".into() }.into());
        }
        tape.backward(loss)?;
        let grads = leaves
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| vec![T::zero(); p.data.len()]))
            .collect();
        Ok((value.to_f64_lossy(), grads))
    }
}

enum Init {
    Normal(f64),
    Ones,
}
