//! Transformer backbone used inside each coupling layer.
//!
//! Tokens are embedded by a linear projection, learned position embeddings
//! are added, then `depth` pre-norm blocks run (attention and a GELU MLP,
//! each wrapped in a residual). A final layer norm and a linear head produce
//! the raw scale and bias fields. There is no patch embedding, class token
//! or pooling.
//!
//! The head starts at exactly zero, so a fresh backbone maps every input to
//! zeros.

use serde::{Deserialize, Serialize};

use crate::error::{JetError, Result};
use crate::numerics::{
    Float, ParamId, ParamStore, PrecisionMode, Tape, Tensor, Var, LAYER_NORM_EPS,
};
use crate::rng;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub tokens: usize,
    pub in_width: usize,
    pub out_width: usize,
    pub mlp_ratio: usize,
    /// Precision of the backbone's own products.
    pub precision: PrecisionMode,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(JetError::config(format!(
                "backbone extents must be positive: {self:?}"
            )));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(JetError::config(format!(
                "backbone width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.tokens == 0 || self.in_width == 0 || self.out_width == 0 {
            return Err(JetError::config(format!(
                "backbone io extents must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Closed-form number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let (w, h) = (self.width, self.width * self.mlp_ratio);
        let embed = self.in_width * w + w + self.tokens * w;
        let block = 2 * w + (3 * w * w + 3 * w) + (w * w + w) + 2 * w + (w * h + h) + (h * w + w);
        embed + self.depth * block + 2 * w + w * self.out_width + self.out_width
    }
}

/// Architecture shared by every backbone of a model; tokens and io widths
/// are filled in per coupling layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTTemplate {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub precision: PrecisionMode,
}

fn default_mlp_ratio() -> usize {
    4
}

impl ViTTemplate {
    pub fn new(depth: usize, width: usize, heads: usize) -> Self {
        ViTTemplate {
            depth,
            width,
            heads,
            mlp_ratio: 4,
            precision: PrecisionMode::Fast,
        }
    }

    pub fn instantiate(&self, tokens: usize, in_width: usize, out_width: usize) -> ViTConfig {
        ViTConfig {
            depth: self.depth,
            width: self.width,
            heads: self.heads,
            tokens,
            in_width,
            out_width,
            mlp_ratio: self.mlp_ratio,
            precision: self.precision,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

/// Handles to one backbone's parameters inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ViTParams {
    cfg: ViTConfig,
    embed_w: ParamId,
    embed_b: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm_gain: ParamId,
    norm_bias: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Register a freshly initialized backbone in `store`, naming every tensor
/// under `prefix`.
///
/// Weights are truncated normal (std 0.02), position embeddings normal
/// (std 0.02), biases zero, norm gains one, and the head all zero.
pub fn init_vit<F: Float>(
    cfg: ViTConfig,
    seed: u64,
    store: &mut ParamStore<F>,
    prefix: &str,
) -> Result<ViTParams> {
    cfg.validate()?;
    let mut rng = rng::rng_for(seed, &[rng::stream::VIT_INIT]);
    let w = cfg.width;
    let hidden = w * cfg.mlp_ratio;
    let mut weight = |store: &mut ParamStore<F>, name: String, fan_in: usize, fan_out: usize| {
        store.add(
            name,
            rng::truncated_normal_tensor(&mut rng, &[fan_in, fan_out], INIT_STD),
        )
    };
    let embed_w = weight(store, format!("{prefix}.embed.w"), cfg.in_width, w);
    let mut blocks_w = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let qkv_w = weight(store, format!("{prefix}.block{i}.attn.qkv.w"), w, 3 * w);
        let proj_w = weight(store, format!("{prefix}.block{i}.attn.proj.w"), w, w);
        let fc1_w = weight(store, format!("{prefix}.block{i}.mlp.fc1.w"), w, hidden);
        let fc2_w = weight(store, format!("{prefix}.block{i}.mlp.fc2.w"), hidden, w);
        blocks_w.push((qkv_w, proj_w, fc1_w, fc2_w));
    }
    let pos = store.add(
        format!("{prefix}.pos"),
        rng::normal_tensor(&mut rng, &[cfg.tokens, w], INIT_STD),
    );

    let zeros = |n: usize| Tensor::<F>::zeros(&[n]);
    let ones = |n: usize| Tensor::<F>::full(&[n], F::one());
    let embed_b = store.add(format!("{prefix}.embed.b"), zeros(w));
    let blocks = blocks_w
        .into_iter()
        .enumerate()
        .map(|(i, (qkv_w, proj_w, fc1_w, fc2_w))| Block {
            ln1_gain: store.add(format!("{prefix}.block{i}.ln1.gain"), ones(w)),
            ln1_bias: store.add(format!("{prefix}.block{i}.ln1.bias"), zeros(w)),
            qkv_w,
            qkv_b: store.add(format!("{prefix}.block{i}.attn.qkv.b"), zeros(3 * w)),
            proj_w,
            proj_b: store.add(format!("{prefix}.block{i}.attn.proj.b"), zeros(w)),
            ln2_gain: store.add(format!("{prefix}.block{i}.ln2.gain"), ones(w)),
            ln2_bias: store.add(format!("{prefix}.block{i}.ln2.bias"), zeros(w)),
            fc1_w,
            fc1_b: store.add(format!("{prefix}.block{i}.mlp.fc1.b"), zeros(hidden)),
            fc2_w,
            fc2_b: store.add(format!("{prefix}.block{i}.mlp.fc2.b"), zeros(w)),
        })
        .collect();
    let norm_gain = store.add(format!("{prefix}.norm.gain"), ones(w));
    let norm_bias = store.add(format!("{prefix}.norm.bias"), zeros(w));
    let head_w = store.add(
        format!("{prefix}.head.w"),
        Tensor::zeros(&[w, cfg.out_width]),
    );
    let head_b = store.add(format!("{prefix}.head.b"), zeros(cfg.out_width));
    Ok(ViTParams {
        cfg,
        embed_w,
        embed_b,
        pos,
        blocks,
        norm_gain,
        norm_bias,
        head_w,
        head_b,
    })
}

impl ViTParams {
    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    pub fn position_ids(&self) -> ParamId {
        self.pos
    }

    /// Every parameter handle, in registration-independent structural order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed_w, self.embed_b, self.pos];
        for b in &self.blocks {
            ids.extend([
                b.ln1_gain, b.ln1_bias, b.qkv_w, b.qkv_b, b.proj_w, b.proj_b, b.ln2_gain,
                b.ln2_bias, b.fc1_w, b.fc1_b, b.fc2_w, b.fc2_b,
            ]);
        }
        ids.extend([self.norm_gain, self.norm_bias, self.head_w, self.head_b]);
        ids
    }

    /// A weight in the middle of the network, handy for gradient checks.
    pub fn first_mlp_weight(&self) -> ParamId {
        self.blocks[0].fc1_w
    }

    /// `[B, T, in_width] -> [B, T, out_width]`.
    pub fn forward<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        x: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let cfg = &self.cfg;
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != cfg.tokens || shape[2] != cfg.in_width {
            return Err(JetError::shape(
                "vit_forward",
                format!(
                    "expected [B, {}, {}], got {shape:?}",
                    cfg.tokens, cfg.in_width
                ),
            ));
        }
        let mode = cfg.precision;
        let eps = F::of(LAYER_NORM_EPS);
        let p = |id: ParamId| tape.param(store, id);
        let linear = |h: Var<'t, F>, w: ParamId, b: ParamId| -> Result<Var<'t, F>> {
            h.matmul(p(w), mode)?.add_broadcast(p(b))
        };

        let mut h = linear(x, self.embed_w, self.embed_b)?.add_broadcast(p(self.pos))?;
        for b in &self.blocks {
            let a = h.layer_norm(p(b.ln1_gain), p(b.ln1_bias), eps)?;
            let a = linear(a, b.qkv_w, b.qkv_b)?.attention(cfg.heads)?;
            h = h.add(linear(a, b.proj_w, b.proj_b)?)?;
            let m = h.layer_norm(p(b.ln2_gain), p(b.ln2_bias), eps)?;
            let m = linear(linear(m, b.fc1_w, b.fc1_b)?.gelu(), b.fc2_w, b.fc2_b)?;
            h = h.add(m)?;
        }
        let h = h.layer_norm(p(self.norm_gain), p(self.norm_bias), eps)?;
        linear(h, self.head_w, self.head_b)
    }
}

/// Run a backbone on a plain tensor without keeping the tape.
pub fn vit_forward<F: Float>(
    params: &ViTParams,
    store: &ParamStore<F>,
    tokens: &Tensor<F>,
) -> Result<Tensor<F>> {
    let tape = Tape::new();
    let x = tape.constant(tokens.clone());
    let out = params.forward(&tape, store, x)?;
    tape.check_finite()?;
    Ok((*out.value()).clone())
}
