//! Encoder-only language model: token and position embeddings followed by
//! post-layer-norm transformer blocks.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{self, Attended};
use crate::params::{Init, ParamStore};
use crate::tensor::{Element, Result, TensorError};
use crate::text::TokenizedText;

/// Standard deviation of the LM weight initializer.
pub const LM_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LMConfig {
    /// Hidden width `d_LM`.
    pub d_model: usize,
    pub n_heads: usize,
    /// Inner width of the feed-forward sublayer.
    pub d_ff: usize,
    /// Number of blocks `L_LM`.
    pub n_layers: usize,
    /// Maximum token length `L`.
    pub max_len: usize,
    /// Vocabulary size `V`.
    pub vocab_size: usize,
    pub layer_norm_eps: f64,
}

impl LMConfig {
    /// Twelve 768-wide blocks with twelve heads.
    pub fn paper(vocab_size: usize) -> Self {
        LMConfig {
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            n_layers: 12,
            max_len: 16,
            vocab_size,
            layer_norm_eps: nn::LN_EPS,
        }
    }

    pub fn desk(vocab_size: usize) -> Self {
        LMConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_layers: 2,
            max_len: 8,
            vocab_size,
            layer_norm_eps: nn::LN_EPS,
        }
    }

    /// Smallest configuration, used by gradient checks.
    pub fn micro(vocab_size: usize) -> Self {
        LMConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_layers: 1,
            max_len: 3,
            vocab_size,
            layer_norm_eps: nn::LN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(TensorError::invalid("lm config", d));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_len < 3 || self.vocab_size < 5 || self.d_ff == 0 {
            return bad("max_len ≥ 3, vocab_size ≥ 5 and d_ff ≥ 1 are required".into());
        }
        if self.layer_norm_eps <= 0.0 {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}

pub fn block_prefix(i: usize) -> String {
    format!("lm.block{i}")
}

/// Self-attention, two layer norms and the feed-forward pair of one block.
pub fn init_block<T: Element>(ps: &mut ParamStore<T>, init: &mut Init, prefix: &str, cfg: &LMConfig) {
    let d = cfg.d_model;
    nn::init_attention(ps, init, &format!("{prefix}.attn"), d, d, d, d, LM_INIT_STD, false);
    nn::init_norm(ps, &format!("{prefix}.ln1"), d);
    nn::init_linear(ps, init, &format!("{prefix}.ffn.ff1"), d, cfg.d_ff, LM_INIT_STD);
    nn::init_linear(ps, init, &format!("{prefix}.ffn.ff2"), cfg.d_ff, d, LM_INIT_STD);
    nn::init_norm(ps, &format!("{prefix}.ln2"), d);
}

/// Embedding tables and all blocks under the `lm.` prefix.
pub fn init_lm<T: Element>(ps: &mut ParamStore<T>, init: &mut Init, cfg: &LMConfig) {
    ps.insert_param("lm.tok_emb", init.normal(&[cfg.vocab_size, cfg.d_model], LM_INIT_STD));
    ps.insert_param("lm.pos_emb", init.normal(&[cfg.max_len, cfg.d_model], LM_INIT_STD));
    for i in 0..cfg.n_layers {
        init_block(ps, init, &block_prefix(i), cfg);
    }
}

/// Row `i` is `tok_emb[ids[i]] + pos_emb[i]`.
pub fn embed<T: Element>(g: &mut Graph<T>, ps: &ParamStore<T>, cfg: &LMConfig, tokens: &TokenizedText) -> Result<Var> {
    if tokens.max_len() != cfg.max_len {
        return Err(TensorError::dim(
            "embed",
            format!("{} tokens for a model with max_len {}", tokens.max_len(), cfg.max_len),
        ));
    }
    if let Some(&bad) = tokens.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(TensorError::invalid(
            "embed",
            format!("token id {bad} is outside the vocabulary of size {}", cfg.vocab_size),
        ));
    }
    let ids: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..cfg.max_len).collect();
    let tok_table = g.param(ps, "lm.tok_emb")?;
    let pos_table = g.param(ps, "lm.pos_emb")?;
    let tok = g.gather_rows(tok_table, &ids)?;
    let pos = g.gather_rows(pos_table, &positions)?;
    g.add(tok, pos)
}

/// Multi-head self-attention sublayer of block `prefix`.
pub fn multi_head_self_attention<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    x: Var,
    mask: &[bool],
    n_heads: usize,
) -> Result<Attended> {
    let rows = g.value(x).dims2()?.0;
    if mask.len() != rows {
        return Err(TensorError::dim(
            "self_attention",
            format!("mask of length {} for {rows} positions", mask.len()),
        ));
    }
    nn::self_attention(g, ps, &format!("{prefix}.attn"), x, n_heads, mask)
}

/// `h = LN₁(x + SelfAttn(x))`.
pub fn attention_sublayer<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    x: Var,
    mask: &[bool],
    cfg: &LMConfig,
) -> Result<Var> {
    let att = multi_head_self_attention(g, ps, prefix, x, mask, cfg.n_heads)?;
    let r = g.add(x, att.out)?;
    nn::layer_norm(g, ps, &format!("{prefix}.ln1"), r, cfg.layer_norm_eps)
}

/// `LN₂(h + FFN(h))`.
pub fn ffn_sublayer<T: Element>(g: &mut Graph<T>, ps: &ParamStore<T>, prefix: &str, h: Var, cfg: &LMConfig) -> Result<Var> {
    let f = nn::feed_forward(g, ps, &format!("{prefix}.ffn"), h)?;
    let r = g.add(h, f)?;
    nn::layer_norm(g, ps, &format!("{prefix}.ln2"), r, cfg.layer_norm_eps)
}

/// One post-layer-norm transformer block.
pub fn lm_block<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    x: Var,
    mask: &[bool],
    cfg: &LMConfig,
) -> Result<Var> {
    let h = attention_sublayer(g, ps, prefix, x, mask, cfg)?;
    ffn_sublayer(g, ps, prefix, h, cfg)
}

/// Embeddings followed by every block.
pub fn lm_forward<T: Element>(g: &mut Graph<T>, ps: &ParamStore<T>, cfg: &LMConfig, tokens: &TokenizedText) -> Result<Var> {
    let mut x = embed(g, ps, cfg, tokens)?;
    for i in 0..cfg.n_layers {
        x = lm_block(g, ps, &block_prefix(i), x, &tokens.attention_mask, cfg)?;
    }
    Ok(x)
}
