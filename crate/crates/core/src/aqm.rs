//! Affordance query module: the language-model blocks with a cross-attention
//! sublayer to point features inserted between self-attention and the
//! feed-forward network.
//!
//! The inserted sublayer is residual with its own layer norm on the query
//! side, `c = h + CrossAttn(LN_x(h), h_c)`. With a zero output projection it
//! adds exactly zero, so the wrapped block is reproduced bit for bit.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::lm::{self, LMConfig, LM_INIT_STD};
use crate::nn::{self, KeyValues};
use crate::params::{Init, ParamStore};
use crate::tensor::{Element, Result, TensorError};
use crate::text::TokenizedText;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AqmConfig {
    pub lm: LMConfig,
    /// Point feature width `d_P`.
    pub d_p: usize,
    /// Start every cross-attention output projection at zero.
    pub gate_zero_init: bool,
}

impl AqmConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        if self.d_p == 0 {
            return Err(TensorError::invalid("aqm config", "d_p must be positive"));
        }
        Ok(())
    }

    /// Cross-attention inner width, equal to the LM width.
    pub fn d_att(&self) -> usize {
        self.lm.d_model
    }
}

pub fn xattn_prefix(block: usize) -> String {
    format!("aqm.block{block}.xattn")
}

pub fn ln_x_prefix(block: usize) -> String {
    format!("aqm.block{block}.ln_x")
}

/// The inserted parameters of every block. The wrapped LM parameters are
/// created by [`lm::init_lm`].
pub fn init_aqm<T: Element>(ps: &mut ParamStore<T>, init: &mut Init, cfg: &AqmConfig) {
    let d = cfg.lm.d_model;
    for i in 0..cfg.lm.n_layers {
        nn::init_attention(ps, init, &xattn_prefix(i), d, cfg.d_p, cfg.d_att(), d, LM_INIT_STD, cfg.gate_zero_init);
        nn::init_norm(ps, &ln_x_prefix(i), d);
    }
}

/// Zeroes every cross-attention output projection.
pub fn zero_cross_attention<T: Element>(ps: &mut ParamStore<T>, cfg: &AqmConfig) -> Result<()> {
    for i in 0..cfg.lm.n_layers {
        for part in ["weight", "bias"] {
            let name = format!("{}.o.{part}", xattn_prefix(i));
            ps.tensor_mut(&name)?.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
    Ok(())
}

/// Keys and values of every block's cross-attention, projected from `h_c`.
/// They depend only on the point cloud, so one projection serves every
/// query word of a sample.
pub fn project_point_keys<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cfg: &AqmConfig,
    h_c: Var,
) -> Result<Vec<KeyValues>> {
    let (_, d) = g.value(h_c).dims2()?;
    if d != cfg.d_p {
        return Err(TensorError::dim(
            "aqm",
            format!("point features {:?} for d_p = {}", g.shape(h_c), cfg.d_p),
        ));
    }
    (0..cfg.lm.n_layers)
        .map(|i| nn::project_kv(g, ps, &xattn_prefix(i), h_c))
        .collect()
}

/// One block: returns `(h, g)` for block input `x`.
pub fn aqm_block<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cfg: &AqmConfig,
    block: usize,
    x: Var,
    point_kv: KeyValues,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let prefix = lm::block_prefix(block);
    let h = lm::attention_sublayer(g, ps, &prefix, x, mask, &cfg.lm)?;
    let q = nn::layer_norm(g, ps, &ln_x_prefix(block), h, cfg.lm.layer_norm_eps)?;
    let att = nn::attend(g, ps, &xattn_prefix(block), q, point_kv, cfg.lm.n_heads, None)?;
    let c = g.add(h, att.out)?;
    let out = lm::ffn_sublayer(g, ps, &prefix, c, &cfg.lm)?;
    Ok((h, out))
}

/// Intermediate states of a forward pass through all blocks.
#[derive(Clone, Debug)]
pub struct AqmTrace {
    /// Block inputs `x⁽ⁱ⁾`.
    pub xs: Vec<Var>,
    /// Post-self-attention states `h⁽ⁱ⁾`.
    pub hs: Vec<Var>,
    /// Block outputs `g⁽ⁱ⁾`.
    pub gs: Vec<Var>,
    /// Output of the last block.
    pub g: Var,
}

pub fn aqm_forward<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cfg: &AqmConfig,
    tokens: &TokenizedText,
    point_kv: &[KeyValues],
) -> Result<AqmTrace> {
    if point_kv.len() != cfg.lm.n_layers {
        return Err(TensorError::invalid(
            "aqm_forward",
            format!("{} key/value sets for {} blocks", point_kv.len(), cfg.lm.n_layers),
        ));
    }
    let mut x = lm::embed(g, ps, &cfg.lm, tokens)?;
    let mut trace = AqmTrace {
        xs: Vec::new(),
        hs: Vec::new(),
        gs: Vec::new(),
        g: x,
    };
    for (i, &kv) in point_kv.iter().enumerate() {
        trace.xs.push(x);
        let (h, out) = aqm_block(g, ps, cfg, i, x, kv, &tokens.attention_mask)?;
        trace.hs.push(h);
        trace.gs.push(out);
        x = out;
    }
    trace.g = x;
    Ok(trace)
}
