//! Per-point decoders turning fused features into two-class logits, the
//! training loss, and the two comparison heads (cosine similarity and bare
//! cross-attention).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::lm::{LMConfig, LM_INIT_STD};
use crate::nn;
use crate::params::{Init, ParamStore};
use crate::tensor::{Element, Result, Tensor, TensorError};
use crate::text::TokenizedText;

/// Initial cosine temperature.
pub const TAU_INIT: f64 = 0.07;
/// Denominator guard of the cosine score.
pub const COS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    /// Language-model blocks with inserted cross-attention, then the decoder.
    #[default]
    Aqm,
    /// Bare cross-attention layers in place of the LM blocks, then the decoder.
    Xattn,
    /// Cosine similarity against a pooled text embedding.
    Cosine,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 3] = [HeadVariant::Aqm, HeadVariant::Xattn, HeadVariant::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::Aqm => "aqm",
            HeadVariant::Xattn => "xattn",
            HeadVariant::Cosine => "cosine",
        }
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        HeadVariant::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| format!("unknown head `{s}`; valid heads: aqm, xattn, cosine"))
    }
}

/// Per-point logits, positive probabilities and hard decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct AffordancePrediction {
    /// `N×2` logits, negative class first.
    pub logits: Vec<[f64; 2]>,
    pub probs: Vec<f64>,
    pub labels: Vec<bool>,
}

impl AffordancePrediction {
    pub fn from_logits<T: Element>(logits: &Tensor<T>) -> Result<Self> {
        let (n, c) = logits.dims2()?;
        if c != 2 {
            return Err(TensorError::dim("prediction", format!("logits {:?}", logits.shape())));
        }
        let logits: Vec<[f64; 2]> = (0..n)
            .map(|i| [logits.at2(i, 0).as_f64(), logits.at2(i, 1).as_f64()])
            .collect();
        let probs = logits
            .iter()
            .map(|&[a, b]| {
                let m = a.max(b);
                let (ea, eb) = ((a - m).exp(), (b - m).exp());
                eb / (ea + eb)
            })
            .collect();
        // ties go to the negative class
        let labels = logits.iter().map(|&[a, b]| b > a).collect();
        Ok(AffordancePrediction { logits, probs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Mean two-class cross-entropy of `N×2` logits against a binary mask.
pub fn loss<T: Element>(g: &mut Graph<T>, logits: Var, gt_mask: &[u8]) -> Result<Var> {
    if let Some((i, &b)) = gt_mask.iter().enumerate().find(|(_, &b)| b > 1) {
        return Err(TensorError::invalid("loss", format!("mask value {b} at point {i} is not 0 or 1")));
    }
    let targets: Vec<usize> = gt_mask.iter().map(|&b| b as usize).collect();
    g.cross_entropy(logits, &targets)
}

/// Decoder parameters under `head.`: cross-attention from points to text
/// and a GELU MLP to two logits.
pub fn init_decoder<T: Element>(ps: &mut ParamStore<T>, init: &mut Init, d_p: usize, d_lm: usize, d_att: usize) {
    nn::init_attention(ps, init, "head.xattn", d_p, d_lm, d_att, d_att, LM_INIT_STD, false);
    nn::init_linear(ps, init, "head.mlp1", d_att, d_att, LM_INIT_STD);
    nn::init_linear(ps, init, "head.mlp2", d_att, 2, LM_INIT_STD);
}

/// Query projection of the decoder. It depends only on `h_c`, so one
/// projection serves every query word of a sample.
pub fn decoder_queries<T: Element>(g: &mut Graph<T>, ps: &ParamStore<T>, h_c: Var) -> Result<Var> {
    nn::linear(g, ps, "head.xattn.q", h_c)
}

/// Decoder given projected point queries: attends over the text states `t`
/// (padded positions masked) and maps each point to two logits.
pub fn decode_with_queries<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    queries: Var,
    t: Var,
    text_mask: &[bool],
    n_heads: usize,
) -> Result<Var> {
    let kv = nn::project_kv(g, ps, "head.xattn", t)?;
    let att = nn::attention(g, queries, kv.k, kv.v, n_heads, Some(text_mask))?;
    let ctx = nn::linear(g, ps, "head.xattn.o", att.out)?;
    let h = nn::linear(g, ps, "head.mlp1", ctx)?;
    let h = g.gelu(h)?;
    nn::linear(g, ps, "head.mlp2", h)
}

/// `N×2` logits from point features `h_c` and text states `t`.
pub fn decode<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    h_c: Var,
    t: Var,
    text_mask: &[bool],
    n_heads: usize,
) -> Result<Var> {
    let q = decoder_queries(g, ps, h_c)?;
    decode_with_queries(g, ps, q, t, text_mask, n_heads)
}

pub fn init_cosine<T: Element>(ps: &mut ParamStore<T>, init: &mut Init, d_lm: usize, d_p: usize) {
    nn::init_linear(ps, init, "head.text_proj", d_lm, d_p, LM_INIT_STD);
    ps.insert_param("head.log_tau", Tensor::full(&[1], T::from_f64(TAU_INIT.ln())));
}

/// Mean of the rows of `t` at unmasked positions, as a `1×d` matrix.
pub fn masked_mean_rows<T: Element>(g: &mut Graph<T>, t: Var, mask: &[bool]) -> Result<Var> {
    let rows = g.value(t).dims2()?.0;
    if mask.len() != rows {
        return Err(TensorError::dim("masked_mean", format!("mask of length {} for {rows} rows", mask.len())));
    }
    let idx: Vec<usize> = (0..rows).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(TensorError::invalid("masked_mean", "every position is masked"));
    }
    let w = vec![T::from_f64(1.0 / idx.len() as f64); idx.len()];
    g.weighted_rows(t, &[0, idx.len()], &idx, &w)
}

/// Pooled and projected text embedding `1×d_P` of the cosine head.
pub fn cosine_text_embedding<T: Element>(g: &mut Graph<T>, ps: &ParamStore<T>, t: Var, mask: &[bool]) -> Result<Var> {
    let pooled = masked_mean_rows(g, t, mask)?;
    nn::linear(g, ps, "head.text_proj", pooled)
}

/// `N×1` cosines between the rows of `h_c` and the single row of `text_emb`.
pub fn cosine_scores<T: Element>(g: &mut Graph<T>, h_c: Var, text_emb: Var) -> Result<Var> {
    let a = g.l2_normalize_rows(h_c, COS_EPS)?;
    let b = g.l2_normalize_rows(text_emb, COS_EPS)?;
    g.matmul_nt(a, b)
}

/// Logits `(0, cos/τ)` per point with learnable `τ = exp(head.log_tau)`.
pub fn cosine_baseline<T: Element>(g: &mut Graph<T>, ps: &ParamStore<T>, h_c: Var, text_emb: Var) -> Result<Var> {
    let (n, d) = g.value(h_c).dims2()?;
    if g.value(text_emb).dims2()? != (1, d) {
        return Err(TensorError::dim(
            "cosine_baseline",
            format!("point features {:?} vs text embedding {:?}", g.shape(h_c), g.shape(text_emb)),
        ));
    }
    let cos = cosine_scores(g, h_c, text_emb)?;
    let log_tau = g.param(ps, "head.log_tau")?;
    let tau = g.exp(log_tau)?;
    let s = g.div_scalar(cos, tau)?;
    let zero = g.constant(Tensor::zeros(&[n, 1]))?;
    g.concat_cols(&[zero, s])
}

pub fn xattn_layer_prefix(i: usize) -> String {
    format!("xattn.layer{i}")
}

pub fn init_plain_xattn<T: Element>(ps: &mut ParamStore<T>, init: &mut Init, lm: &LMConfig, d_p: usize, zero_output: bool) {
    let d = lm.d_model;
    for i in 0..lm.n_layers {
        nn::init_attention(ps, init, &xattn_layer_prefix(i), d, d_p, d, d, LM_INIT_STD, zero_output);
    }
}

/// Stack of bare residual cross-attention layers `x ← x + CrossAttn(x, h_c)`
/// over the embedded tokens, one per LM block and with no self-attention,
/// normalization or feed-forward sublayer.
pub fn plain_xattn_stack<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    lm_cfg: &LMConfig,
    tokens: &TokenizedText,
    point_kv: &[nn::KeyValues],
) -> Result<Var> {
    let mut x = crate::lm::embed(g, ps, lm_cfg, tokens)?;
    for (i, &kv) in point_kv.iter().enumerate() {
        let att = nn::attend(g, ps, &xattn_layer_prefix(i), x, kv, lm_cfg.n_heads, None)?;
        x = g.add(x, att.out)?;
    }
    Ok(x)
}

/// Keys and values of every plain cross-attention layer.
pub fn plain_xattn_keys<T: Element>(g: &mut Graph<T>, ps: &ParamStore<T>, lm_cfg: &LMConfig, h_c: Var) -> Result<Vec<nn::KeyValues>> {
    (0..lm_cfg.n_layers)
        .map(|i| nn::project_kv(g, ps, &xattn_layer_prefix(i), h_c))
        .collect()
}

/// Full ablation head: the bare cross-attention stack followed by the decoder.
pub fn plain_xattn_head<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    lm_cfg: &LMConfig,
    tokens: &TokenizedText,
    h_c: Var,
) -> Result<Var> {
    let kv = plain_xattn_keys(g, ps, lm_cfg, h_c)?;
    let x = plain_xattn_stack(g, ps, lm_cfg, tokens, &kv)?;
    decode(g, ps, h_c, x, &tokens.attention_mask, lm_cfg.n_heads)
}
