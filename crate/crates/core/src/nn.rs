//! Parameterized layers built on the tape: linear maps, normalization and
//! multi-head attention. Parameters are looked up by dotted name prefix.

use crate::autograd::{Graph, Var};
use crate::params::{Init, ParamStore};
use crate::tensor::{Element, Result, Tensor, TensorError};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn init_linear<T: Element>(ps: &mut ParamStore<T>, init: &mut Init, prefix: &str, d_in: usize, d_out: usize, std: f64) {
    ps.insert_param(format!("{prefix}.weight"), init.normal(&[d_in, d_out], std));
    ps.insert_param(format!("{prefix}.bias"), Tensor::zeros(&[d_out]));
}

pub fn init_linear_zero<T: Element>(ps: &mut ParamStore<T>, prefix: &str, d_in: usize, d_out: usize) {
    ps.insert_param(format!("{prefix}.weight"), Tensor::zeros(&[d_in, d_out]));
    ps.insert_param(format!("{prefix}.bias"), Tensor::zeros(&[d_out]));
}

/// `x · W + b` with `W: d_in×d_out`.
pub fn linear<T: Element>(g: &mut Graph<T>, ps: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{prefix}.weight"))?;
    let b = g.param(ps, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub fn init_norm<T: Element>(ps: &mut ParamStore<T>, prefix: &str, d: usize) {
    ps.insert_param(format!("{prefix}.gain"), Tensor::full(&[d], T::one()));
    ps.insert_param(format!("{prefix}.bias"), Tensor::zeros(&[d]));
}

pub fn init_batch_norm<T: Element>(ps: &mut ParamStore<T>, prefix: &str, d: usize) {
    init_norm(ps, prefix, d);
    ps.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[d]));
    ps.insert_buffer(format!("{prefix}.running_var"), Tensor::full(&[d], T::one()));
}

pub fn layer_norm<T: Element>(g: &mut Graph<T>, ps: &ParamStore<T>, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = g.param(ps, &format!("{prefix}.gain"))?;
    let bias = g.param(ps, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, eps)
}

/// One-dimensional batch norm over the rows of an `N×d` matrix.
pub fn batch_norm<T: Element>(g: &mut Graph<T>, ps: &ParamStore<T>, prefix: &str, x: Var, mode: Mode) -> Result<Var> {
    let gain = g.param(ps, &format!("{prefix}.gain"))?;
    let bias = g.param(ps, &format!("{prefix}.bias"))?;
    match mode {
        Mode::Train => g.batch_norm_train(x, gain, bias, BN_EPS, prefix),
        Mode::Eval => {
            let mean = ps.get(&format!("{prefix}.running_mean"))?.data();
            let var = ps.get(&format!("{prefix}.running_var"))?.data();
            g.batch_norm_eval(x, gain, bias, mean, var, BN_EPS)
        }
    }
}

/// Two-layer GELU feed-forward network (`{prefix}.ff1`, `{prefix}.ff2`).
pub fn feed_forward<T: Element>(g: &mut Graph<T>, ps: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, ps, &format!("{prefix}.ff1"), x)?;
    let h = g.gelu(h)?;
    linear(g, ps, &format!("{prefix}.ff2"), h)
}

/// Output of scaled dot-product attention, with the per-head weight
/// matrices kept for inspection.
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention over already projected
/// `q: A×d`, `k, v: B×d`. Keys with `key_mask[j] == false` get zero weight.
pub fn attention<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Attended> {
    let (_, d) = g.value(q).dims2()?;
    let (b, dk) = g.value(k).dims2()?;
    if b == 0 {
        return Err(TensorError::dim("attention", "no keys"));
    }
    if dk != d || g.shape(v) != g.shape(k) {
        return Err(TensorError::dim(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", g.shape(q), g.shape(k), g.shape(v)),
        ));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(TensorError::invalid(
            "attention",
            format!("width {d} is not divisible by {n_heads} heads"),
        ));
    }
    let dh = d / n_heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let p = g.softmax_masked(scores, 1, key_mask)?;
        heads.push(g.matmul(p, vh)?);
        weights.push(p);
    }
    let out = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok(Attended { out, weights })
}

/// Parameters `{prefix}.{q,k,v,o}` of an attention layer whose queries have
/// width `d_q`, keys/values width `d_kv`, inner width `d_att` and output
/// width `d_out`.
#[allow(clippy::too_many_arguments)]
pub fn init_attention<T: Element>(
    ps: &mut ParamStore<T>,
    init: &mut Init,
    prefix: &str,
    d_q: usize,
    d_kv: usize,
    d_att: usize,
    d_out: usize,
    std: f64,
    zero_output: bool,
) {
    init_linear(ps, init, &format!("{prefix}.q"), d_q, d_att, std);
    init_linear(ps, init, &format!("{prefix}.k"), d_kv, d_att, std);
    init_linear(ps, init, &format!("{prefix}.v"), d_kv, d_att, std);
    if zero_output {
        init_linear_zero(ps, &format!("{prefix}.o"), d_att, d_out);
    } else {
        init_linear(ps, init, &format!("{prefix}.o"), d_att, d_out, std);
    }
}

/// Projected keys and values of a key/value sequence, reusable across
/// several query sequences.
#[derive(Clone, Copy, Debug)]
pub struct KeyValues {
    pub k: Var,
    pub v: Var,
}

pub fn project_kv<T: Element>(g: &mut Graph<T>, ps: &ParamStore<T>, prefix: &str, kv_seq: Var) -> Result<KeyValues> {
    let k = linear(g, ps, &format!("{prefix}.k"), kv_seq)?;
    let v = linear(g, ps, &format!("{prefix}.v"), kv_seq)?;
    Ok(KeyValues { k, v })
}

/// Attends from `query_seq` to pre-projected key/values and applies the
/// output projection.
pub fn attend<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    query_seq: Var,
    kv: KeyValues,
    n_heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Attended> {
    let q = linear(g, ps, &format!("{prefix}.q"), query_seq)?;
    let att = attention(g, q, kv.k, kv.v, n_heads, key_mask)?;
    let out = linear(g, ps, &format!("{prefix}.o"), att.out)?;
    Ok(Attended { out, weights: att.weights })
}

/// Cross-attention: queries from `query_seq`, keys and values from `kv_seq`.
pub fn cross_attention<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    query_seq: Var,
    kv_seq: Var,
    n_heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Attended> {
    let kv = project_kv(g, ps, prefix, kv_seq)?;
    attend(g, ps, prefix, query_seq, kv, n_heads, key_mask)
}

/// Self-attention where padded positions are masked out as keys.
pub fn self_attention<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    x: Var,
    n_heads: usize,
    key_mask: &[bool],
) -> Result<Attended> {
    cross_attention(g, ps, prefix, x, x, n_heads, Some(key_mask))
}
