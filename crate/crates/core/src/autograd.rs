//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] is a single-use tape: forward ops append nodes, and
//! [`Graph::backward`] walks them in reverse once. Nodes are referenced by
//! copyable [`Var`] handles that are only meaningful for the graph that
//! produced them.

use indexmap::IndexMap;

use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Element, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom`]: given input values, the output value
/// and the output gradient, returns one optional gradient per input.
pub type CustomBackward<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>> + Send + Sync>;

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        train: bool,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    WeightedRows {
        x: Var,
        offsets: Vec<usize>,
        idx: Vec<usize>,
        weights: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    DivScalar {
        x: Var,
        s: Var,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: &'static str,
}

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into the running estimates by the caller.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub key: String,
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

/// Gradients of the leaves of a graph, produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    checked: bool,
    consumed: bool,
    params: IndexMap<String, Var>,
    batch_stats: Vec<BatchStats<T>>,
    grad_enabled: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_f64(x: f64) -> (f64, f64) {
    // exact (erf) form; returns value and derivative
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (x * cdf, cdf + x * pdf)
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::dim(op, format!("{a:?} vs {b:?}"))
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            checked: false,
            consumed: false,
            params: IndexMap::new(),
            batch_stats: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Enables the non-finite scan after every forward op.
    pub fn with_checked(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    /// Inference graph: parameters are bound without gradient tracking.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.grad_enabled = false;
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| {
            TensorError::dim(op, format!("expected a matrix, got {:?}", self.shape(v)))
        })
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            name: "leaf",
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        let rg = self.grad_enabled;
        self.leaf(value, rg)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a named parameter (or buffer) from `store`. Binding the same
    /// name twice returns the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let entry = store.entry(name)?;
        let rg = self.grad_enabled && entry.trainable && entry.kind == ParamKind::Param;
        let v = self.leaf(entry.tensor.clone(), rg)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound on this graph, in binding order.
    pub fn bound_params(&self) -> &IndexMap<String, Var> {
        &self.params
    }

    /// Gradients of every bound trainable parameter, keyed by name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats<T>> {
        std::mem::take(&mut self.batch_stats)
    }

    // ---- forward ops -------------------------------------------------

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let (m, k) = self.dims2(a, op)?;
        let (br, bc) = self.dims2(b, op)?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(op, value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`n` vector to every row of a `…×n` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = *vx.shape().last().unwrap_or(&1);
        if vb.numel() != n || vb.rank() != 1 {
            return Err(shape_err("add_bias", vx.shape(), vb.shape()));
        }
        let b = vb.data();
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, &b)| *v += b);
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .map(|&v| T::from_f64(gelu_f64(v.as_f64()).0))
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis` where positions with `mask[j] == false` are
    /// excluded and receive exactly zero weight.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::dim(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if let Some(m) = mask {
            if m.len() != len {
                return Err(TensorError::dim(
                    "softmax",
                    format!("mask length {} vs axis length {len}", m.len()),
                ));
            }
            if !m.iter().any(|&k| k) {
                return Err(TensorError::dim("softmax", "every position is masked"));
            }
        }
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let src = vx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in (0..len).filter(|&j| keep(j)) {
                    max = max.max(src[at(j)]);
                }
                let mut sum = T::zero();
                for j in (0..len).filter(|&j| keep(j)) {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in (0..len).filter(|&j| keep(j)) {
                    out[at(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, Op::Softmax { x, outer, len, inner }, &[x])
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::invalid("layer_norm", "eps must be positive"));
        }
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap_or(&1);
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.numel() != d || vb.numel() != d {
            return Err(TensorError::dim(
                "layer_norm",
                format!("input {:?} vs gain {:?} / bias {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let rows = vx.numel() / d;
        let (g, b) = (vg.data(), vb.data());
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.numel()];
        let dt = T::from_f64(d as f64);
        let eps = T::from_f64(eps);
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            &[x, gain, bias],
        )
    }

    /// Batch normalization of an `N×d` matrix using its own column
    /// statistics. The observed mean and unbiased variance are recorded
    /// under `key` (see [`Graph::take_batch_stats`]).
    pub fn batch_norm_train(&mut self, x: Var, gain: Var, bias: Var, eps: f64, key: &str) -> Result<Var> {
        let (n, d) = self.dims2(x, "batch_norm")?;
        if n < 2 {
            return Err(TensorError::invalid(
                "batch_norm",
                format!("training mode needs at least 2 rows, got {n}"),
            ));
        }
        self.check_affine("batch_norm", x, gain, bias, d)?;
        let vx = self.value(x).data();
        let nt = T::from_f64(n as f64);
        let mut mean = vec![T::zero(); d];
        for r in 0..n {
            for j in 0..d {
                mean[j] += vx[r * d + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= nt);
        let mut var = vec![T::zero(); d];
        for r in 0..n {
            for j in 0..d {
                let c = vx[r * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        let unbiased: Vec<T> = var.iter().map(|&v| v / T::from_f64((n - 1) as f64)).collect();
        var.iter_mut().for_each(|v| *v /= nt);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
        self.batch_stats.push(BatchStats {
            key: key.to_string(),
            mean: mean.clone(),
            var: unbiased,
        });
        self.finish_batch_norm(x, gain, bias, &mean, rstd, true)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, d) = self.dims2(x, "batch_norm")?;
        self.check_affine("batch_norm", x, gain, bias, d)?;
        if running_mean.len() != d || running_var.len() != d {
            return Err(TensorError::dim(
                "batch_norm",
                format!("running stats of width {} for input width {d}", running_mean.len()),
            ));
        }
        let rstd = running_var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        self.finish_batch_norm(x, gain, bias, running_mean, rstd, false)
    }

    fn check_affine(&self, op: &'static str, x: Var, gain: Var, bias: Var, d: usize) -> Result<()> {
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.numel() != d || vb.numel() != d {
            return Err(TensorError::dim(
                op,
                format!("input {:?} vs gain {:?} / bias {:?}", self.shape(x), vg.shape(), vb.shape()),
            ));
        }
        Ok(())
    }

    fn finish_batch_norm(&mut self, x: Var, gain: Var, bias: Var, mean: &[T], rstd: Vec<T>, train: bool) -> Result<Var> {
        let vx = self.value(x);
        let d = mean.len();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut out = vec![T::zero(); vx.numel()];
        for ((src, xh), o) in vx.data().chunks_exact(d).zip(xhat.chunks_exact_mut(d)).zip(out.chunks_exact_mut(d)) {
            for j in 0..d {
                let h = (src[j] - mean[j]) * rstd[j];
                xh[j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm { x, gain, bias, xhat, rstd, train },
            &[x, gain, bias],
        )
    }

    /// Selects rows of a matrix (with repetition allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(x).select_rows(idx)?;
        self.push("gather_rows", value, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat_cols", "no inputs"));
        }
        let rows = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        let deps = parts.to_vec();
        let parts = parts.iter().copied().zip(widths).collect();
        self.push("concat_cols", value, Op::ConcatCols { parts }, &deps)
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(TensorError::dim(
                "slice_cols",
                format!("columns {start}..{} of {:?}", start + len, self.shape(x)),
            ));
        }
        let vx = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        self.push("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    /// Column-wise max over consecutive groups of `group` rows:
    /// `(m·group)×f → m×f`. Ties resolve to the first row of the group.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, f) = self.dims2(x, "group_max")?;
        if group == 0 || rows % group != 0 {
            return Err(TensorError::dim(
                "group_max",
                format!("{rows} rows do not split into groups of {group}"),
            ));
        }
        let m = rows / group;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * f];
        let mut argmax = vec![0usize; m * f];
        for gi in 0..m {
            for j in 0..f {
                let mut best = gi * group;
                for r in gi * group + 1..(gi + 1) * group {
                    if src[r * f + j] > src[best * f + j] {
                        best = r;
                    }
                }
                out[gi * f + j] = src[best * f + j];
                argmax[gi * f + j] = best;
            }
        }
        let value = Tensor::new(vec![m, f], out)?;
        self.push("group_max", value, Op::GroupMax { x, argmax }, &[x])
    }

    /// Row `i` of the output is `Σ_p weights[p] · x[idx[p]]` for
    /// `p ∈ offsets[i]..offsets[i+1]`. Weights are constants.
    pub fn weighted_rows(&mut self, x: Var, offsets: &[usize], idx: &[usize], weights: &[T]) -> Result<Var> {
        let (rows, f) = self.dims2(x, "weighted_rows")?;
        if offsets.len() < 2 || idx.len() != weights.len() || *offsets.last().unwrap() != idx.len() {
            return Err(TensorError::invalid("weighted_rows", "inconsistent sparse layout"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::dim(
                "weighted_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let m = offsets.len() - 1;
        let src = self.value(x);
        let mut out = vec![T::zero(); m * f];
        for i in 0..m {
            let dst = &mut out[i * f..(i + 1) * f];
            for p in offsets[i]..offsets[i + 1] {
                let w = weights[p];
                for (o, &s) in dst.iter_mut().zip(src.row(idx[p])) {
                    *o += w * s;
                }
            }
        }
        let value = Tensor::new(vec![m, f], out)?;
        self.push(
            "weighted_rows",
            value,
            Op::WeightedRows {
                x,
                offsets: offsets.to_vec(),
                idx: idx.to_vec(),
                weights: weights.to_vec(),
            },
            &[x],
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.data().iter().copied().sum::<T>() / T::from_f64(vx.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean cross-entropy of `n×c` logits against class targets, computed
    /// with a log-sum-exp stabilized log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::dim(
                "cross_entropy",
                format!("{n} rows vs {} targets", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("target {t} out of range for {c} classes"),
            ));
        }
        let vl = self.value(logits);
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for r in 0..n {
            let row = vl.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            total += lse - row[targets[r]];
        }
        let loss = total / T::from_f64(n as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Divides each row by `‖row‖ + eps`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.dims2(x, "l2_normalize_rows")?;
        let vx = self.value(x);
        let eps = T::from_f64(eps);
        let mut norms = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = vx.row(r);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[r] = n;
            for j in 0..d {
                out[r * d + j] = row[j] / (n + eps);
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        self.push("l2_normalize_rows", value, Op::L2NormalizeRows { x, norms, eps }, &[x])
    }

    /// Element-wise exponential.
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.exp()).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let backward: CustomBackward<T> = Box::new(|_, y, gy| {
            let d = y.data().iter().zip(gy.data()).map(|(&y, &g)| y * g).collect();
            vec![Tensor::new(y.shape().to_vec(), d).ok()]
        });
        self.custom("exp", &[x], value, backward)
    }

    /// Divides every element of `x` by the single element of `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item().map_err(|_| {
            TensorError::dim("div_scalar", format!("divisor has shape {:?}", self.shape(s)))
        })?;
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v / sv).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("div_scalar", value, Op::DivScalar { x, s }, &[x, s])
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, name: &'static str, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Result<Var> {
        self.push(
            name,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates gradients of the scalar `loss` into every leaf that
    /// requires one. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            self.backward_node(i, &gy, &mut grads)?;
        }

        let mut out = Vec::with_capacity(n);
        for (node, g) in self.nodes.iter().zip(grads) {
            let t = match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    if self.checked && !t.all_finite() {
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                    Some(t)
                }
                _ => None,
            };
            out.push(t);
        }
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let len_of = |v: Var| nodes[v.0].value.numel();
        fn buf<'a, T: Element>(grads: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = nodes[a.0].value.dims2()?;
                let n = node.value.shape()[1];
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    // dA = dC · Bᵀ (B is k×n), or dC · B when B is stored n×k
                    let da = buf(grads, *a, m * k);
                    T::gemm(m, n, k, gy, false, bv, !trans_b, da, true);
                }
                if wants(*b) {
                    let db = buf(grads, *b, k * n);
                    if *trans_b {
                        // dB (n×k) = dCᵀ · A
                        T::gemm(n, m, k, gy, true, av, false, db, true);
                    } else {
                        // dB (k×n) = Aᵀ · dC
                        T::gemm(k, m, n, av, true, gy, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if wants(v) {
                        let d = buf(grads, v, gy.len());
                        d.iter_mut().zip(gy).for_each(|(d, &g)| *d += sign * g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if wants(v) {
                        let d = buf(grads, v, gy.len());
                        d.iter_mut().zip(gy).for_each(|(d, &g)| *d += sign * g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    let d = buf(grads, *a, gy.len());
                    for j in 0..gy.len() {
                        d[j] += gy[j] * bv[j];
                    }
                }
                if wants(*b) {
                    let d = buf(grads, *b, gy.len());
                    for j in 0..gy.len() {
                        d[j] += gy[j] * av[j];
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    let d = buf(grads, *x, gy.len());
                    d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g);
                }
                if wants(*bias) {
                    let n = len_of(*bias);
                    let d = buf(grads, *bias, n);
                    for row in gy.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if wants(*x) {
                    let d = buf(grads, *x, gy.len());
                    d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g * *factor);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let d = buf(grads, *x, gy.len());
                    for j in 0..gy.len() {
                        if y[j] > T::zero() {
                            d[j] += gy[j];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = nodes[x.0].value.data();
                    let d = buf(grads, *x, gy.len());
                    for j in 0..gy.len() {
                        d[j] += gy[j] * T::from_f64(gelu_f64(xv[j].as_f64()).1);
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if wants(*x) {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    let d = buf(grads, *x, gy.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let s: T = (0..len).map(|j| gy[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += y[at(j)] * (gy[at(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = len_of(*gain);
                let rows = rstd.len();
                let g = nodes[gain.0].value.data();
                if wants(*x) {
                    let dt = T::from_f64(d as f64);
                    let dx = buf(grads, *x, gy.len());
                    for r in 0..rows {
                        let s = r * d;
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gy[s + j] * g[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[s + j];
                        }
                        mean_dh /= dt;
                        mean_dh_h /= dt;
                        for j in 0..d {
                            let dh = gy[s + j] * g[j];
                            dx[s + j] += rstd[r] * (dh - mean_dh - xhat[s + j] * mean_dh_h);
                        }
                    }
                }
                self.affine_param_grads(*gain, *bias, gy, xhat, d, grads);
            }
            Op::BatchNorm { x, gain, bias, xhat, rstd, train } => {
                let d = rstd.len();
                let rows = gy.len() / d;
                let g = nodes[gain.0].value.data();
                if wants(*x) {
                    let dx = buf(grads, *x, gy.len());
                    if *train {
                        let nt = T::from_f64(rows as f64);
                        let mut mean_dh = vec![T::zero(); d];
                        let mut mean_dh_h = vec![T::zero(); d];
                        for (gyr, hr) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                let dh = gyr[j] * g[j];
                                mean_dh[j] += dh;
                                mean_dh_h[j] += dh * hr[j];
                            }
                        }
                        for j in 0..d {
                            mean_dh[j] /= nt;
                            mean_dh_h[j] /= nt;
                        }
                        for ((dxr, gyr), hr) in dx.chunks_exact_mut(d).zip(gy.chunks_exact(d)).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                let dh = gyr[j] * g[j];
                                dxr[j] += rstd[j] * (dh - mean_dh[j] - hr[j] * mean_dh_h[j]);
                            }
                        }
                    } else {
                        for (dxr, gyr) in dx.chunks_exact_mut(d).zip(gy.chunks_exact(d)) {
                            for j in 0..d {
                                dxr[j] += gyr[j] * g[j] * rstd[j];
                            }
                        }
                    }
                }
                self.affine_param_grads(*gain, *bias, gy, xhat, d, grads);
            }
            Op::GatherRows { x, idx } => {
                if wants(*x) {
                    let f = node.value.shape()[1];
                    let d = buf(grads, *x, len_of(*x));
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..f {
                            d[src * f + j] += gy[r * f + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = gy.len() / total;
                let mut off = 0;
                for &(p, w) in parts {
                    if wants(p) {
                        let d = buf(grads, p, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += gy[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (rows, cols) = nodes[x.0].value.dims2()?;
                    let w = node.value.shape()[1];
                    let d = buf(grads, *x, rows * cols);
                    for r in 0..rows {
                        for j in 0..w {
                            d[r * cols + start + j] += gy[r * w + j];
                        }
                    }
                }
            }
            Op::GroupMax { x, argmax } => {
                if wants(*x) {
                    let f = node.value.shape()[1];
                    let d = buf(grads, *x, len_of(*x));
                    for (am, gyr) in argmax.chunks_exact(f).zip(gy.chunks_exact(f)) {
                        for j in 0..f {
                            d[am[j] * f + j] += gyr[j];
                        }
                    }
                }
            }
            Op::WeightedRows { x, offsets, idx, weights } => {
                if wants(*x) {
                    let f = node.value.shape()[1];
                    let d = buf(grads, *x, len_of(*x));
                    for i in 0..offsets.len() - 1 {
                        for p in offsets[i]..offsets[i + 1] {
                            let w = weights[p];
                            for j in 0..f {
                                d[idx[p] * f + j] += w * gy[i * f + j];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let d = buf(grads, *x, len_of(*x));
                    d.iter_mut().for_each(|v| *v += gy[0]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = len_of(*x);
                    let g = gy[0] / T::from_f64(n as f64);
                    let d = buf(grads, *x, n);
                    d.iter_mut().for_each(|v| *v += g);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if wants(*logits) {
                    let n = targets.len();
                    let c = probs.len() / n;
                    let scale = gy[0] / T::from_f64(n as f64);
                    let d = buf(grads, *logits, n * c);
                    for r in 0..n {
                        for j in 0..c {
                            let onehot = if targets[r] == j { T::one() } else { T::zero() };
                            d[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                if wants(*x) {
                    let xv = nodes[x.0].value.data();
                    let dcols = node.value.shape()[1];
                    let d = buf(grads, *x, xv.len());
                    for (r, &n) in norms.iter().enumerate() {
                        let s = r * dcols;
                        let den = n + *eps;
                        for j in 0..dcols {
                            d[s + j] += gy[s + j] / den;
                        }
                        if n > T::zero() {
                            let dot: T = (0..dcols).map(|j| gy[s + j] * xv[s + j]).sum();
                            let coef = dot / (den * den * n);
                            for j in 0..dcols {
                                d[s + j] -= coef * xv[s + j];
                            }
                        }
                    }
                }
            }
            Op::DivScalar { x, s } => {
                let sv = nodes[s.0].value.data()[0];
                if wants(*x) {
                    let d = buf(grads, *x, gy.len());
                    d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g / sv);
                }
                if wants(*s) {
                    let xv = nodes[x.0].value.data();
                    let acc: T = gy.iter().zip(xv).map(|(&g, &v)| g * v).sum();
                    let d = buf(grads, *s, 1);
                    d[0] -= acc / (sv * sv);
                }
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let gyt = Tensor::new(node.value.shape().to_vec(), gy.to_vec())?;
                let gin = backward(&values, &node.value, &gyt);
                for (v, g) in inputs.iter().zip(gin) {
                    if let Some(g) = g {
                        if wants(*v) {
                            if g.numel() != len_of(*v) {
                                return Err(TensorError::dim(
                                    node.name,
                                    "custom backward returned a mis-shaped gradient",
                                ));
                            }
                            let d = buf(grads, *v, g.numel());
                            d.iter_mut().zip(g.data()).for_each(|(d, &x)| *d += x);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn affine_param_grads(&self, gain: Var, bias: Var, gy: &[T], xhat: &[T], d: usize, grads: &mut [Option<Vec<T>>]) {
        if self.nodes[gain.0].requires_grad {
            let dg = grads[gain.0].get_or_insert_with(|| vec![T::zero(); d]);
            for (gr, hr) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                for j in 0..d {
                    dg[j] += gr[j] * hr[j];
                }
            }
        }
        if self.nodes[bias.0].requires_grad {
            let db = grads[bias.0].get_or_insert_with(|| vec![T::zero(); d]);
            for gr in gy.chunks_exact(d) {
                db.iter_mut().zip(gr).for_each(|(d, &g)| *d += g);
            }
        }
    }
}
