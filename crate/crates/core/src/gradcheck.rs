//! Central finite-difference verification of every differentiable op and
//! of the full model, in float64.
//!
//! Each check reduces an op's output to a scalar through fixed random
//! weights, so every output element contributes a distinct cotangent. The
//! error of one input (or parameter) tensor is
//! `max|analytic − numeric| / max(max|analytic|, max|numeric|)`, taken as
//! an absolute difference when both gradients are below `1e-7`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aqm::{self, AqmConfig};
use crate::autograd::{CustomBackward, Graph, Var};
use crate::geometry::PointCloud;
use crate::head::{self, HeadVariant};
use crate::lm::{self, LMConfig};
use crate::model::{Model, ModelConfig};
use crate::nn::{self, Mode};
use crate::params::{Init, ParamKind, ParamStore};
use crate::tensor::{Result, Tensor};
use crate::text::Vocabulary;

/// Finite-difference step.
pub const STEP: f64 = 1e-6;
pub const OPS_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Random instances per op in the ops suite.
pub const OP_INSTANCES: usize = 20;
const TINY: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ops" => Ok(Scope::Ops),
            "model" => Ok(Scope::Model),
            other => Err(format!("unknown scope `{other}`; valid scopes: ops, model")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpResult {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub scope: Scope,
    pub tolerance: f64,
    pub passed: bool,
    pub ops: Vec<OpResult>,
}

impl GradcheckReport {
    fn new(scope: Scope, tolerance: f64, ops: Vec<OpResult>) -> Self {
        let passed = ops.iter().all(|o| o.passed);
        GradcheckReport {
            scope,
            tolerance,
            passed,
            ops,
        }
    }

    pub fn failures(&self) -> Vec<&str> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.op.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Adds an op with a deliberately wrong backward rule (negative control).
    pub inject_fault: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            inject_fault: false,
        }
    }
}

/// Relative error between two gradients of the same tensor.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < TINY {
        diff
    } else {
        diff / scale
    }
}

type Forward<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn weighted_loss(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone())?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn output_weights(g: &mut Graph<f64>, inputs: &[Tensor<f64>], f: &Forward, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(g, &vars)?;
    Ok(random_tensor(rng, g.shape(out)))
}

/// Worst relative error over the input tensors of one instance.
pub fn check_inputs(inputs: &[Tensor<f64>], f: &Forward, rng: &mut ChaCha8Rng) -> Result<f64> {
    let weights = output_weights(&mut Graph::new(), inputs, f, rng)?;
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let l = weighted_loss(&mut g, out, &weights)?;
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let l = weighted_loss(&mut g, out, &weights)?;
    let grads = g.backward(l)?;

    let mut worst: f64 = 0.0;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = inputs.to_vec();
        for i in 0..inputs[k].numel() {
            let x = inputs[k].data()[i];
            probe[k].data_mut()[i] = x + STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x - STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x;
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Standard normal values pushed at least `margin` away from zero, for ops
/// with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        v + margin.copysign(v)
    })
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn some_true(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    let keep = rng.random_range(0..n);
    m[keep] = true;
    m
}

/// Square of the input with a backward rule off by a factor of 1.5.
fn faulty_square(g: &mut Graph<f64>, x: Var) -> Result<Var> {
    let vx = g.value(x);
    let value = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| v * v).collect())?;
    let backward: CustomBackward<f64> = Box::new(|inputs, _, gy| {
        let d = inputs[0].data().iter().zip(gy.data()).map(|(&x, &g)| 3.0 * x * g).collect();
        vec![Tensor::new(gy.shape().to_vec(), d).ok()]
    });
    g.custom("faulty_square", &[x], value, backward)
}

type Case = (Vec<Tensor<f64>>, Box<Forward<'static>>);

fn micro_lm() -> LMConfig {
    LMConfig::micro(8)
}

fn small_store(rng: &mut ChaCha8Rng, build: impl FnOnce(&mut ParamStore<f64>, &mut Init)) -> ParamStore<f64> {
    let mut inner = ChaCha8Rng::seed_from_u64(rng.random());
    let mut init = Init { rng: &mut inner };
    let mut ps = ParamStore::new();
    build(&mut ps, &mut init);
    jitter_params(&mut ps, &mut inner, 0.3);
    ps
}

/// Adds Gaussian noise to every parameter so that zero-initialized
/// projections and unit gains do not hide gradient paths.
fn jitter_params(ps: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, std: f64) {
    let names: Vec<String> = ps
        .iter()
        .filter(|(_, e)| e.kind == ParamKind::Param)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let t = ps.tensor_mut(&name).expect("listed parameter");
        for v in t.data_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn op_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let (m, n, k) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 4));
    match name {
        "matmul" => (
            vec![random_tensor(rng, &[m, k]), random_tensor(rng, &[k, n])],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        "matmul_nt" => (
            vec![random_tensor(rng, &[m, k]), random_tensor(rng, &[n, k])],
            Box::new(|g, v| g.matmul_nt(v[0], v[1])),
        ),
        "add" => (
            vec![random_tensor(rng, &[m, n]), random_tensor(rng, &[m, n])],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        "sub" => (
            vec![random_tensor(rng, &[m, n]), random_tensor(rng, &[m, n])],
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        "mul" => (
            vec![random_tensor(rng, &[m, n]), random_tensor(rng, &[m, n])],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        "add_bias" => (
            vec![random_tensor(rng, &[m, n]), random_tensor(rng, &[n])],
            Box::new(|g, v| g.add_bias(v[0], v[1])),
        ),
        "scale" => {
            let f: f64 = rng.sample(StandardNormal);
            (vec![random_tensor(rng, &[m, n])], Box::new(move |g, v| g.scale(v[0], f)))
        }
        "relu" => (vec![away_from_zero(rng, &[m, n], 0.01)], Box::new(|g, v| g.relu(v[0]))),
        "gelu" => (vec![random_tensor(rng, &[m, n])], Box::new(|g, v| g.gelu(v[0]))),
        "exp" => (vec![random_tensor(rng, &[m, n])], Box::new(|g, v| g.exp(v[0]))),
        "softmax" => {
            let axis = rng.random_range(0..2);
            (vec![random_tensor(rng, &[m + 1, n])], Box::new(move |g, v| g.softmax(v[0], axis)))
        }
        "softmax_masked" => {
            let mask = some_true(rng, n);
            (
                vec![random_tensor(rng, &[m, n])],
                Box::new(move |g, v| g.softmax_masked(v[0], 1, Some(&mask))),
            )
        }
        "layer_norm" => (
            vec![random_tensor(rng, &[m, n + 1]), random_tensor(rng, &[n + 1]), random_tensor(rng, &[n + 1])],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], nn::LN_EPS)),
        ),
        "batch_norm_train" => (
            vec![random_tensor(rng, &[m + 2, n]), random_tensor(rng, &[n]), random_tensor(rng, &[n])],
            Box::new(|g, v| g.batch_norm_train(v[0], v[1], v[2], nn::BN_EPS, "gradcheck")),
        ),
        "batch_norm_eval" => {
            let mean: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let var: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
            (
                vec![random_tensor(rng, &[m, n]), random_tensor(rng, &[n]), random_tensor(rng, &[n])],
                Box::new(move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, nn::BN_EPS)),
            )
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..dim(rng, 1, 7)).map(|_| rng.random_range(0..m)).collect();
            (vec![random_tensor(rng, &[m, n])], Box::new(move |g, v| g.gather_rows(v[0], &idx)))
        }
        "concat_cols" => (
            vec![random_tensor(rng, &[m, n]), random_tensor(rng, &[m, k]), random_tensor(rng, &[m, 2])],
            Box::new(|g, v| g.concat_cols(v)),
        ),
        "slice_cols" => {
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=n - start);
            (vec![random_tensor(rng, &[m, n])], Box::new(move |g, v| g.slice_cols(v[0], start, len)))
        }
        "group_max" => {
            let group = dim(rng, 1, 4);
            (vec![random_tensor(rng, &[m * group, n])], Box::new(move |g, v| g.group_max(v[0], group)))
        }
        "weighted_rows" => {
            let (mut offsets, mut idx, mut w) = (vec![0], Vec::new(), Vec::new());
            for _ in 0..dim(rng, 1, 5) {
                for _ in 0..dim(rng, 1, 3) {
                    idx.push(rng.random_range(0..m));
                    w.push(rng.random_range(0.0..1.0));
                }
                offsets.push(idx.len());
            }
            (
                vec![random_tensor(rng, &[m, n])],
                Box::new(move |g, v| g.weighted_rows(v[0], &offsets, &idx, &w)),
            )
        }
        "sum" => (vec![random_tensor(rng, &[m, n])], Box::new(|g, v| g.sum(v[0]))),
        "mean" => (vec![random_tensor(rng, &[m, n])], Box::new(|g, v| g.mean(v[0]))),
        "cross_entropy" => {
            let c = n + 1;
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
            (
                vec![random_tensor(rng, &[m, c])],
                Box::new(move |g, v| g.cross_entropy(v[0], &targets)),
            )
        }
        "loss" => {
            let mask: Vec<u8> = (0..m + 2).map(|_| rng.random_range(0..2)).collect();
            (vec![random_tensor(rng, &[m + 2, 2])], Box::new(move |g, v| head::loss(g, v[0], &mask)))
        }
        "l2_normalize_rows" => (
            vec![random_tensor(rng, &[m, n + 1])],
            Box::new(|g, v| g.l2_normalize_rows(v[0], head::COS_EPS)),
        ),
        "div_scalar" => (
            vec![random_tensor(rng, &[m, n]), away_from_zero(rng, &[1], 0.5)],
            Box::new(|g, v| g.div_scalar(v[0], v[1])),
        ),
        "composed_mlp" => (
            vec![
                random_tensor(rng, &[m, k]),
                random_tensor(rng, &[k, n]),
                random_tensor(rng, &[n]),
                random_tensor(rng, &[n, 2]),
            ],
            Box::new(|g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add_bias(h, v[2])?;
                let h = g.gelu(h)?;
                g.matmul(h, v[3])
            }),
        ),
        "attention" => {
            let heads = dim(rng, 1, 2);
            let d = 2 * heads;
            let b = dim(rng, 1, 4);
            let mask = some_true(rng, b);
            (
                vec![random_tensor(rng, &[m, d]), random_tensor(rng, &[b, d]), random_tensor(rng, &[b, d])],
                Box::new(move |g, v| Ok(nn::attention(g, v[0], v[1], v[2], heads, Some(&mask))?.out)),
            )
        }
        "lm_block" => {
            let cfg = micro_lm();
            let ps = small_store(rng, |ps, init| lm::init_block(ps, init, &lm::block_prefix(0), &cfg));
            let mask = [true, true, false];
            (
                vec![random_tensor(rng, &[3, cfg.d_model])],
                Box::new(move |g, v| lm::lm_block(g, &ps, &lm::block_prefix(0), v[0], &mask, &cfg)),
            )
        }
        "aqm_block" => {
            let cfg = AqmConfig {
                lm: micro_lm(),
                d_p: 8,
                gate_zero_init: false,
            };
            let ps = small_store(rng, |ps, init| {
                lm::init_block(ps, init, &lm::block_prefix(0), &cfg.lm);
                aqm::init_aqm(ps, init, &cfg);
            });
            let n_pts = dim(rng, 2, 5);
            (
                vec![random_tensor(rng, &[3, cfg.lm.d_model]), random_tensor(rng, &[n_pts, cfg.d_p])],
                Box::new(move |g, v| {
                    let kv = nn::project_kv(g, &ps, &aqm::xattn_prefix(0), v[1])?;
                    Ok(aqm::aqm_block(g, &ps, &cfg, 0, v[0], kv, &[true, true, true])?.1)
                }),
            )
        }
        "decode" => {
            let (d_p, d_lm) = (8, 8);
            let ps = small_store(rng, |ps, init| head::init_decoder(ps, init, d_p, d_lm, d_lm));
            let mask = [true, true, false];
            (
                vec![random_tensor(rng, &[5, d_p]), random_tensor(rng, &[3, d_lm])],
                Box::new(move |g, v| head::decode(g, &ps, v[0], v[1], &mask, 2)),
            )
        }
        "cosine_baseline" => {
            let d_p = 8;
            let ps = small_store(rng, |ps, init| head::init_cosine(ps, init, 8, d_p));
            (
                vec![random_tensor(rng, &[5, d_p]), random_tensor(rng, &[1, d_p])],
                Box::new(move |g, v| head::cosine_baseline(g, &ps, v[0], v[1])),
            )
        }
        "faulty_square" => (vec![random_tensor(rng, &[m, n])], Box::new(|g, v| faulty_square(g, v[0]))),
        other => unreachable!("no gradcheck case for `{other}`"),
    }
}

/// Ops covered by the ops suite.
pub const OPS: [&str; 33] = [
    "matmul",
    "matmul_nt",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "relu",
    "gelu",
    "exp",
    "softmax",
    "softmax_masked",
    "layer_norm",
    "batch_norm_train",
    "batch_norm_eval",
    "gather_rows",
    "concat_cols",
    "slice_cols",
    "group_max",
    "weighted_rows",
    "sum",
    "mean",
    "cross_entropy",
    "loss",
    "l2_normalize_rows",
    "div_scalar",
    "composed_mlp",
    "attention",
    "lm_block",
    "aqm_block",
    "decode",
    "cosine_baseline",
    "faulty_square",
];

/// Checks every op on [`OP_INSTANCES`] random instances.
pub fn run_ops(opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    for (i, &op) in OPS.iter().enumerate() {
        if op == "faulty_square" && !opts.inject_fault {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(i as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..OP_INSTANCES {
            let (inputs, f) = op_case(op, &mut rng);
            worst = worst.max(check_inputs(&inputs, f.as_ref(), &mut rng)?);
        }
        results.push(OpResult {
            op: op.to_string(),
            instances: OP_INSTANCES,
            max_rel_error: worst,
            passed: worst < OPS_TOLERANCE,
        });
    }
    Ok(GradcheckReport::new(Scope::Ops, OPS_TOLERANCE, results))
}

/// The gradient-check model: micro LM and encoder at float64.
pub fn micro_model_config(head: HeadVariant) -> ModelConfig {
    let vocab = Vocabulary::from_words(&crate::dataset::AFFORDANCES[..]).expect("fixed vocabulary");
    ModelConfig::micro(vocab, head)
}

/// Points of a gradient-check cloud.
pub const MODEL_POINTS: usize = 16;

/// Worst relative error over all trainable parameter tensors of a jittered
/// micro model with the given head, on one random cloud and query.
pub fn check_model(head: HeadVariant, mode: Mode, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut model = Model::<f64>::new(micro_model_config(head), rng.random())?;
    jitter_params(&mut model.params, rng, 0.3);
    let coords: Vec<[f64; 3]> = (0..MODEL_POINTS)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let pc = PointCloud::new(coords)?;
    let words = model.config.vocabulary.words().to_vec();
    let word = &words[rng.random_range(0..words.len())];
    let tokens = model.tokenize(word).map_err(|e| crate::TensorError::invalid("gradcheck", e.to_string()))?;
    let mask: Vec<u8> = (0..MODEL_POINTS).map(|_| rng.random_range(0..2)).collect();

    let loss_of = |m: &Model<f64>, g: &mut Graph<f64>| -> Result<Var> {
        let logits = m.forward(g, &pc, std::slice::from_ref(&tokens), mode)?;
        head::loss(g, logits[0], &mask)
    };
    let mut g = Graph::new();
    let l = loss_of(&model, &mut g)?;
    let grads = g.backward(l)?;
    let grads = g.param_grads(&grads);

    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (name, analytic) in &grads {
        let base = model.params.get(name)?.clone();
        let mut numeric = Vec::with_capacity(base.numel());
        for i in 0..base.numel() {
            let x = base.data()[i];
            let mut value = |delta: f64| -> Result<f64> {
                probe.params.tensor_mut(name)?.data_mut()[i] = x + delta;
                let mut g = Graph::inference();
                let l = loss_of(&probe, &mut g)?;
                g.value(l).item()
            };
            let up = value(STEP)?;
            let down = value(-STEP)?;
            probe.params.tensor_mut(name)?.data_mut()[i] = x;
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

/// End-to-end check of each head variant in both modes.
pub fn run_model(opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    for (i, head) in HeadVariant::ALL.into_iter().enumerate() {
        for (j, mode) in [Mode::Train, Mode::Eval].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream((2 * i + j) as u64);
            let err = check_model(head, mode, &mut rng)?;
            let mode_name = if mode == Mode::Train { "train" } else { "eval" };
            results.push(OpResult {
                op: format!("model/{head}/{mode_name}"),
                instances: 1,
                max_rel_error: err,
                passed: err < MODEL_TOLERANCE,
            });
        }
    }
    if opts.inject_fault {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let (inputs, f) = op_case("faulty_square", &mut rng);
        let err = check_inputs(&inputs, f.as_ref(), &mut rng)?;
        results.push(OpResult {
            op: "faulty_square".into(),
            instances: 1,
            max_rel_error: err,
            passed: err < MODEL_TOLERANCE,
        });
    }
    Ok(GradcheckReport::new(Scope::Model, MODEL_TOLERANCE, results))
}

pub fn run(scope: Scope, opts: GradcheckOptions) -> Result<GradcheckReport> {
    match scope {
        Scope::Ops => run_ops(opts),
        Scope::Model => run_model(opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(&[1e-9], &[0.0]), 1e-9);
    }

    #[test]
    fn detects_wrong_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (inputs, f) = op_case("faulty_square", &mut rng);
        assert!(check_inputs(&inputs, f.as_ref(), &mut rng).unwrap() > 0.1);
    }

    #[test]
    fn matmul_and_layer_norm_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for op in ["matmul", "layer_norm", "softmax"] {
            let (inputs, f) = op_case(op, &mut rng);
            assert!(check_inputs(&inputs, f.as_ref(), &mut rng).unwrap() < OPS_TOLERANCE, "{op}");
        }
    }
}
