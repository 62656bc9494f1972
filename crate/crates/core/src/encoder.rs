//! Hierarchical point feature extractor: set-abstraction levels down,
//! feature-propagation levels back up to every input point, then a shared
//! per-point projection with batch norm.
//!
//! `encode` works on the lexicographically sorted, normalized cloud and
//! scatters the result back to the caller's order, so its output depends
//! only on the set of points and not on their order.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::geometry::{ball_query, farthest_point_sample, pad_groups, three_nn_weights, Point, PointCloud};
use crate::nn::{self, Mode};
use crate::params::{Init, ParamStore};
use crate::tensor::{Element, Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetAbstractionSpec {
    pub n_centroids: usize,
    pub radius: f64,
    pub max_neighbors: usize,
    pub mlp: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub levels: Vec<SetAbstractionSpec>,
    /// Propagation MLPs, coarsest level first.
    pub fp_mlps: Vec<Vec<usize>>,
    /// Output width `d_P`.
    pub d_p: usize,
}

impl EncoderConfig {
    /// Two single-scale levels (128/32 centroids) and two propagation levels.
    pub fn desk(d_p: usize) -> Self {
        EncoderConfig {
            levels: vec![
                SetAbstractionSpec {
                    n_centroids: 128,
                    radius: 0.2,
                    max_neighbors: 32,
                    mlp: vec![32, 32, 64],
                },
                SetAbstractionSpec {
                    n_centroids: 32,
                    radius: 0.4,
                    max_neighbors: 32,
                    mlp: vec![64, 64, 128],
                },
            ],
            fp_mlps: vec![vec![128, 128], vec![128, d_p]],
            d_p,
        }
    }

    /// One level, four centroids; small enough for finite differences.
    pub fn micro(d_p: usize) -> Self {
        EncoderConfig {
            levels: vec![SetAbstractionSpec {
                n_centroids: 4,
                radius: 0.6,
                max_neighbors: 4,
                mlp: vec![6, 8],
            }],
            fp_mlps: vec![vec![d_p]],
            d_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(TensorError::invalid("encoder config", d));
        if self.levels.is_empty() {
            return bad("at least one set-abstraction level is required".into());
        }
        for (i, w) in self.levels.windows(2).enumerate() {
            if w[1].n_centroids >= w[0].n_centroids {
                return bad(format!("n_centroids must decrease (levels {i} and {})", i + 1));
            }
            if w[1].radius <= w[0].radius {
                return bad(format!("radii must increase (levels {i} and {})", i + 1));
            }
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.n_centroids == 0 || l.max_neighbors == 0 || l.radius.is_nan() || l.radius <= 0.0 || l.mlp.is_empty() {
                return bad(format!("level {i} is degenerate"));
            }
        }
        if self.fp_mlps.len() != self.levels.len() || self.fp_mlps.iter().any(Vec::is_empty) {
            return bad("one non-empty propagation MLP per level is required".into());
        }
        if self.fp_mlps.last().and_then(|m| m.last()) != Some(&self.d_p) {
            return bad(format!("final propagation width must equal d_p = {}", self.d_p));
        }
        if [&self.levels.iter().flat_map(|l| l.mlp.iter()).copied().collect::<Vec<_>>()[..], &self.fp_mlps.concat()[..]]
            .concat()
            .contains(&0)
        {
            return bad("zero-width layer".into());
        }
        Ok(())
    }

    /// Smallest cloud the configuration accepts.
    pub fn min_points(&self) -> usize {
        self.levels[0].n_centroids
    }

    /// Feature widths entering each propagation level, coarsest first.
    fn fp_inputs(&self) -> Vec<usize> {
        let n = self.levels.len();
        let mut widths = Vec::with_capacity(n);
        let mut coarse = *self.levels[n - 1].mlp.last().unwrap();
        for j in 0..n {
            // level j propagates from SA output (n-1-j) to the level below
            let target = n - 1 - j;
            let skip = if target == 0 { 3 } else { *self.levels[target - 1].mlp.last().unwrap() };
            widths.push(coarse + skip);
            coarse = *self.fp_mlps[j].last().unwrap();
        }
        widths
    }
}

/// Per-point features: backbone output `h_p` and refined `h_c`, both `N×d_P`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub h_p: Var,
    pub h_c: Var,
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn init_mlp<T: Element>(ps: &mut ParamStore<T>, init: &mut Init, prefix: &str, d_in: usize, widths: &[usize]) {
    let mut d = d_in;
    for (j, &w) in widths.iter().enumerate() {
        nn::init_linear(ps, init, &format!("{prefix}.mlp{j}"), d, w, he_std(d));
        nn::init_batch_norm(ps, &format!("{prefix}.bn{j}"), w);
        d = w;
    }
}

pub fn init_encoder<T: Element>(ps: &mut ParamStore<T>, init: &mut Init, cfg: &EncoderConfig) {
    let mut d = 0;
    for (i, level) in cfg.levels.iter().enumerate() {
        init_mlp(ps, init, &format!("enc.sa{i}"), d + 3, &level.mlp);
        d = *level.mlp.last().unwrap();
    }
    for (j, (mlp, d_in)) in cfg.fp_mlps.iter().zip(cfg.fp_inputs()).enumerate() {
        init_mlp(ps, init, &format!("enc.fp{j}"), d_in, mlp);
    }
    nn::init_linear(ps, init, "enc.conv", cfg.d_p, cfg.d_p, he_std(cfg.d_p));
    nn::init_batch_norm(ps, "enc.conv_bn", cfg.d_p);
}

/// Shared per-point MLP: linear, batch norm and ReLU for each width.
pub fn shared_mlp<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    mut x: Var,
    depth: usize,
    mode: Mode,
) -> Result<Var> {
    for j in 0..depth {
        x = nn::linear(g, ps, &format!("{prefix}.mlp{j}"), x)?;
        x = nn::batch_norm(g, ps, &format!("{prefix}.bn{j}"), x, mode)?;
        x = g.relu(x)?;
    }
    Ok(x)
}

fn coords_tensor<T: Element>(points: &[Point]) -> Tensor<T> {
    Tensor::from_fn(&[points.len(), 3], |i| T::from_f64(points[i / 3][i % 3]))
}

/// One set-abstraction level over a batch of clouds whose features are
/// stacked row-wise in cloud order. Returns each cloud's centroids and the
/// stacked `(B·M)×f′` pooled features.
#[allow(clippy::too_many_arguments)]
pub fn set_abstraction<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    clouds: &[PointCloud],
    feats: Option<Var>,
    spec: &SetAbstractionSpec,
    mode: Mode,
) -> Result<(Vec<Vec<Point>>, Var)> {
    let total: usize = clouds.iter().map(PointCloud::len).sum();
    if let Some(f) = feats {
        if g.value(f).dims2()?.0 != total {
            return Err(TensorError::dim(
                "set_abstraction",
                format!("{total} points vs features {:?}", g.shape(f)),
            ));
        }
    }
    let k = spec.max_neighbors;
    let mut all_centers = Vec::with_capacity(clouds.len());
    let mut flat = Vec::new();
    let mut rel = Vec::new();
    let mut base = 0;
    for pc in clouds {
        let centers_idx = farthest_point_sample(pc, spec.n_centroids)?;
        let centers: Vec<Point> = centers_idx.iter().map(|&i| pc.coords[i]).collect();
        let groups = ball_query(&centers, pc, spec.radius, k)?;
        for (r, &i) in pad_groups(&groups, k).iter().enumerate() {
            let c = centers[r / k];
            let p = pc.coords[i];
            rel.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            flat.push(base + i);
        }
        base += pc.len();
        all_centers.push(centers);
    }
    let rel = g.constant(coords_tensor(&rel))?;
    let input = match feats {
        Some(f) => {
            let nf = g.gather_rows(f, &flat)?;
            g.concat_cols(&[rel, nf])?
        }
        None => rel,
    };
    let h = shared_mlp(g, ps, prefix, input, spec.mlp.len(), mode)?;
    let pooled = g.group_max(h, k)?;
    Ok((all_centers, pooled))
}

/// Interpolates `source_feats` onto `targets` by inverse distance over the
/// three nearest sources, appends `skip` and runs the shared MLP. Both
/// feature matrices stack the clouds of the batch row-wise.
#[allow(clippy::too_many_arguments)]
pub fn feature_propagation<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    targets: &[Vec<Point>],
    sources: &[Vec<Point>],
    source_feats: Var,
    skip: Option<Var>,
    depth: usize,
    mode: Mode,
) -> Result<Var> {
    let interpolated = interpolate(g, targets, sources, source_feats)?;
    let input = match skip {
        Some(s) => g.concat_cols(&[interpolated, s])?,
        None => interpolated,
    };
    shared_mlp(g, ps, prefix, input, depth, mode)
}

/// Inverse-distance interpolation alone (no MLP); each cloud's targets
/// draw only on that cloud's sources.
pub fn interpolate<T: Element>(
    g: &mut Graph<T>,
    targets: &[Vec<Point>],
    sources: &[Vec<Point>],
    source_feats: Var,
) -> Result<Var> {
    let total: usize = sources.iter().map(Vec::len).sum();
    if targets.len() != sources.len() || g.value(source_feats).dims2()?.0 != total {
        return Err(TensorError::dim(
            "feature_propagation",
            format!("{total} sources vs features {:?}", g.shape(source_feats)),
        ));
    }
    let (mut offsets, mut indices, mut weights) = (vec![0], Vec::new(), Vec::new());
    let mut base = 0;
    for (t, s) in targets.iter().zip(sources) {
        let w = three_nn_weights(t, s)?;
        let start = indices.len();
        offsets.extend(w.offsets[1..].iter().map(|&o| start + o));
        indices.extend(w.indices.iter().map(|&i| base + i));
        weights.extend(w.weights.iter().map(|&v| T::from_f64(v)));
        base += s.len();
    }
    g.weighted_rows(source_feats, &offsets, &indices, &weights)
}

fn check_sizes(cfg: &EncoderConfig, n: usize) -> Result<()> {
    let mut available = n;
    for (i, level) in cfg.levels.iter().enumerate() {
        if level.n_centroids > available {
            return Err(TensorError::invalid(
                "encode",
                format!("level {i} needs {} centroids but only {available} points are available", level.n_centroids),
            ));
        }
        available = level.n_centroids;
    }
    Ok(())
}

/// Full encoder on one cloud.
pub fn encode<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cfg: &EncoderConfig,
    pc: &PointCloud,
    mode: Mode,
) -> Result<EncoderOutput> {
    Ok(encode_batch(g, ps, cfg, &[pc], mode)?.remove(0))
}

/// Full encoder on several clouds at once. Every layer runs on the
/// row-stacked batch, so training-mode batch norms see the statistics of
/// all clouds together; in eval mode each output equals [`encode`] on that
/// cloud alone.
pub fn encode_batch<T: Element>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cfg: &EncoderConfig,
    pcs: &[&PointCloud],
    mode: Mode,
) -> Result<Vec<EncoderOutput>> {
    if pcs.is_empty() {
        return Err(TensorError::invalid("encode", "empty batch"));
    }
    for pc in pcs {
        check_sizes(cfg, pc.len())?;
    }

    let orders: Vec<Vec<usize>> = pcs.iter().map(|pc| pc.canonical_order()).collect();
    let clouds: Vec<PointCloud> = pcs.iter().zip(&orders).map(|(pc, o)| pc.select(o).normalized()).collect();

    let stacked: Vec<Point> = clouds.iter().flat_map(|c| c.coords.iter().copied()).collect();
    let xyz = g.constant(coords_tensor(&stacked))?;
    let mut level_coords: Vec<Vec<Vec<Point>>> = vec![clouds.iter().map(|c| c.coords.clone()).collect()];
    let mut level_feats: Vec<Option<Var>> = vec![None];
    let mut current = clouds;
    for (i, spec) in cfg.levels.iter().enumerate() {
        let feats = level_feats[i];
        let (centers, pooled) = set_abstraction(g, ps, &format!("enc.sa{i}"), &current, feats, spec, mode)?;
        current = centers.iter().map(|c| PointCloud { coords: c.clone() }).collect();
        level_coords.push(centers);
        level_feats.push(Some(pooled));
    }

    let depth = cfg.levels.len();
    let mut feats = level_feats[depth].expect("deepest level has features");
    for (j, mlp) in cfg.fp_mlps.iter().enumerate() {
        let target = depth - 1 - j;
        let skip = if target == 0 { Some(xyz) } else { level_feats[target] };
        feats = feature_propagation(
            g,
            ps,
            &format!("enc.fp{j}"),
            &level_coords[target],
            &level_coords[target + 1],
            feats,
            skip,
            mlp.len(),
            mode,
        )?;
    }

    let conv = nn::linear(g, ps, "enc.conv", feats)?;
    let conv = nn::batch_norm(g, ps, "enc.conv_bn", conv, mode)?;
    let h_c = g.relu(conv)?;

    // split the batch and return to each caller's point order
    let mut out = Vec::with_capacity(pcs.len());
    let mut base = 0;
    for order in &orders {
        let mut rows = vec![0usize; order.len()];
        for (pos, &orig) in order.iter().enumerate() {
            rows[orig] = base + pos;
        }
        base += order.len();
        out.push(EncoderOutput {
            h_p: g.gather_rows(feats, &rows)?,
            h_c: g.gather_rows(h_c, &rows)?,
        });
    }
    Ok(out)
}
