//! Point cloud type and the index-level geometry used by the encoder:
//! farthest point sampling, ball query and inverse-distance neighbours.

use std::cmp::Ordering;

use crate::tensor::{Result, TensorError};

pub type Point = [f64; 3];

/// `N×3` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<Point>,
}

fn sq_dist(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Lexicographic order on `(x, y, z)`.
pub fn lex_cmp(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

impl PointCloud {
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        if coords.is_empty() {
            return Err(TensorError::invalid("point cloud", "no points"));
        }
        if coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(TensorError::invalid("point cloud", "non-finite coordinate"));
        }
        Ok(PointCloud { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.coords.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.coords {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Largest distance from the centroid.
    pub fn radius(&self) -> f64 {
        let c = self.centroid();
        self.coords.iter().map(|p| distance(p, &c)).fold(0.0, f64::max)
    }

    /// Centered at the centroid and scaled so the farthest point lies on
    /// the unit sphere. A single-point cloud is only centered.
    pub fn normalized(&self) -> PointCloud {
        let c = self.centroid();
        let r = self.radius();
        let s = if r > 0.0 { 1.0 / r } else { 1.0 };
        PointCloud {
            coords: self
                .coords
                .iter()
                .map(|p| [(p[0] - c[0]) * s, (p[1] - c[1]) * s, (p[2] - c[2]) * s])
                .collect(),
        }
    }

    /// Indices sorting the points lexicographically, ties by index.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.coords.len()).collect();
        idx.sort_by(|&a, &b| lex_cmp(&self.coords[a], &self.coords[b]).then(a.cmp(&b)));
        idx
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
        }
    }
}

/// Greedy max-min sampling of `k` distinct indices.
///
/// The first pick is the point farthest from the centroid (ties: smallest
/// `(x, y, z)`, then smallest index); each later pick maximizes the distance
/// to the already chosen set (ties: smallest index).
pub fn farthest_point_sample(pc: &PointCloud, k: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if k == 0 || k > n {
        return Err(TensorError::invalid(
            "farthest_point_sample",
            format!("cannot pick {k} of {n} points"),
        ));
    }
    let c = pc.centroid();
    let mut first = 0;
    let mut best = sq_dist(&pc.coords[0], &c);
    for i in 1..n {
        let d = sq_dist(&pc.coords[i], &c);
        if d > best || (d == best && lex_cmp(&pc.coords[i], &pc.coords[first]) == Ordering::Less) {
            first = i;
            best = d;
        }
    }
    let mut chosen = Vec::with_capacity(k);
    chosen.push(first);
    let mut min_d: Vec<f64> = pc.coords.iter().map(|p| sq_dist(p, &pc.coords[first])).collect();
    min_d[first] = f64::NEG_INFINITY;
    while chosen.len() < k {
        // chosen points are marked with -inf, so the first maximum is the
        // smallest unchosen index among the farthest
        let mut pick = usize::MAX;
        let mut far = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > far {
                far = d;
                pick = i;
            }
        }
        chosen.push(pick);
        let p = pc.coords[pick];
        min_d[pick] = f64::NEG_INFINITY;
        for (i, d) in min_d.iter_mut().enumerate() {
            if *d != f64::NEG_INFINITY {
                *d = d.min(sq_dist(&pc.coords[i], &p));
            }
        }
    }
    Ok(chosen)
}

/// For every center, the indices within `radius` in ascending order,
/// truncated to `max_k`. An empty ball falls back to the single nearest
/// point (ties: smallest index).
pub fn ball_query(centers: &[Point], pc: &PointCloud, radius: f64, max_k: usize) -> Result<Vec<Vec<usize>>> {
    if radius.is_nan() || radius <= 0.0 || max_k == 0 {
        return Err(TensorError::invalid(
            "ball_query",
            format!("radius {radius} and max_k {max_k} must be positive"),
        ));
    }
    let r2 = radius * radius;
    Ok(centers
        .iter()
        .map(|c| {
            let mut group: Vec<usize> = (0..pc.len())
                .filter(|&i| sq_dist(&pc.coords[i], c) <= r2)
                .take(max_k)
                .collect();
            if group.is_empty() {
                let mut best = 0;
                for i in 1..pc.len() {
                    if sq_dist(&pc.coords[i], c) < sq_dist(&pc.coords[best], c) {
                        best = i;
                    }
                }
                group.push(best);
            }
            group
        })
        .collect())
}

/// Pads every group to `max_k` members by repeating its first member and
/// flattens the result.
pub fn pad_groups(groups: &[Vec<usize>], max_k: usize) -> Vec<usize> {
    let mut flat = Vec::with_capacity(groups.len() * max_k);
    for g in groups {
        flat.extend_from_slice(&g[..g.len().min(max_k)]);
        flat.extend(std::iter::repeat_n(g[0], max_k.saturating_sub(g.len())));
    }
    flat
}

/// Sparse inverse-distance interpolation weights from `sources` onto
/// `targets` in CSR form.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation {
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Uses the `min(3, M)` nearest sources of each target (ties: smallest
/// index) with weights `(1/(d+1e-8)) / Σ 1/(d+1e-8)`.
pub fn three_nn_weights(targets: &[Point], sources: &[Point]) -> Result<Interpolation> {
    if sources.is_empty() {
        return Err(TensorError::invalid("feature_propagation", "no source points"));
    }
    let k = sources.len().min(3);
    let mut out = Interpolation {
        offsets: vec![0],
        indices: Vec::with_capacity(targets.len() * k),
        weights: Vec::with_capacity(targets.len() * k),
    };
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for t in targets {
        best.clear();
        for (i, s) in sources.iter().enumerate() {
            let d = sq_dist(t, s);
            if best.len() < k || d < best[best.len() - 1].0 {
                let pos = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(pos, (d, i));
                best.truncate(k);
            }
        }
        let inv: Vec<f64> = best.iter().map(|&(d2, _)| 1.0 / (d2.sqrt() + 1e-8)).collect();
        let total: f64 = inv.iter().sum();
        for (&(_, i), w) in best.iter().zip(inv) {
            out.indices.push(i);
            out.weights.push(w / total);
        }
        out.offsets.push(out.indices.len());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> PointCloud {
        PointCloud::new(vec![[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap()
    }

    #[test]
    fn fps_square_tie_breaks() {
        let pc = square();
        assert_eq!(farthest_point_sample(&pc, 1).unwrap(), vec![3]);
        assert_eq!(farthest_point_sample(&pc, 2).unwrap(), vec![3, 0]);
        let mut all = farthest_point_sample(&pc, 4).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sample(&pc, 5).is_err());
    }

    #[test]
    fn fps_with_duplicates_stays_distinct() {
        let pc = PointCloud::new(vec![[0.0; 3]; 5]).unwrap();
        let mut got = farthest_point_sample(&pc, 5).unwrap();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn ball_query_rules() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]).unwrap();
        let g = ball_query(&[[0.0, 0.0, 0.0]], &pc, 1.1, 8).unwrap();
        assert_eq!(g, vec![vec![0, 1, 2]]);
        let g = ball_query(&[[5.0, 5.0, 0.0]], &pc, 0.5, 8).unwrap();
        assert_eq!(g, vec![vec![3]]);
        let g = ball_query(&[[0.0, 0.0, 0.0]], &pc, f64::INFINITY, 2).unwrap();
        assert_eq!(g, vec![vec![0, 1]]);
        assert_eq!(pad_groups(&[vec![2, 5], vec![7]], 3), vec![2, 5, 2, 7, 7, 7]);
    }

    #[test]
    fn coincident_target_takes_source_weight() {
        let w = three_nn_weights(&[[1.0, 0.0, 0.0]], &[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();
        let at = w.indices.iter().position(|&i| i == 1).unwrap();
        assert!((w.weights[at] - 1.0).abs() < 1e-6);
        let w = three_nn_weights(&[[0.5, 0.0, 0.0]], &[[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(w.indices, vec![0, 1]);
        assert!((w.weights[0] - 0.5).abs() < 1e-12 && (w.weights[1] - 0.5).abs() < 1e-12);
        assert!(three_nn_weights(&[[0.0; 3]], &[]).is_err());
    }

    #[test]
    fn normalization_bounds_radius() {
        let pc = PointCloud::new(vec![[3.0, 1.0, 2.0], [5.0, -1.0, 0.0], [4.0, 4.0, 4.0]]).unwrap();
        let n = pc.normalized();
        assert!((n.radius() - 1.0).abs() < 1e-12);
        let c = n.centroid();
        assert!(c.iter().all(|v| v.abs() < 1e-12));
    }
}
