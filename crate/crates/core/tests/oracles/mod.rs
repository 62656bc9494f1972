//! Brute-force reference implementations shared by the integration tests
//! and the acceptance suite.

#![allow(dead_code)]

use lmad_core::geometry::{Point, PointCloud};
use rand::Rng;

pub fn sq(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Exhaustive greedy max-min selection. The start point is the one farthest
/// from the centroid, ties going to the lexicographically smallest
/// coordinates and then the smallest index; each later pick recomputes the
/// distance of every candidate to every chosen point.
pub fn fps(pc: &PointCloud, k: usize) -> Vec<usize> {
    let c = pc.centroid();
    let n = pc.len();
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&i, &j| {
        let (a, b) = (&pc.coords[i], &pc.coords[j]);
        sq(b, &c)
            .partial_cmp(&sq(a, &c))
            .unwrap()
            .then(a.partial_cmp(b).unwrap())
            .then(i.cmp(&j))
    });
    let mut chosen = vec![ranked[0]];
    while chosen.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&j| sq(&pc.coords[i], &pc.coords[j]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

/// Every point inside the closed ball in index order, capped at `max_k`;
/// the nearest point (smallest index on ties) when the ball is empty.
pub fn ball(centers: &[Point], pc: &PointCloud, radius: f64, max_k: usize) -> Vec<Vec<usize>> {
    centers
        .iter()
        .map(|c| {
            let inside: Vec<usize> = (0..pc.len()).filter(|&i| sq(&pc.coords[i], c) <= radius * radius).collect();
            if inside.is_empty() {
                let mut all: Vec<usize> = (0..pc.len()).collect();
                all.sort_by(|&i, &j| sq(&pc.coords[i], c).partial_cmp(&sq(&pc.coords[j], c)).unwrap().then(i.cmp(&j)));
                vec![all[0]]
            } else {
                inside.into_iter().take(max_k).collect()
            }
        })
        .collect()
}

/// A cloud of `n` points. Half of the draws snap coordinates to a coarse
/// grid so that distance ties and duplicates occur.
pub fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    let snap = rng.random_bool(0.5);
    let coords = (0..n)
        .map(|_| {
            [0, 1, 2].map(|_| {
                if snap {
                    rng.random_range(0..4) as f64 * 0.5
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
        })
        .collect();
    PointCloud::new(coords).unwrap()
}

/// A cloud with pairwise-distinct points.
pub fn distinct_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    let mut coords: Vec<Point> = Vec::with_capacity(n);
    while coords.len() < n {
        let p = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
        if !coords.contains(&p) {
            coords.push(p);
        }
    }
    PointCloud::new(coords).unwrap()
}

/// Confusion counts by enumerating index sets: `(tp, fp, fn, tn)`.
pub fn confusion(pred: &[bool], gt: &[u8]) -> (u64, u64, u64, u64) {
    use std::collections::BTreeSet;
    let all: BTreeSet<usize> = (0..pred.len()).collect();
    let p: BTreeSet<usize> = all.iter().copied().filter(|&i| pred[i]).collect();
    let g: BTreeSet<usize> = all.iter().copied().filter(|&i| gt[i] == 1).collect();
    let tp = p.intersection(&g).count();
    let fp = p.difference(&g).count();
    let fn_ = g.difference(&p).count();
    let tn = all.len() - p.union(&g).count();
    (tp as u64, fp as u64, fn_ as u64, tn as u64)
}

/// One fuzz case for the metrics: a list of (class, prediction, truth).
pub type MetricsCase = Vec<(String, Vec<bool>, Vec<u8>)>;

pub fn random_metrics_case(rng: &mut impl Rng, classes: &[&str]) -> MetricsCase {
    let queries = rng.random_range(1..8);
    (0..queries)
        .map(|_| {
            let name = classes[rng.random_range(0..classes.len())].to_string();
            let n = rng.random_range(1..20);
            // biased densities make all-negative and all-positive rows common
            let (pp, pg) = (rng.random_range(0..5) as f64 / 4.0, rng.random_range(0..5) as f64 / 4.0);
            let pred = (0..n).map(|_| rng.random_bool(pp)).collect();
            let gt = (0..n).map(|_| rng.random_bool(pg) as u8).collect();
            (name, pred, gt)
        })
        .collect()
}

/// Metrics from the set-enumeration counts: `(miou, acc, macc, skipped)`.
pub fn metrics(case: &MetricsCase) -> (f64, f64, f64, Vec<String>) {
    let mut names: Vec<&str> = Vec::new();
    for (n, _, _) in case {
        if !names.contains(&n.as_str()) {
            names.push(n);
        }
    }
    let (mut ious, mut accs, mut skipped) = (Vec::new(), Vec::new(), Vec::new());
    let (mut correct, mut total) = (0u64, 0u64);
    for name in &names {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (_, p, g) in case.iter().filter(|(n, _, _)| n == name) {
            let c = confusion(p, g);
            tp += c.0;
            fp += c.1;
            fn_ += c.2;
            tn += c.3;
        }
        let all = tp + fp + fn_ + tn;
        correct += tp + tn;
        total += all;
        if tp + fp + fn_ == 0 {
            skipped.push(name.to_string());
        } else {
            ious.push(tp as f64 / (tp + fp + fn_) as f64);
        }
        accs.push((tp + tn) as f64 / all as f64);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    (mean(&ious), correct as f64 / total as f64, mean(&accs), skipped)
}
