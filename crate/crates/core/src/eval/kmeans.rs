//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{ari, nmi};
use super::EvalError;

pub const MAX_ITERS: usize = 300;
pub const TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn inertia(x: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    x.iter().zip(assignments).map(|(p, &c)| sq_dist(p, &centroids[c])).sum()
}

fn distinct_points(x: &[Vec<f64>]) -> usize {
    let mut rows: Vec<Vec<u64>> = x.iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

fn plus_plus_init(x: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![x[rng.random_range(0..x.len())].clone()];
    let mut d2: Vec<f64> = x.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..x.len())
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = x.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        centroids.push(x[next].clone());
        let c = centroids.last().unwrap();
        for (di, p) in d2.iter_mut().zip(x) {
            *di = di.min(sq_dist(p, c));
        }
    }
    centroids
}

/// Clusters the rows of `x` into `k` groups. Empty clusters take the point
/// farthest from its current centroid.
pub fn kmeans(x: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult, EvalError> {
    if k == 0 || x.is_empty() {
        return Err(EvalError::Input("k-means needs k >= 1 and at least one point".into()));
    }
    let distinct = distinct_points(x);
    if k > distinct {
        return Err(EvalError::Input(format!("k = {k} exceeds {distinct} distinct points")));
    }
    let d = x[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(x, k, &mut rng);
    let mut assignments = vec![0usize; x.len()];
    let mut iterations = 0;
    for it in 1..=MAX_ITERS {
        iterations = it;
        for (a, p) in assignments.iter_mut().zip(x) {
            let mut best = (0, f64::INFINITY);
            for (c, cen) in centroids.iter().enumerate() {
                let dist = sq_dist(p, cen);
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            *a = best.0;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in x.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let (far, _) = x
                    .iter()
                    .zip(&assignments)
                    .enumerate()
                    .map(|(i, (p, &a))| (i, sq_dist(p, &centroids[a])))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                let old = assignments[far];
                counts[old] -= 1;
                for (s, v) in sums[old].iter_mut().zip(&x[far]) {
                    *s -= v;
                }
                assignments[far] = c;
                counts[c] = 1;
                sums[c] = x[far].clone();
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        if shift < TOL {
            break;
        }
    }
    for (a, p) in assignments.iter_mut().zip(x) {
        let mut best = (0, f64::INFINITY);
        for (c, cen) in centroids.iter().enumerate() {
            let dist = sq_dist(p, cen);
            if dist < best.1 {
                best = (c, dist);
            }
        }
        *a = best.0;
    }
    let inertia = inertia(x, &assignments, &centroids);
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRun {
    pub seed: u64,
    pub nmi: f64,
    pub ari: f64,
    pub inertia: f64,
}

/// Repeated k-means with `k` = number of distinct labels, scored against
/// the labels. Repeat `r` uses seed `seed + r`.
pub fn cluster_eval(x: &[Vec<f64>], labels: &[usize], repeats: usize, seed: u64) -> Result<Vec<ClusterRun>, EvalError> {
    if x.len() != labels.len() {
        return Err(EvalError::Input(format!("{} embeddings for {} labels", x.len(), labels.len())));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len();
    (0..repeats)
        .into_par_iter()
        .map(|r| {
            let s = seed.wrapping_add(r as u64);
            let res = kmeans(x, k, s)?;
            Ok(ClusterRun {
                seed: s,
                nmi: nmi(labels, &res.assignments),
                ari: ari(labels, &res.assignments),
                inertia: res.inertia,
            })
        })
        .collect()
}
