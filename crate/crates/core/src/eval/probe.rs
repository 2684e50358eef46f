//! Linear classifiers trained on frozen embeddings.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{macro_f1, micro_f1};
use super::EvalError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// One-vs-rest linear SVM on squared hinge loss.
    #[default]
    Svm,
    /// Multinomial logistic regression.
    LogReg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub train_frac: f64,
    pub repeats: usize,
    pub seed: u64,
    /// Inverse regularization strength; the L2 weight is `1 / (c · n)`.
    pub c: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            kind: ProbeKind::Svm,
            train_frac: 0.8,
            repeats: 10,
            seed: 0,
            c: 1.0,
            epochs: 60,
            batch_size: 64,
        }
    }
}

/// Column means and standard deviations of the training rows.
#[derive(Clone, Debug)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[&[f64]]) -> Self {
        let d = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, &x) in mean.iter_mut().zip(*r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, &x), m) in var.iter_mut().zip(*r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

/// Fitted linear model: `scores = W·x + b`, one row per class.
#[derive(Clone, Debug)]
pub struct LinearModel {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    standardizer: Standardizer,
}

impl LinearModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let z = self.standardizer.apply(x);
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = i;
            }
        }
        best
    }
}

/// Largest eigenvalue of `XᵀX / n` (bias column included) by power
/// iteration; bounds the curvature of both losses.
fn curvature(xs: &[Vec<f64>]) -> f64 {
    let d = xs[0].len() + 1;
    let n = xs.len() as f64;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 1.0;
    for _ in 0..30 {
        let mut out = vec![0.0; d];
        for x in xs {
            let dot: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d - 1];
            for (o, &a) in out.iter_mut().zip(x) {
                *o += dot * a;
            }
            out[d - 1] += dot;
        }
        out.iter_mut().for_each(|o| *o /= n);
        let norm = out.iter().map(|o| o * o).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return 1.0;
        }
        lambda = norm;
        v = out.into_iter().map(|o| o / norm).collect();
    }
    lambda.max(1e-6)
}

/// Trains a probe on `(x, y)` with mini-batch SGD and tail averaging.
pub fn fit_probe(x: &[&[f64]], y: &[usize], num_classes: usize, cfg: &ProbeConfig, seed: u64) -> LinearModel {
    let standardizer = Standardizer::fit(x);
    let xs: Vec<Vec<f64>> = x.iter().map(|r| standardizer.apply(r)).collect();
    let (n, d) = (xs.len(), xs[0].len());
    let lambda = 1.0 / (cfg.c * n as f64);
    let smooth = match cfg.kind {
        ProbeKind::Svm => 2.0,
        ProbeKind::LogReg => 0.5,
    };
    let step = 1.0 / (smooth * curvature(&xs) + lambda);
    let mut w = vec![vec![0.0; d]; num_classes];
    let mut b = vec![0.0; num_classes];
    let mut w_avg = w.clone();
    let mut b_avg = b.clone();
    let mut averaged = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let avg_from = cfg.epochs / 2;
    let mut scores = vec![0.0; num_classes];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut gw = vec![vec![0.0; d]; num_classes];
            let mut gb = vec![0.0; num_classes];
            for &i in batch {
                let xi = &xs[i];
                for c in 0..num_classes {
                    scores[c] = w[c].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + b[c];
                }
                match cfg.kind {
                    ProbeKind::Svm => {
                        for c in 0..num_classes {
                            let t = if y[i] == c { 1.0 } else { -1.0 };
                            let margin = 1.0 - t * scores[c];
                            if margin > 0.0 {
                                let g = -2.0 * t * margin;
                                for (gj, &xj) in gw[c].iter_mut().zip(xi) {
                                    *gj += g * xj;
                                }
                                gb[c] += g;
                            }
                        }
                    }
                    ProbeKind::LogReg => {
                        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                        for c in 0..num_classes {
                            let p = (scores[c] - m).exp() / z;
                            let g = p - if y[i] == c { 1.0 } else { 0.0 };
                            for (gj, &xj) in gw[c].iter_mut().zip(xi) {
                                *gj += g * xj;
                            }
                            gb[c] += g;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for c in 0..num_classes {
                for (wj, gj) in w[c].iter_mut().zip(&gw[c]) {
                    *wj -= step * (gj * inv + lambda * *wj);
                }
                b[c] -= step * gb[c] * inv;
            }
        }
        if epoch >= avg_from {
            averaged += 1;
            let k = 1.0 / averaged as f64;
            for c in 0..num_classes {
                for (a, &wj) in w_avg[c].iter_mut().zip(&w[c]) {
                    *a += (wj - *a) * k;
                }
                b_avg[c] += (b[c] - b_avg[c]) * k;
            }
        }
    }
    if averaged == 0 {
        w_avg = w;
        b_avg = b;
    }
    LinearModel {
        weights: w_avg,
        bias: b_avg,
        standardizer,
    }
}

/// Stratified split of indices `0..labels.len()`: `round(train_frac · n_c)`
/// of each class (at least one) go to training.
pub fn stratified_indices(labels: &[usize], train_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let k = ((train_frac * members.len() as f64).round() as usize).clamp(1, members.len());
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Scores of one repeat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub seed: u64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Fits on the training fold and predicts the test fold. Test labels are
/// never read.
pub fn probe_predictions(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Vec<usize> {
    let num_classes = train.iter().map(|&i| labels[i]).max().map_or(1, |m| m + 1);
    let x: Vec<&[f64]> = train.iter().map(|&i| embeddings[i].as_slice()).collect();
    let y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let model = fit_probe(&x, &y, num_classes, cfg, seed);
    test.iter().map(|&i| model.predict(&embeddings[i])).collect()
}

/// Repeated stratified train/test probes. Each repeat `r` uses seed
/// `cfg.seed + r`, redrawing a split whose training fold misses a class.
pub fn linear_probe(embeddings: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig) -> Result<Vec<ProbeRun>, EvalError> {
    if embeddings.len() != labels.len() {
        return Err(EvalError::Input(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if embeddings.len() < 2 || cfg.repeats == 0 {
        return Err(EvalError::Input("need at least 2 samples and 1 repeat".into()));
    }
    if !(cfg.train_frac > 0.0 && cfg.train_frac < 1.0) {
        return Err(EvalError::Input(format!("train_frac = {} outside (0, 1)", cfg.train_frac)));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.seed.wrapping_add(r as u64);
            let mut attempt = 0u64;
            let (train, test) = loop {
                let (train, test) = stratified_indices(labels, cfg.train_frac, seed.wrapping_add(attempt << 32));
                let covered = classes.iter().all(|c| train.iter().any(|&i| labels[i] == *c));
                if (covered && !test.is_empty()) || attempt >= 100 {
                    break (train, test);
                }
                attempt += 1;
            };
            if test.is_empty() {
                return Err(EvalError::Input("test fold is empty".into()));
            }
            let pred = probe_predictions(embeddings, labels, &train, &test, cfg, seed);
            let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
            Ok(ProbeRun {
                seed,
                macro_f1: macro_f1(&truth, &pred),
                micro_f1: micro_f1(&truth, &pred),
                train_size: train.len(),
                test_size: test.len(),
            })
        })
        .collect()
}
