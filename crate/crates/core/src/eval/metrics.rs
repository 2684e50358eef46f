//! Classification and clustering agreement scores.

use std::collections::HashMap;

/// Global F1 over pooled true/false positive counts. For single-label
/// multiclass predictions this equals accuracy.
pub fn micro_f1(y_true: &[usize], y_pred: &[usize]) -> f64 {
    assert_eq!(y_true.len(), y_pred.len(), "label and prediction lengths differ");
    if y_true.is_empty() {
        return 0.0;
    }
    let tp = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count() as f64;
    let wrong = y_true.len() as f64 - tp;
    // each wrong prediction is one false positive and one false negative
    let denom = 2.0 * tp + 2.0 * wrong;
    2.0 * tp / denom
}

/// Unweighted mean of per-class F1 over every class that appears in
/// either `y_true` or `y_pred`. A class with no true and no predicted
/// members cannot occur; a class with zero precision and recall scores 0.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize]) -> f64 {
    assert_eq!(y_true.len(), y_pred.len(), "label and prediction lengths differ");
    let mut classes: Vec<usize> = y_true.iter().chain(y_pred).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let tp = y_true.iter().zip(y_pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
            let fp = y_true.iter().zip(y_pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
            let fn_ = y_true.iter().zip(y_pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
            let denom = 2.0 * tp + fp + fn_;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum();
    total / classes.len() as f64
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> f64 {
    if y_true.is_empty() {
        return 0.0;
    }
    y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count() as f64 / y_true.len() as f64
}

/// Sparse contingency table with row and column marginals.
struct Contingency {
    cells: HashMap<(usize, usize), u64>,
    rows: HashMap<usize, u64>,
    cols: HashMap<usize, u64>,
    n: u64,
}

fn contingency(a: &[usize], b: &[usize]) -> Contingency {
    assert_eq!(a.len(), b.len(), "partitions cover different element counts");
    let mut c = Contingency {
        cells: HashMap::new(),
        rows: HashMap::new(),
        cols: HashMap::new(),
        n: a.len() as u64,
    };
    for (&x, &y) in a.iter().zip(b) {
        *c.cells.entry((x, y)).or_default() += 1;
        *c.rows.entry(x).or_default() += 1;
        *c.cols.entry(y).or_default() += 1;
    }
    c
}

fn sorted_counts(m: &HashMap<usize, u64>) -> Vec<u64> {
    let mut v: Vec<(usize, u64)> = m.iter().map(|(&k, &c)| (k, c)).collect();
    v.sort_unstable();
    v.into_iter().map(|(_, c)| c).collect()
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information, `I(a; b) / ((H(a) + H(b)) / 2)` with
/// natural logarithms. Two single-cluster partitions score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    let c = contingency(a, b);
    if c.n == 0 {
        return 1.0;
    }
    let n = c.n as f64;
    let (ra, cb) = (sorted_counts(&c.rows), sorted_counts(&c.cols));
    if ra.len() == 1 && cb.len() == 1 {
        return 1.0;
    }
    let mut cells: Vec<((usize, usize), u64)> = c.cells.into_iter().collect();
    cells.sort_unstable();
    let mi: f64 = cells
        .iter()
        .map(|&((x, y), nij)| {
            let nij = nij as f64;
            let (ni, nj) = (c.rows[&x] as f64, c.cols[&y] as f64);
            nij / n * (n * nij / (ni * nj)).ln()
        })
        .sum::<f64>()
        .max(0.0);
    let denom = (entropy(&ra, n) + entropy(&cb, n)) / 2.0;
    if denom <= 0.0 {
        return 1.0;
    }
    (mi / denom).clamp(0.0, 1.0)
}

fn pairs(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index by pair counting with the hypergeometric expected
/// index. Returns 1 when both partitions are trivially identical in
/// structure (expected index equals its maximum).
pub fn ari(a: &[usize], b: &[usize]) -> f64 {
    let c = contingency(a, b);
    let mut cells: Vec<u64> = c.cells.values().copied().collect();
    cells.sort_unstable();
    let index: f64 = cells.iter().map(|&x| pairs(x)).sum();
    let sum_a: f64 = sorted_counts(&c.rows).iter().map(|&x| pairs(x)).sum();
    let sum_b: f64 = sorted_counts(&c.cols).iter().map(|&x| pairs(x)).sum();
    let total = pairs(c.n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
