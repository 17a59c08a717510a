//! Straight-line scalar reference implementations, written without the crate's
//! matrix helpers so they can serve as independent oracles.
#![allow(dead_code)]

/// Indices of `values` ordered by descending value, ties by index.
pub fn argsort_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx
}

pub fn triplet(s: &[Vec<f64>], margin: f64) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut hardest_col = f64::NEG_INFINITY;
        let mut hardest_row = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                hardest_col = hardest_col.max(s[i][j]);
                hardest_row = hardest_row.max(s[j][i]);
            }
        }
        total += (margin - s[i][i] + hardest_col).max(0.0);
        total += (margin - s[i][i] + hardest_row).max(0.0);
    }
    total
}

/// Hardest `k` negatives of row `i` (`by_row`) or column `i`.
pub fn hardest(s: &[Vec<f64>], i: usize, k: usize, by_row: bool) -> Vec<usize> {
    let n = s.len();
    let line: Vec<f64> = (0..n).map(|j| if by_row { s[i][j] } else { s[j][i] }).collect();
    argsort_desc(&line).into_iter().filter(|&j| j != i).take(k).collect()
}

pub fn info_nce(s: &[Vec<f64>], k: usize, tau: f64) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for by_row in [true, false] {
        let mut dir = 0.0;
        for i in 0..n {
            let pos = (s[i][i] / tau).exp();
            let mut denom = pos;
            for j in hardest(s, i, k, by_row) {
                let v = if by_row { s[i][j] } else { s[j][i] };
                denom += (v / tau).exp();
            }
            dir -= (pos / denom).ln();
        }
        total += dir / n as f64;
    }
    total
}

pub fn alignment(s: &[Vec<f64>]) -> f64 {
    let n = s.len();
    let mut sum = 0.0;
    for i in 0..n {
        sum += s[i][i];
    }
    sum / n as f64
}

pub fn uniformity(s: &[Vec<f64>]) -> f64 {
    let n = s.len();
    let mut sum = 0.0;
    for row in s {
        for v in row {
            sum += v.exp();
        }
    }
    (sum / (n * n) as f64).ln()
}

pub fn adaptive_k(ga: f64, gu: f64, b: usize) -> usize {
    let ga = ga.clamp(0.0, 1.0);
    let gu = gu.clamp(0.0, 1.0);
    let raw = (b as f64 * ((ga + gu) * std::f64::consts::PI / 4.0).cos()).floor();
    let raw = if raw < 1.0 { 1 } else { raw as usize };
    raw.min(b - 1)
}

pub fn adopt(s: &[Vec<f64>], tau: f64) -> (f64, usize) {
    let k = adaptive_k(alignment(s), uniformity(s), s.len());
    (info_nce(s, k, tau), k)
}

/// Recall@K in percent: a query counts when any relevant candidate lands in the
/// first `k` positions of a full descending argsort.
pub fn recall(scores: &[Vec<f64>], relevant: &[Vec<usize>], k: usize) -> f64 {
    let mut hits = 0;
    for (q, row) in scores.iter().enumerate() {
        let order = argsort_desc(row);
        if order[..k.min(order.len())].iter().any(|c| relevant[q].contains(c)) {
            hits += 1;
        }
    }
    100.0 * hits as f64 / scores.len() as f64
}
