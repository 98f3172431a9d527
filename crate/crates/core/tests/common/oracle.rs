//! Brute-force reference implementations, written from the textbook
//! definitions and sharing no code with the library.
#![allow(dead_code)]

/// Rank of each item: one plus the number of items that beat it, where a
/// higher score wins and equal scores go to the smaller id.
pub fn ranks(scores: &[f64], ids: &[usize]) -> Vec<usize> {
    (0..scores.len())
        .map(|i| {
            1 + (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && ids[j] < ids[i]))
                .count()
        })
        .collect()
}

fn positives(labels: &[bool]) -> usize {
    labels.iter().filter(|y| **y).count()
}

fn y(label: bool) -> f64 {
    if label {
        1.0
    } else {
        0.0
    }
}

/// Σ_i y_i / R_i · Π_j (1 − y_j [R_j < R_i])
pub fn rr(ranks: &[usize], labels: &[bool]) -> f64 {
    let mut total = 0.0;
    for i in 0..ranks.len() {
        let mut prod = 1.0;
        for j in 0..ranks.len() {
            prod *= 1.0 - y(labels[j]) * y(ranks[j] < ranks[i]);
        }
        total += y(labels[i]) / ranks[i] as f64 * prod;
    }
    total
}

/// (1/m) Σ_i y_i / R_i · Σ_j y_j [R_j ≤ R_i]
pub fn ap(ranks: &[usize], labels: &[bool]) -> f64 {
    let m = positives(labels) as f64;
    let mut total = 0.0;
    for i in 0..ranks.len() {
        let mut above = 0.0;
        for j in 0..ranks.len() {
            above += y(labels[j]) * y(ranks[j] <= ranks[i]);
        }
        total += y(labels[i]) / ranks[i] as f64 * above;
    }
    total / m
}

/// Σ_i (2^{y_i} − 1) / log2(1 + R_i), over the same sum for the ideal order.
pub fn ndcg(ranks: &[usize], labels: &[bool]) -> f64 {
    let dcg: f64 = (0..ranks.len())
        .map(|i| (2f64.powf(y(labels[i])) - 1.0) / (1.0 + ranks[i] as f64).log2())
        .sum();
    let idcg: f64 = (1..=positives(labels))
        .map(|r| 1.0 / (1.0 + r as f64).log2())
        .sum();
    dcg / idcg
}

/// (1 − p) Σ_i y_i p^{R_i − 1}
pub fn rbp(ranks: &[usize], labels: &[bool], p: f64) -> f64 {
    (1.0 - p)
        * (0..ranks.len())
            .map(|i| y(labels[i]) * p.powi(ranks[i] as i32 - 1))
            .sum::<f64>()
}

/// RBP over the RBP of the list with every positive on top.
pub fn nrbp(ranks: &[usize], labels: &[bool], p: f64) -> f64 {
    let ideal: f64 = (1..=positives(labels))
        .map(|r| (1.0 - p) * p.powi(r as i32 - 1))
        .sum();
    rbp(ranks, labels, p) / ideal
}

/// Metric by name: `rr`, `ap`, `ndcg`, `rbp`, `nrbp` (the last two need `p`).
pub fn metric(name: &str, p: Option<f64>, ranks: &[usize], labels: &[bool]) -> f64 {
    match (name, p) {
        ("rr", None) => rr(ranks, labels),
        ("ap", None) => ap(ranks, labels),
        ("ndcg", None) => ndcg(ranks, labels),
        ("rbp", Some(p)) => rbp(ranks, labels, p),
        ("nrbp", Some(p)) => nrbp(ranks, labels, p),
        _ => panic!("unknown metric {name}"),
    }
}

/// |metric after exchanging the ranks of items i and j − metric before|.
pub fn swap_delta(
    name: &str,
    p: Option<f64>,
    ranks: &[usize],
    labels: &[bool],
    i: usize,
    j: usize,
) -> f64 {
    let before = metric(name, p, ranks, labels);
    let mut swapped = ranks.to_vec();
    swapped.swap(i, j);
    (metric(name, p, &swapped, labels) - before).abs()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// 1 + Σ_{j≠i} σ(f_j − f_i)
pub fn smoothed_ranks(scores: &[f64]) -> Vec<f64> {
    (0..scores.len())
        .map(|i| {
            1.0 + (0..scores.len())
                .filter(|&j| j != i)
                .map(|j| logistic(scores[j] - scores[i]))
                .sum::<f64>()
        })
        .collect()
}

/// Σ_i y_i (R_i − 1) − Σ_{j=1..m} (j − 1): zero exactly when positives lead.
pub fn nrbp_rank_gap(ranks: &[usize], labels: &[bool]) -> f64 {
    let m = positives(labels);
    let placed: f64 = (0..ranks.len())
        .map(|i| y(labels[i]) * (ranks[i] as f64 - 1.0))
        .sum();
    placed - (1..=m).map(|j| (j - 1) as f64).sum::<f64>()
}
