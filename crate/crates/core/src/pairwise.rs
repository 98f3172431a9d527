//! LambdaRank: logistic pair cost, closed-form swap deltas and λ-gradients.
//!
//! For a pair `(i, j)` with `S = +1` when `i` is the positive item and
//! `o = f_i - f_j`, the cost is `softplus(-S o)` and the λ-gradient is
//! `S |Δ dC/do|`, where `Δ` is the change in the target metric from swapping
//! the two items' ranks.

use crate::dataio::SplitAssignment;
use crate::error::{Error, Result};
use crate::metrics::{dcg_discount, exact_ranks, ideal_dcg, rbp_ideal_mass, MetricKind};
use crate::model::{FactorModel, SgdConfig};
use crate::seed::shuffled_order;

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Overflow-safe logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `C = -S o + ln(1 + e^{S o})`, which equals `softplus(-S o)`.
pub fn pair_cost(sign: f64, score_diff: f64) -> f64 {
    softplus(-sign * score_diff)
}

/// `dC/do = -S / (1 + e^{S o})`.
pub fn cost_derivative(sign: f64, score_diff: f64) -> f64 {
    -sign * sigmoid(-sign * score_diff)
}

/// Per-list quantities reused by every swap delta of one user.
#[derive(Debug, Clone)]
pub struct SwapContext {
    positive_ranks: Vec<usize>,
    /// `inv_prefix[k] = sum_{t < k} 1 / positive_ranks[t]`
    inv_prefix: Vec<f64>,
    ideal_dcg: f64,
}

impl SwapContext {
    pub fn new(ranks: &[usize], labels: &[bool]) -> Self {
        let mut positive_ranks: Vec<usize> = ranks
            .iter()
            .zip(labels)
            .filter_map(|(&r, &y)| y.then_some(r))
            .collect();
        positive_ranks.sort_unstable();
        let mut inv_prefix = Vec::with_capacity(positive_ranks.len() + 1);
        inv_prefix.push(0.0);
        let mut acc = 0.0;
        for &r in &positive_ranks {
            acc += 1.0 / r as f64;
            inv_prefix.push(acc);
        }
        let ideal_dcg = ideal_dcg(positive_ranks.len());
        SwapContext {
            positive_ranks,
            inv_prefix,
            ideal_dcg,
        }
    }

    pub fn n_positive(&self) -> usize {
        self.positive_ranks.len()
    }

    /// `|metric(after) - metric(before)|` when the positive at rank `pos_rank`
    /// and the negative at rank `neg_rank` trade places.
    pub fn delta(&self, kind: MetricKind, pos_rank: usize, neg_rank: usize) -> f64 {
        self.delta_with(kind, self.rbp_ideal(kind), pos_rank, neg_rank)
    }

    /// Ideal RBP mass for nRBP kinds, 1 otherwise. Costs O(m), so callers
    /// scoring many pairs compute it once.
    fn rbp_ideal(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::Nrbp(p) => rbp_ideal_mass(p.value(), self.n_positive()),
            _ => 1.0,
        }
    }

    fn delta_with(
        &self,
        kind: MetricKind,
        rbp_ideal: f64,
        pos_rank: usize,
        neg_rank: usize,
    ) -> f64 {
        let (a, b) = (pos_rank, neg_rank);
        match kind {
            MetricKind::Rr => {
                let first = self.positive_ranks[0];
                let runner_up = self.positive_ranks.get(1).copied().unwrap_or(usize::MAX);
                let new_first = if a == first {
                    b.min(runner_up)
                } else {
                    b.min(first)
                };
                (1.0 / new_first as f64 - 1.0 / first as f64).abs()
            }
            MetricKind::Ap => self.ap_delta(a, b),
            MetricKind::Ndcg => {
                (dcg_discount(a as f64) - dcg_discount(b as f64)).abs() / self.ideal_dcg
            }
            MetricKind::Rbp(p) => {
                let p = p.value();
                (1.0 - p) * (p.powi(a as i32 - 1) - p.powi(b as i32 - 1)).abs()
            }
            MetricKind::Nrbp(p) => {
                let p = p.value();
                (p.powi(a as i32 - 1) - p.powi(b as i32 - 1)).abs() / rbp_ideal
            }
        }
    }

    fn ap_delta(&self, a: usize, b: usize) -> f64 {
        let pr = &self.positive_ranks;
        let m = pr.len() as f64;
        // 1-based position of the moving positive among positives
        let ca = pr.partition_point(|&r| r < a) + 1;
        // positives strictly above rank b (the moving one included when a < b)
        let lt_b = pr.partition_point(|&r| r < b);
        let raw = if b < a {
            // moves up: positives in (b, a) each gain one relevant item above them
            let between = self.inv_prefix[ca - 1] - self.inv_prefix[lt_b];
            (lt_b + 1) as f64 / b as f64 - ca as f64 / a as f64 + between
        } else {
            // moves down: positives in (a, b) each lose one
            let between = self.inv_prefix[lt_b] - self.inv_prefix[ca];
            lt_b as f64 / b as f64 - ca as f64 / a as f64 - between
        };
        raw.abs() / m
    }
}

/// Closed-form swap delta for items `i` and `j` of a ranked list. Equal labels
/// give zero.
pub fn swap_delta(kind: MetricKind, ranks: &[usize], labels: &[bool], i: usize, j: usize) -> f64 {
    if labels[i] == labels[j] {
        return 0.0;
    }
    let (pos, neg) = if labels[i] { (i, j) } else { (j, i) };
    SwapContext::new(ranks, labels).delta(kind, ranks[pos], ranks[neg])
}

/// One item pair of a user's list.
#[derive(Debug, Clone, Copy)]
pub struct PairContext<'a> {
    pub scores: &'a [f64],
    pub ranks: &'a [usize],
    pub labels: &'a [bool],
    pub i: usize,
    pub j: usize,
}

impl PairContext<'_> {
    /// `+1` if `i` is the positive item, `-1` if `j` is, `None` for equal labels.
    pub fn sign(&self) -> Option<f64> {
        match (self.labels[self.i], self.labels[self.j]) {
            (true, false) => Some(1.0),
            (false, true) => Some(-1.0),
            _ => None,
        }
    }

    pub fn score_diff(&self) -> f64 {
        self.scores[self.i] - self.scores[self.j]
    }
}

/// `λ_ij = S |Δ dC/do|`: the ascent contribution to item `i`'s score (item `j`
/// receives `-λ_ij`).
pub fn lambda_gradient(kind: MetricKind, ctx: &PairContext<'_>) -> f64 {
    let Some(sign) = ctx.sign() else {
        return 0.0;
    };
    let delta = swap_delta(kind, ctx.ranks, ctx.labels, ctx.i, ctx.j);
    sign * (delta * cost_derivative(sign, ctx.score_diff())).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairwiseEpochStats {
    pub mean_abs_lambda: f64,
    pub pairs: usize,
}

/// Score-space ascent direction for one user's candidate list: every
/// positive-negative pair adds `+λ` to the positive and `-λ` to the negative.
/// Returns the gradient and the sum of `|λ|`.
pub fn user_lambdas(
    kind: MetricKind,
    scores: &[f64],
    labels: &[bool],
    item_ids: &[usize],
) -> Result<(Vec<f64>, f64)> {
    let ranks = exact_ranks(scores, item_ids)?;
    let ctx = SwapContext::new(&ranks, labels);
    let mut grad = vec![0.0; scores.len()];
    let mut total = 0.0;
    if ctx.n_positive() == 0 {
        return Ok((grad, total));
    }
    let rbp_ideal = ctx.rbp_ideal(kind);
    for a in (0..scores.len()).filter(|&a| labels[a]) {
        for b in (0..scores.len()).filter(|&b| !labels[b]) {
            let delta = ctx.delta_with(kind, rbp_ideal, ranks[a], ranks[b]);
            let lambda = (delta * cost_derivative(1.0, scores[a] - scores[b])).abs();
            grad[a] += lambda;
            grad[b] -= lambda;
            total += lambda;
        }
    }
    Ok((grad, total))
}

/// One LambdaRank epoch: users in a seeded order, one accumulated update per
/// user, ranks computed once per user from the pre-update scores.
pub fn train_epoch_pairwise(
    model: &mut FactorModel,
    split: &SplitAssignment,
    kind: MetricKind,
    cfg: &SgdConfig,
    epoch: usize,
) -> Result<PairwiseEpochStats> {
    let mut pairs = 0usize;
    let mut lambda_sum = 0.0;
    for u in shuffled_order(cfg.seed, epoch as u64, split.n_users()) {
        let us = &split.users[u];
        if us.train_pos.is_empty() || us.train_neg.is_empty() {
            continue;
        }
        let (items, labels) = us.train_candidates();
        let scores = model.predict_scores(u, &items)?;
        let (grad, total) =
            user_lambdas(kind, &scores, &labels, &items).map_err(|e| in_epoch(e, epoch, u))?;
        if !total.is_finite() {
            return Err(Error::Training {
                epoch,
                user: u,
                reason: "non-finite lambda".into(),
            });
        }
        model
            .apply_score_gradients(u, &items, &grad, cfg)
            .map_err(|e| in_epoch(e, epoch, u))?;
        pairs += us.train_pos.len() * us.train_neg.len();
        lambda_sum += total;
    }
    Ok(PairwiseEpochStats {
        mean_abs_lambda: if pairs == 0 {
            0.0
        } else {
            lambda_sum / pairs as f64
        },
        pairs,
    })
}

/// Attaches epoch/user context to failures raised inside an epoch.
pub(crate) fn in_epoch(err: Error, epoch: usize, user: usize) -> Error {
    match err {
        Error::Training { reason, .. } => Error::Training {
            epoch,
            user,
            reason,
        },
        Error::Argument(reason) => Error::Training {
            epoch,
            user,
            reason,
        },
        other => other,
    }
}
