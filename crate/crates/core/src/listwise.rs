//! Smoothed-rank listwise losses and their analytic score gradients.
//!
//! Ranks are smoothed as `R̃_i = 1 + Σ_{j≠i} σ(f_j - f_i)`. The RR, AP and nDCG
//! losses are the negated smoothed metrics; the nRBP loss is the
//! persistence-free rank sum `Σ_pos (R̃_i - 1) - Σ_{k=1..m} (k - 1)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::SplitAssignment;
use crate::error::{Error, Result};
use crate::metrics::{dcg_discount, ideal_dcg};
use crate::model::{FactorModel, SgdConfig};
use crate::pairwise::{in_epoch, sigmoid};
use crate::seed::shuffled_order;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ListLossKind {
    Rr,
    Ap,
    Ndcg,
    /// Carries no persistence: one loss serves every `p`.
    Nrbp,
}

impl ListLossKind {
    pub const ALL: [ListLossKind; 4] = [
        ListLossKind::Rr,
        ListLossKind::Ap,
        ListLossKind::Ndcg,
        ListLossKind::Nrbp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ListLossKind::Rr => "rr",
            ListLossKind::Ap => "ap",
            ListLossKind::Ndcg => "ndcg",
            ListLossKind::Nrbp => "nrbp",
        }
    }
}

impl fmt::Display for ListLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ListLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ListLossKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::arg(format!("unknown listwise loss `{s}`")))
    }
}

/// `R̃_i = 1 + Σ_{j≠i} σ(f_j - f_i)`.
pub fn smooth_ranks(scores: &[f64]) -> Result<Vec<f64>> {
    if let Some(k) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::arg(format!("non-finite score at position {k}")));
    }
    let n = scores.len();
    let mut ranks = vec![1.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            ranks[i] += sigmoid(scores[j] - scores[i]);
            ranks[j] += sigmoid(scores[i] - scores[j]);
        }
    }
    Ok(ranks)
}

/// A candidate list with its smoothed ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedList {
    scores: Vec<f64>,
    labels: Vec<bool>,
    ranks: Vec<f64>,
    n_positive: usize,
}

impl SmoothedList {
    pub fn new(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let ranks = smooth_ranks(scores)?;
        Self::from_parts(scores.to_vec(), labels.to_vec(), ranks)
    }

    /// Uses caller-supplied ranks in place of the smoothed ones, e.g. exact
    /// ranks for checking limits.
    pub fn from_parts(scores: Vec<f64>, labels: Vec<bool>, ranks: Vec<f64>) -> Result<Self> {
        if scores.len() != labels.len() || ranks.len() != labels.len() {
            return Err(Error::arg("scores, labels and ranks differ in length"));
        }
        let n_positive = labels.iter().filter(|&&y| y).count();
        if n_positive == 0 {
            return Err(Error::arg("list has no positive item"));
        }
        Ok(SmoothedList {
            scores,
            labels,
            ranks,
            n_positive,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn smoothed_ranks(&self) -> &[f64] {
        &self.ranks
    }

    pub fn n_positive(&self) -> usize {
        self.n_positive
    }

    fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &y)| y.then_some(i))
    }

    /// `σ(f_j - f_i)`
    fn above(&self, j: usize, i: usize) -> f64 {
        sigmoid(self.scores[j] - self.scores[i])
    }
}

pub fn loss_ndcg(list: &SmoothedList) -> f64 {
    let dcg: f64 = list.positives().map(|i| dcg_discount(list.ranks[i])).sum();
    -dcg / ideal_dcg(list.n_positive)
}

pub fn loss_ap(list: &SmoothedList) -> f64 {
    let total: f64 = list
        .positives()
        .map(|i| {
            let above: f64 = list
                .positives()
                .filter(|&j| j != i)
                .map(|j| list.above(j, i))
                .sum();
            (1.0 + above) / list.ranks[i]
        })
        .sum();
    -total / list.n_positive as f64
}

pub fn loss_rr(list: &SmoothedList) -> f64 {
    // negatives contribute a factor of one to the product
    -list
        .positives()
        .map(|i| {
            let survive: f64 = list
                .positives()
                .filter(|&j| j != i)
                .map(|j| sigmoid(list.scores[i] - list.scores[j]))
                .product();
            survive / list.ranks[i]
        })
        .sum::<f64>()
}

pub fn loss_nrbp(list: &SmoothedList) -> f64 {
    let m = list.n_positive as f64;
    let rank_sum: f64 = list.positives().map(|i| list.ranks[i] - 1.0).sum();
    rank_sum - m * (m - 1.0) / 2.0
}

pub fn loss(kind: ListLossKind, list: &SmoothedList) -> f64 {
    match kind {
        ListLossKind::Rr => loss_rr(list),
        ListLossKind::Ap => loss_ap(list),
        ListLossKind::Ndcg => loss_ndcg(list),
        ListLossKind::Nrbp => loss_nrbp(list),
    }
}

/// `∂loss/∂f_k` for every item of the list.
///
/// Every term depends on scores only through differences `f_j - f_i`, so each
/// pairwise weight `w` is added to item `j` and subtracted from item `i`.
pub fn loss_gradients(kind: ListLossKind, list: &SmoothedList) -> Vec<f64> {
    let n = list.scores.len();
    let m = list.n_positive as f64;
    let mut grad = vec![0.0; n];
    let idcg = ideal_dcg(list.n_positive);
    for i in list.positives() {
        let r = list.ranks[i];
        // dL/dR̃_i, plus the per-positive extras for AP and RR
        let (d_rank, extra) = match kind {
            ListLossKind::Nrbp => (1.0, Extra::None),
            ListLossKind::Ndcg => {
                let l = (r + 1.0).log2();
                (
                    1.0 / (idcg * (r + 1.0) * std::f64::consts::LN_2 * l * l),
                    Extra::None,
                )
            }
            ListLossKind::Ap => {
                let above: f64 = list
                    .positives()
                    .filter(|&j| j != i)
                    .map(|j| list.above(j, i))
                    .sum();
                ((1.0 + above) / (m * r * r), Extra::Ap(-1.0 / (m * r)))
            }
            ListLossKind::Rr => {
                let survive: f64 = list
                    .positives()
                    .filter(|&j| j != i)
                    .map(|j| sigmoid(list.scores[i] - list.scores[j]))
                    .product();
                (survive / (r * r), Extra::Rr(survive / r))
            }
        };
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = list.above(j, i);
            let ds = s * (1.0 - s);
            let mut w = d_rank * ds;
            if list.labels[j] {
                match extra {
                    Extra::None => {}
                    // numerator term 1 + Σ_pos σ(f_j - f_i)
                    Extra::Ap(d_num) => w += d_num * ds,
                    // d/df_j ln(1 - σ(f_j - f_i)) = -σ(f_j - f_i)
                    Extra::Rr(coef) => w += coef * s,
                }
            }
            grad[j] += w;
            grad[i] -= w;
        }
    }
    grad
}

#[derive(Clone, Copy)]
enum Extra {
    None,
    Ap(f64),
    Rr(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ListwiseEpochStats {
    /// Mean per-user loss over the users visited.
    pub mean_loss: f64,
    /// L2 norm of all per-user score gradients of the epoch.
    pub grad_norm: f64,
}

/// One listwise epoch: for each user in a seeded order, a descent step on the
/// user's loss over the training candidates.
pub fn train_epoch_listwise(
    model: &mut FactorModel,
    split: &SplitAssignment,
    kind: ListLossKind,
    cfg: &SgdConfig,
    epoch: usize,
) -> Result<ListwiseEpochStats> {
    let mut loss_sum = 0.0;
    let mut sq_norm = 0.0;
    let mut visited = 0usize;
    for u in shuffled_order(cfg.seed, epoch as u64, split.n_users()) {
        let us = &split.users[u];
        if us.train_pos.is_empty() {
            continue;
        }
        let (items, labels) = us.train_candidates();
        let scores = model.predict_scores(u, &items)?;
        let list = SmoothedList::new(&scores, &labels).map_err(|e| in_epoch(e, epoch, u))?;
        let value = loss(kind, &list);
        let grad = loss_gradients(kind, &list);
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                epoch,
                user: u,
                reason: format!("non-finite {kind} loss or gradient"),
            });
        }
        let ascent: Vec<f64> = grad.iter().map(|g| -g).collect();
        model
            .apply_score_gradients(u, &items, &ascent, cfg)
            .map_err(|e| in_epoch(e, epoch, u))?;
        loss_sum += value;
        sq_norm += grad.iter().map(|g| g * g).sum::<f64>();
        visited += 1;
    }
    Ok(ListwiseEpochStats {
        mean_loss: if visited == 0 {
            0.0
        } else {
            loss_sum / visited as f64
        },
        grad_norm: sq_norm.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::UserSplit;
    use crate::model::init_model;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn smoothed_ranks_examples() {
        assert_eq!(smooth_ranks(&[0.3, 0.3]).unwrap(), vec![1.5, 1.5]);
        let r = smooth_ranks(&[10.0, -10.0]).unwrap();
        assert!(approx(r[0], 1.0, 1e-4) && approx(r[1], 2.0, 1e-4));
        assert_eq!(smooth_ranks(&[1.0, 1.0, 1.0]).unwrap(), vec![2.0, 2.0, 2.0]);
        assert!(smooth_ranks(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn ndcg_loss_examples() {
        let l = SmoothedList::new(&[40.0, 0.0, -1.0], &[true, false, false]).unwrap();
        assert!(approx(loss_ndcg(&l), -1.0, 1e-12));
        let l = SmoothedList::new(&[0.0, 0.0, 0.0], &[true, false, false]).unwrap();
        assert!(approx(loss_ndcg(&l), -1.0 / 3f64.log2(), 1e-15));
        assert!(approx(loss_ndcg(&l), -0.63093, 1e-5));
    }

    #[test]
    fn ndcg_loss_ignores_buried_item() {
        let base = SmoothedList::new(&[0.5, 0.1, -0.2], &[true, false, true]).unwrap();
        let more =
            SmoothedList::new(&[0.5, 0.1, -0.2, -40.0], &[true, false, true, false]).unwrap();
        assert!((loss_ndcg(&base) - loss_ndcg(&more)).abs() < 1e-6);
    }

    #[test]
    fn ap_loss_examples() {
        let l = SmoothedList::new(&[10.0, -10.0], &[true, false]).unwrap();
        assert!(approx(loss_ap(&l), -1.0, 1e-8));
        let l = SmoothedList::new(&[0.2, 0.2], &[true, true]).unwrap();
        assert_eq!(loss_ap(&l), -1.0);
    }

    #[test]
    fn rr_loss_examples() {
        let l = SmoothedList::new(&[10.0, -10.0], &[true, false]).unwrap();
        assert!(approx(loss_rr(&l), -1.0, 1e-8));
        let l = SmoothedList::new(&[0.0, 0.0], &[true, false]).unwrap();
        assert!(approx(loss_rr(&l), -1.0 / 1.5, 1e-15));
        let l = SmoothedList::new(&[60.0, 30.0, 0.0, -1.0], &[true, true, false, false]).unwrap();
        assert!(approx(loss_rr(&l), -1.0, 1e-9));
    }

    #[test]
    fn nrbp_loss_examples() {
        let l = SmoothedList::new(&[10.0, -10.0], &[true, false]).unwrap();
        assert!(loss_nrbp(&l).abs() < 1e-8);
        let exact = SmoothedList::from_parts(
            vec![3.0, 2.0, 1.0, 0.0],
            vec![true, true, true, false],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        assert_eq!(loss_nrbp(&exact), 0.0);
        let k = 4;
        let mut scores = vec![-30.0];
        scores.extend((0..k).map(|t| 30.0 + t as f64 * 30.0));
        let labels: Vec<bool> = (0..=k).map(|t| t == 0).collect();
        let l = SmoothedList::new(&scores, &labels).unwrap();
        assert!(approx(loss_nrbp(&l), k as f64, 1e-9));
    }

    #[test]
    fn nrbp_sign_on_exact_ranks() {
        // any placement of m positives among exact ranks has loss >= 0
        let labels = vec![false, true, true, false, true];
        let ranks = vec![1.0, 2.0, 4.0, 3.0, 5.0];
        let l = SmoothedList::from_parts(vec![0.0; 5], labels, ranks).unwrap();
        assert_eq!(loss_nrbp(&l), (1 + 3 + 4 - 3) as f64);
    }

    fn finite_difference(kind: ListLossKind, scores: &[f64], labels: &[bool], h: f64) -> Vec<f64> {
        (0..scores.len())
            .map(|k| {
                let mut up = scores.to_vec();
                let mut down = scores.to_vec();
                up[k] += h;
                down[k] -= h;
                let lu = loss(kind, &SmoothedList::new(&up, labels).unwrap());
                let ld = loss(kind, &SmoothedList::new(&down, labels).unwrap());
                (lu - ld) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences_small() {
        let scores = [0.4, -1.2, 2.0, 0.1, -0.3, 0.9, 1.5];
        let labels = [true, false, true, false, false, true, false];
        for kind in ListLossKind::ALL {
            let list = SmoothedList::new(&scores, &labels).unwrap();
            let analytic = loss_gradients(kind, &list);
            let numeric = finite_difference(kind, &scores, &labels, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(
                    (a - n).abs() < 1e-7 * a.abs().max(1.0),
                    "{kind}: {a} vs {n}"
                );
            }
        }
    }

    #[test]
    fn symmetric_instance_has_equal_components() {
        let list = SmoothedList::new(&[0.0; 4], &[true; 4]).unwrap();
        for kind in ListLossKind::ALL {
            let g = loss_gradients(kind, &list);
            assert!(g.iter().all(|x| (x - g[0]).abs() < 1e-15), "{kind}: {g:?}");
        }
        // all-positive nRBP: Σ R̃ is constant, so the gradient sums to zero
        let list = SmoothedList::new(&[0.3, -1.0, 2.0], &[true; 3]).unwrap();
        let g = loss_gradients(ListLossKind::Nrbp, &list);
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    fn one_user_split() -> SplitAssignment {
        SplitAssignment {
            split_id: 0,
            nsr: 1.0,
            users: vec![UserSplit {
                train_pos: vec![0],
                train_neg: vec![1],
                test_pos: vec![0],
                test_neg: vec![1],
            }],
            short_pool_users: vec![],
        }
    }

    #[test]
    fn one_step_separates_scores() {
        for kind in ListLossKind::ALL {
            let mut model = init_model(1, 2, 3, 4, 0.3).unwrap();
            let before = model.predict_scores(0, &[0, 1]).unwrap();
            train_epoch_listwise(
                &mut model,
                &one_user_split(),
                kind,
                &SgdConfig::new(0.1, 1),
                1,
            )
            .unwrap();
            let after = model.predict_scores(0, &[0, 1]).unwrap();
            assert!(after[0] - after[1] > before[0] - before[1], "{kind}");
        }
    }

    #[test]
    fn zero_gradient_leaves_model() {
        // all-zero factors: equal scores, but the chain rule through zero
        // factors yields no movement
        let mut model = init_model(1, 2, 3, 4, 0.0).unwrap();
        let before = model.clone();
        train_epoch_listwise(
            &mut model,
            &one_user_split(),
            ListLossKind::Ndcg,
            &SgdConfig::new(0.1, 1),
            1,
        )
        .unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn epochs_are_deterministic() {
        let run = || {
            let mut m = init_model(1, 2, 3, 4, 0.3).unwrap();
            for e in 1..=3 {
                train_epoch_listwise(
                    &mut m,
                    &one_user_split(),
                    ListLossKind::Ap,
                    &SgdConfig::new(0.5, 9),
                    e,
                )
                .unwrap();
            }
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn names_parse() {
        for k in ListLossKind::ALL {
            assert_eq!(k.name().parse::<ListLossKind>().unwrap(), k);
        }
        assert!("rbp".parse::<ListLossKind>().is_err());
    }
}
