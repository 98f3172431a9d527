//! Exact ranking metrics over binary relevance.
//!
//! Every metric here is evaluated over a user's candidate list (positives plus
//! sampled negatives), with no cutoff. Ranks are 1-based; ties in score are
//! broken by ascending item id so that ranks always form a permutation.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataio::SplitAssignment;
use crate::error::{Error, Result};
use crate::model::FactorModel;

/// Persistence values evaluated by the standard protocol.
pub const PROTOCOL_PERSISTENCES: [f64; 3] = [0.8, 0.9, 0.95];

/// RBP persistence, strictly inside (0, 1).
#[derive(Debug, Clone, Copy)]
pub struct Persistence(f64);

impl Persistence {
    pub fn new(p: f64) -> Result<Self> {
        if p > 0.0 && p < 1.0 {
            Ok(Persistence(p))
        } else {
            Err(Error::arg(format!("persistence {p} outside (0, 1)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The three protocol persistences.
    pub fn protocol() -> [Persistence; 3] {
        PROTOCOL_PERSISTENCES.map(Persistence)
    }
}

impl PartialEq for Persistence {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl Eq for Persistence {}

impl Hash for Persistence {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state)
    }
}

impl PartialOrd for Persistence {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Persistence {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for Persistence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricKind {
    Rr,
    Ap,
    Ndcg,
    Rbp(Persistence),
    Nrbp(Persistence),
}

impl MetricKind {
    /// Short name without the persistence suffix.
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Rr => "rr",
            MetricKind::Ap => "ap",
            MetricKind::Ndcg => "ndcg",
            MetricKind::Rbp(_) => "rbp",
            MetricKind::Nrbp(_) => "nrbp",
        }
    }

    pub fn persistence(&self) -> Option<Persistence> {
        match self {
            MetricKind::Rbp(p) | MetricKind::Nrbp(p) => Some(*p),
            _ => None,
        }
    }

    /// RR, AP, nDCG and RBP at the three protocol persistences.
    pub fn protocol_eval() -> [MetricKind; 6] {
        let [a, b, c] = Persistence::protocol();
        [
            MetricKind::Rr,
            MetricKind::Ap,
            MetricKind::Ndcg,
            MetricKind::Rbp(a),
            MetricKind::Rbp(b),
            MetricKind::Rbp(c),
        ]
    }

    /// Everything recorded in a training history: the protocol metrics plus
    /// normalized RBP at the same persistences.
    pub fn reported() -> Vec<MetricKind> {
        let mut v = Self::protocol_eval().to_vec();
        v.extend(Persistence::protocol().map(MetricKind::Nrbp));
        v
    }

    /// Parses a name and an optional separately supplied persistence.
    pub fn from_parts(name: &str, p: Option<f64>) -> Result<Self> {
        let kind = match (name.to_ascii_lowercase().as_str(), p) {
            ("rr", None) => MetricKind::Rr,
            ("ap", None) => MetricKind::Ap,
            ("ndcg", None) => MetricKind::Ndcg,
            ("rbp", Some(p)) => MetricKind::Rbp(Persistence::new(p)?),
            ("nrbp", Some(p)) => MetricKind::Nrbp(Persistence::new(p)?),
            ("rbp" | "nrbp", None) => {
                return Err(Error::arg(format!("metric `{name}` needs a persistence")))
            }
            ("rr" | "ap" | "ndcg", Some(_)) => {
                return Err(Error::arg(format!("metric `{name}` takes no persistence")))
            }
            _ => return Err(Error::arg(format!("unknown metric `{name}`"))),
        };
        Ok(kind)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.persistence() {
            Some(p) => write!(f, "{}@{}", self.name(), p),
            None => f.write_str(self.name()),
        }
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    /// Accepts `rr`, `ap`, `ndcg`, `rbp@0.9`, `nrbp@0.95`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('@') {
            Some((name, p)) => {
                let p: f64 = p
                    .parse()
                    .map_err(|_| Error::arg(format!("bad persistence in `{s}`")))?;
                MetricKind::from_parts(name, Some(p))
            }
            None => MetricKind::from_parts(s, None),
        }
    }
}

impl Serialize for MetricKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MetricKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Exact 1-based ranks: one plus the number of items with a strictly greater
/// score, with equal scores ordered by ascending item id.
pub fn exact_ranks(scores: &[f64], item_ids: &[usize]) -> Result<Vec<usize>> {
    if scores.len() != item_ids.len() {
        return Err(Error::arg("scores and item ids differ in length"));
    }
    if let Some(pos) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::arg(format!(
            "non-finite score {} at position {pos}",
            scores[pos]
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(item_ids[a].cmp(&item_ids[b]))
    });
    let mut ranks = vec![0; scores.len()];
    for (r, &idx) in order.iter().enumerate() {
        ranks[idx] = r + 1;
    }
    Ok(ranks)
}

/// A user's candidate list with exact ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedUserList {
    labels: Vec<bool>,
    ranks: Vec<usize>,
    positive_ranks: Vec<usize>,
}

impl RankedUserList {
    pub fn new(scores: &[f64], labels: &[bool], item_ids: &[usize]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::arg("scores and labels differ in length"));
        }
        let ranks = exact_ranks(scores, item_ids)?;
        Self::from_ranks(labels.to_vec(), ranks)
    }

    /// Builds a list from precomputed ranks, which must be a permutation of
    /// `1..=len`.
    pub fn from_ranks(labels: Vec<bool>, ranks: Vec<usize>) -> Result<Self> {
        if labels.len() != ranks.len() {
            return Err(Error::arg("labels and ranks differ in length"));
        }
        let mut seen = vec![false; ranks.len()];
        for &r in &ranks {
            if r == 0 || r > ranks.len() || std::mem::replace(&mut seen[r - 1], true) {
                return Err(Error::arg("ranks are not a permutation of 1..=N"));
            }
        }
        let mut positive_ranks: Vec<usize> = ranks
            .iter()
            .zip(&labels)
            .filter_map(|(&r, &y)| y.then_some(r))
            .collect();
        if positive_ranks.is_empty() {
            return Err(Error::arg("ranked list has no positive item"));
        }
        positive_ranks.sort_unstable();
        Ok(RankedUserList {
            labels,
            ranks,
            positive_ranks,
        })
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    /// Ranks of the positive items, ascending.
    pub fn positive_ranks(&self) -> &[usize] {
        &self.positive_ranks
    }

    pub fn n_positive(&self) -> usize {
        self.positive_ranks.len()
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

/// Binary-gain discount `1 / log2(rank + 1)`.
#[inline]
pub fn dcg_discount(rank: f64) -> f64 {
    1.0 / (rank + 1.0).log2()
}

/// DCG of `m` positives at ranks `1..=m`.
pub fn ideal_dcg(m: usize) -> f64 {
    (1..=m).map(|r| dcg_discount(r as f64)).sum()
}

/// `sum_{k=0}^{m-1} p^k`, the unnormalized ideal RBP.
pub fn rbp_ideal_mass(p: f64, m: usize) -> f64 {
    // direct summation keeps the exact-metric path free of 1 - p^m cancellation
    let mut acc = 0.0;
    let mut w = 1.0;
    for _ in 0..m {
        acc += w;
        w *= p;
    }
    acc
}

pub fn ndcg(list: &RankedUserList) -> f64 {
    // gain 2^y - 1 collapses to y for binary labels
    ndcg_from_positive_ranks(list.positive_ranks())
}

pub fn average_precision(list: &RankedUserList) -> f64 {
    ap_from_positive_ranks(list.positive_ranks())
}

pub fn reciprocal_rank(list: &RankedUserList) -> f64 {
    1.0 / list.positive_ranks()[0] as f64
}

pub fn rbp(list: &RankedUserList, p: f64) -> Result<f64> {
    let p = Persistence::new(p)?.value();
    Ok((1.0 - p) * rbp_mass(list.positive_ranks(), p))
}

pub fn nrbp(list: &RankedUserList, p: f64) -> Result<f64> {
    let p = Persistence::new(p)?.value();
    let ranks = list.positive_ranks();
    Ok(rbp_mass(ranks, p) / rbp_ideal_mass(p, ranks.len()))
}

fn ndcg_from_positive_ranks(ranks: &[usize]) -> f64 {
    let dcg: f64 = ranks.iter().map(|&r| dcg_discount(r as f64)).sum();
    dcg / ideal_dcg(ranks.len())
}

/// `ranks` must be ascending: the k-th positive has k positives at or above it.
fn ap_from_positive_ranks(ranks: &[usize]) -> f64 {
    let sum: f64 = ranks
        .iter()
        .enumerate()
        .map(|(k, &r)| (k + 1) as f64 / r as f64)
        .sum();
    sum / ranks.len() as f64
}

fn rbp_mass(ranks: &[usize], p: f64) -> f64 {
    ranks.iter().map(|&r| p.powi(r as i32 - 1)).sum()
}

/// Evaluates `kind` from ascending positive ranks.
pub fn evaluate_positive_ranks(kind: MetricKind, ranks: &[usize]) -> f64 {
    debug_assert!(!ranks.is_empty() && ranks.windows(2).all(|w| w[0] < w[1]));
    match kind {
        MetricKind::Rr => 1.0 / ranks[0] as f64,
        MetricKind::Ap => ap_from_positive_ranks(ranks),
        MetricKind::Ndcg => ndcg_from_positive_ranks(ranks),
        MetricKind::Rbp(p) => (1.0 - p.value()) * rbp_mass(ranks, p.value()),
        MetricKind::Nrbp(p) => rbp_mass(ranks, p.value()) / rbp_ideal_mass(p.value(), ranks.len()),
    }
}

pub fn evaluate_user(list: &RankedUserList, kind: MetricKind) -> f64 {
    evaluate_positive_ranks(kind, list.positive_ranks())
}

/// Per-user metric values over a split's test candidates, and their means.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub kinds: Vec<MetricKind>,
    /// Users that were evaluated, ascending.
    pub users: Vec<usize>,
    /// `per_user[k][j]` is the value of `kinds[j]` for `users[k]`.
    pub per_user: Vec<Vec<f64>>,
    /// Unweighted mean over evaluated users, aligned with `kinds`.
    pub means: Vec<f64>,
    /// Users skipped for lack of test positives.
    pub excluded_users: Vec<usize>,
}

impl EvalReport {
    pub fn mean(&self, kind: MetricKind) -> Option<f64> {
        self.kinds
            .iter()
            .position(|k| *k == kind)
            .map(|j| self.means[j])
    }

    pub fn user_values(&self, kind: MetricKind) -> Option<Vec<f64>> {
        let j = self.kinds.iter().position(|k| *k == kind)?;
        Some(self.per_user.iter().map(|row| row[j]).collect())
    }

    /// Rows of `user, metric, p, value`, followed by one `mean` row per metric.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["user", "metric", "p", "value"])?;
        let p_of = |k: &MetricKind| k.persistence().map(|p| p.to_string()).unwrap_or_default();
        for (u, row) in self.users.iter().zip(&self.per_user) {
            for (k, v) in self.kinds.iter().zip(row) {
                out.write_record([u.to_string(), k.name().into(), p_of(k), v.to_string()])?;
            }
        }
        for (k, v) in self.kinds.iter().zip(&self.means) {
            out.write_record(["mean".into(), k.name().into(), p_of(k), v.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Scores every user's test candidates with `model` and evaluates `kinds`.
pub fn evaluate_all(
    model: &FactorModel,
    split: &SplitAssignment,
    kinds: &[MetricKind],
) -> Result<EvalReport> {
    let rows: Vec<Option<Vec<f64>>> = split
        .users
        .par_iter()
        .enumerate()
        .map(|(u, us)| {
            if us.test_pos.is_empty() {
                return Ok(None);
            }
            let (items, labels) = us.test_candidates();
            let scores = model.predict_scores(u, &items)?;
            let list = RankedUserList::new(&scores, &labels, &items)?;
            Ok(Some(
                kinds.iter().map(|&k| evaluate_user(&list, k)).collect(),
            ))
        })
        .collect::<Result<_>>()?;

    let mut users = Vec::new();
    let mut per_user = Vec::new();
    let mut excluded_users = Vec::new();
    for (u, row) in rows.into_iter().enumerate() {
        match row {
            Some(r) => {
                users.push(u);
                per_user.push(r);
            }
            None => excluded_users.push(u),
        }
    }
    let n = per_user.len() as f64;
    let means = (0..kinds.len())
        .map(|j| {
            if per_user.is_empty() {
                f64::NAN
            } else {
                per_user.iter().map(|r| r[j]).sum::<f64>() / n
            }
        })
        .collect();
    Ok(EvalReport {
        kinds: kinds.to_vec(),
        users,
        per_user,
        means,
        excluded_users,
    })
}
