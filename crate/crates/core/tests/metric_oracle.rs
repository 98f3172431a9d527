mod common;

use common::oracle;
use metricopt::listwise::smooth_ranks;
use metricopt::metrics::{evaluate_user, exact_ranks, RankedUserList};
use metricopt::pairwise::swap_delta;
use metricopt::{MetricKind, Persistence};
use proptest::prelude::*;

/// Scores on a coarse grid so ties are common, labels with at least one positive.
fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..=12).prop_flat_map(|n| {
        (
            prop::collection::vec((-4i32..=4).prop_map(|k| k as f64 * 0.5), n),
            prop::collection::vec(any::<bool>(), n),
            0..n,
        )
            .prop_map(|(s, mut y, forced)| {
                y[forced] = true;
                (s, y)
            })
    })
}

fn kinds() -> Vec<(MetricKind, &'static str, Option<f64>)> {
    let mut v = vec![
        (MetricKind::Rr, "rr", None),
        (MetricKind::Ap, "ap", None),
        (MetricKind::Ndcg, "ndcg", None),
    ];
    for p in [0.8, 0.9, 0.95] {
        let per = Persistence::new(p).unwrap();
        v.push((MetricKind::Rbp(per), "rbp", Some(p)));
        v.push((MetricKind::Nrbp(per), "nrbp", Some(p)));
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ranks_match_oracle((scores, _labels) in instance()) {
        let ids: Vec<usize> = (0..scores.len()).rev().collect();
        prop_assert_eq!(exact_ranks(&scores, &ids).unwrap(), oracle::ranks(&scores, &ids));
    }

    #[test]
    fn metrics_match_oracle((scores, labels) in instance()) {
        let ids: Vec<usize> = (0..scores.len()).collect();
        let list = RankedUserList::new(&scores, &labels, &ids).unwrap();
        let ranks = oracle::ranks(&scores, &ids);
        for (kind, name, p) in kinds() {
            let want = oracle::metric(name, p, &ranks, &labels);
            prop_assert!((evaluate_user(&list, kind) - want).abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn swap_deltas_match_recomputation((scores, labels) in instance()) {
        let ids: Vec<usize> = (0..scores.len()).collect();
        let ranks = oracle::ranks(&scores, &ids);
        for (kind, name, p) in kinds() {
            for i in 0..labels.len() {
                for j in 0..labels.len() {
                    if labels[i] == labels[j] {
                        continue;
                    }
                    let want = oracle::swap_delta(name, p, &ranks, &labels, i, j);
                    let got = swap_delta(kind, &ranks, &labels, i, j);
                    prop_assert!((got - want).abs() < 1e-12, "{kind} {i}<->{j}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn smoothed_ranks_match_oracle(scores in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        for (a, b) in smooth_ranks(&scores).unwrap().iter().zip(oracle::smoothed_ranks(&scores)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
