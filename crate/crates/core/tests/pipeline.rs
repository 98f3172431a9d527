use std::io::Write;

use metricopt::dataio::{
    binarize_and_filter, generate_synthetic, load_interactions, SyntheticConfig,
};
use metricopt::experiment::prepare_split;
use metricopt::metrics::{evaluate_all, MetricKind};
use metricopt::model::FactorModel;
use metricopt::trainer::{train, MetricTrace, Objective, Paradigm, TrainConfig};
use metricopt::{ListLossKind, Persistence, RatingFormat};

fn synthetic(seed: u64) -> metricopt::InteractionSet {
    generate_synthetic(&SyntheticConfig {
        n_users: 200,
        n_items: 500,
        latent_dim: 8,
        positives_per_user: 25,
        seed,
    })
    .unwrap()
}

#[test]
fn graded_file_to_trained_model() {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    // three users: two keep 25+ ratings of 4 or 5, one falls short
    for u in 0..3 {
        for i in 0..60 {
            let rating = if (i + u) % 2 == 0 { 5 } else { 2 };
            if u == 2 && rating == 5 && i > 20 {
                continue;
            }
            writeln!(file, "user{u}\titem{i}\t{rating}").unwrap();
        }
    }
    let raw = load_interactions(file.path(), RatingFormat::Graded).unwrap();
    let set = binarize_and_filter(&raw, 4, 25).unwrap();
    assert_eq!(set.n_users(), 2);
    assert_eq!(set.n_items(), 60);
    let split = prepare_split(&set, 0, 1.0, 4, 0.8).unwrap();
    assert!(split
        .users
        .iter()
        .all(|u| u.train_pos.len() == 24 && u.test_pos.len() == 6));

    let cfg = TrainConfig {
        epochs: 10,
        eval_every: 5,
        dim: 4,
        ..TrainConfig::new(Objective::Listwise(ListLossKind::Ndcg), 1.0, 4)
    };
    let h = train(&cfg, &split, &set).unwrap();
    assert_eq!(h.trace.epochs, vec![0, 5, 10]);
    let mut ckpt = Vec::new();
    h.final_model.write_checkpoint(&mut ckpt).unwrap();
    let back = FactorModel::read_checkpoint(&ckpt[..]).unwrap();
    let report = evaluate_all(&back, &split, &[MetricKind::Ndcg]).unwrap();
    assert_eq!(
        report.means[0],
        h.trace.value_at(10, MetricKind::Ndcg).unwrap()
    );
}

/// Desk-scale runs should beat their own initialization on the metric they
/// optimize in most seeds. Listwise RR is left out: with ~20 training
/// positives its weight is a product of ~19 sigmoids near 1/2, so from a
/// small init its gradient is around 1e-5 and 50 epochs barely move it.
#[test]
fn short_runs_improve_their_objective() {
    let mut objectives = Paradigm::Pairwise.protocol_objectives();
    objectives.extend(
        [ListLossKind::Ap, ListLossKind::Ndcg, ListLossKind::Nrbp].map(Objective::Listwise),
    );
    let sets: Vec<_> = (1..=3).map(synthetic).collect();
    let splits: Vec<_> = sets
        .iter()
        .map(|s| prepare_split(s, 0, 1.0, 0, 0.8).unwrap())
        .collect();
    for objective in objectives {
        let lr = match objective.paradigm() {
            Paradigm::Pairwise => 0.1,
            Paradigm::Listwise => 0.01,
        };
        for target in objective.target_metrics() {
            let improved = (0..3)
                .filter(|&s| {
                    let cfg = TrainConfig {
                        epochs: 50,
                        dim: 8,
                        keep_best_models: false,
                        ..TrainConfig::new(objective, lr, s as u64)
                    };
                    let h = train(&cfg, &splits[s], &sets[s]).unwrap();
                    h.select_best(target).unwrap().1 > h.trace.value_at(0, target).unwrap()
                })
                .count();
            assert!(
                improved >= 2,
                "{objective} on {target}: improved in {improved} of 3 seeds"
            );
        }
    }
}

#[test]
fn listwise_rr_gradient_vanishes_from_small_init() {
    let set = synthetic(3);
    let split = prepare_split(&set, 0, 1.0, 0, 0.8).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        dim: 8,
        ..TrainConfig::new(Objective::Listwise(ListLossKind::Rr), 1.0, 0)
    };
    let h = train(&cfg, &split, &set).unwrap();
    let metricopt::trainer::EpochStats::Listwise {
        mean_loss,
        grad_norm,
    } = h.epoch_log[0]
    else {
        panic!("listwise run logged pairwise stats");
    };
    assert!(
        mean_loss.abs() < 1e-4 && grad_norm < 1e-3,
        "{mean_loss} {grad_norm}"
    );
}

#[test]
fn listwise_nrbp_selects_per_persistence_from_one_history() {
    let set = synthetic(2);
    let split = prepare_split(&set, 0, 1.0, 0, 0.8).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        eval_every: 5,
        dim: 8,
        ..TrainConfig::new(Objective::Listwise(ListLossKind::Nrbp), 0.01, 0)
    };
    let h = train(&cfg, &split, &set).unwrap();
    let mut buf = Vec::new();
    h.trace.write_csv(&mut buf).unwrap();
    let reloaded = MetricTrace::read_csv(&buf[..]).unwrap();
    for p in [0.8, 0.9, 0.95] {
        let kind = MetricKind::Rbp(Persistence::new(p).unwrap());
        let (epoch, value) = h.select_best(kind).unwrap();
        assert_eq!(reloaded.select_best(kind).unwrap(), (epoch, value));
        assert!(h.trace.epochs.contains(&epoch));
        for e in &h.trace.epochs {
            assert!(h.trace.value_at(*e, kind).unwrap() <= value);
        }
    }
}
