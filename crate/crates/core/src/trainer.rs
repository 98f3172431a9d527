//! Training runs: the epoch loop, periodic evaluation, best-epoch selection
//! and the learning-rate grid.
//!
//! Model selection reads test-set performance; no separate validation split
//! is held out.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{InteractionSet, SplitAssignment};
use crate::error::{Error, Result};
use crate::listwise::{train_epoch_listwise, ListLossKind};
use crate::metrics::{evaluate_all, MetricKind, Persistence};
use crate::model::{init_model, FactorModel, SgdConfig, DEFAULT_DIM, DEFAULT_INIT_STD};
use crate::pairwise::train_epoch_pairwise;

pub const DEFAULT_EPOCHS: usize = 3000;
pub const DEFAULT_EVAL_EVERY: usize = 10;
pub const PAIRWISE_LR_GRID: [f64; 3] = [0.001, 0.01, 0.1];
pub const LISTWISE_LR_GRID: [f64; 6] = [0.001, 0.01, 0.1, 1.0, 3.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Pairwise,
    Listwise,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Pairwise => "pairwise",
            Paradigm::Listwise => "listwise",
        }
    }

    pub fn lr_grid(self) -> &'static [f64] {
        match self {
            Paradigm::Pairwise => &PAIRWISE_LR_GRID,
            Paradigm::Listwise => &LISTWISE_LR_GRID,
        }
    }

    /// RR, AP, nDCG and nRBP at each protocol persistence for pairwise; the
    /// four persistence-free losses for listwise.
    pub fn protocol_objectives(self) -> Vec<Objective> {
        match self {
            Paradigm::Pairwise => {
                let mut v = vec![
                    Objective::Pairwise(MetricKind::Rr),
                    Objective::Pairwise(MetricKind::Ap),
                    Objective::Pairwise(MetricKind::Ndcg),
                ];
                v.extend(Persistence::protocol().map(|p| Objective::Pairwise(MetricKind::Nrbp(p))));
                v
            }
            Paradigm::Listwise => ListLossKind::ALL.map(Objective::Listwise).to_vec(),
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pairwise" | "lambdarank" => Ok(Paradigm::Pairwise),
            "listwise" => Ok(Paradigm::Listwise),
            _ => Err(Error::arg(format!("unknown paradigm `{s}`"))),
        }
    }
}

/// What a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Objective {
    Pairwise(MetricKind),
    Listwise(ListLossKind),
}

impl Objective {
    /// Builds an objective from CLI-style parts. Pairwise nRBP needs `p`;
    /// listwise losses reject it.
    pub fn parse(paradigm: Paradigm, loss: &str, p: Option<f64>) -> Result<Self> {
        match paradigm {
            Paradigm::Pairwise => {
                let kind = match loss.split_once('@') {
                    Some(_) if p.is_some() => {
                        return Err(Error::arg("persistence given twice"));
                    }
                    Some(_) => loss.parse()?,
                    None => MetricKind::from_parts(loss, p)?,
                };
                Ok(Objective::Pairwise(kind))
            }
            Paradigm::Listwise => {
                if p.is_some() {
                    return Err(Error::arg(
                        "listwise losses take no persistence; select epochs per p instead",
                    ));
                }
                Ok(Objective::Listwise(loss.parse()?))
            }
        }
    }

    pub fn paradigm(&self) -> Paradigm {
        match self {
            Objective::Pairwise(_) => Paradigm::Pairwise,
            Objective::Listwise(_) => Paradigm::Listwise,
        }
    }

    /// Evaluation metrics this objective targets. Listwise nRBP targets
    /// normalized RBP at every protocol persistence.
    pub fn target_metrics(&self) -> Vec<MetricKind> {
        match *self {
            Objective::Pairwise(k) => vec![k],
            Objective::Listwise(ListLossKind::Rr) => vec![MetricKind::Rr],
            Objective::Listwise(ListLossKind::Ap) => vec![MetricKind::Ap],
            Objective::Listwise(ListLossKind::Ndcg) => vec![MetricKind::Ndcg],
            Objective::Listwise(ListLossKind::Nrbp) => {
                Persistence::protocol().map(MetricKind::Nrbp).to_vec()
            }
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::Pairwise(k) => write!(f, "{k}"),
            Objective::Listwise(k) => write!(f, "{k}"),
        }
    }
}

impl Serialize for Objective {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(&format_args!("{}:{}", self.paradigm(), self))
    }
}

impl<'de> Deserialize<'de> for Objective {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let (paradigm, loss) = s
            .split_once(':')
            .ok_or_else(|| serde::de::Error::custom("expected `paradigm:loss`"))?;
        let paradigm: Paradigm = paradigm.parse().map_err(serde::de::Error::custom)?;
        Objective::parse(paradigm, loss, None).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub learning_rate: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub dim: usize,
    pub l2: f64,
    pub init_std: f64,
    /// Keep a copy of the model at each metric's best epoch.
    pub keep_best_models: bool,
}

impl TrainConfig {
    pub fn new(objective: Objective, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            objective,
            learning_rate,
            epochs: DEFAULT_EPOCHS,
            eval_every: DEFAULT_EVAL_EVERY,
            seed,
            dim: DEFAULT_DIM,
            l2: 0.0,
            init_std: DEFAULT_INIT_STD,
            keep_best_models: true,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            l2: self.l2,
            seed: self.seed,
            init_std: self.init_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd().validate()?;
        if self.eval_every == 0 {
            return Err(Error::arg("eval_every must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::arg("latent dimension must be at least 1"));
        }
        Ok(())
    }

    /// Epochs at which the model is evaluated: 0, then every `eval_every`.
    pub fn eval_epochs(&self) -> impl Iterator<Item = usize> + '_ {
        (0..=self.epochs).filter(move |e| e % self.eval_every == 0)
    }
}

/// Aggregate metric values per evaluated epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricTrace {
    pub kinds: Vec<MetricKind>,
    pub epochs: Vec<usize>,
    /// `values[t][k]`: mean of `kinds[k]` at `epochs[t]`.
    pub values: Vec<Vec<f64>>,
}

impl MetricTrace {
    pub fn new(kinds: Vec<MetricKind>) -> Self {
        MetricTrace {
            kinds,
            epochs: Vec::new(),
            values: Vec::new(),
        }
    }

    fn column(&self, metric: MetricKind) -> Option<usize> {
        self.kinds.iter().position(|k| *k == metric)
    }

    pub fn value_at(&self, epoch: usize, metric: MetricKind) -> Option<f64> {
        let k = self.column(metric)?;
        let t = self.epochs.iter().position(|&e| e == epoch)?;
        Some(self.values[t][k])
    }

    /// Highest value of `metric` over evaluated epochs, earliest on ties.
    pub fn select_best(&self, metric: MetricKind) -> Result<(usize, f64)> {
        let k = self
            .column(metric)
            .ok_or_else(|| Error::contract(format!("metric {metric} not recorded")))?;
        let mut best: Option<(usize, f64)> = None;
        for (e, row) in self.epochs.iter().zip(&self.values) {
            let v = row[k];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((*e, v));
            }
        }
        best.ok_or_else(|| Error::contract("empty history"))
    }

    /// Rows of `epoch, metric, p, value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "metric", "p", "value"])?;
        for (e, row) in self.epochs.iter().zip(&self.values) {
            for (k, v) in self.kinds.iter().zip(row) {
                let p = k.persistence().map(|p| p.to_string()).unwrap_or_default();
                out.write_record([e.to_string(), k.name().to_string(), p, v.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut trace = MetricTrace::default();
        let mut cells: BTreeMap<usize, Vec<(MetricKind, f64)>> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let bad = |m: &str| Error::data(format!("history row {:?}: {m}", rec.position()));
            let epoch: usize = rec[0].parse().map_err(|_| bad("epoch"))?;
            let p = if rec[2].is_empty() {
                None
            } else {
                Some(rec[2].parse::<f64>().map_err(|_| bad("p"))?)
            };
            let kind = MetricKind::from_parts(&rec[1], p)?;
            let value: f64 = rec[3].parse().map_err(|_| bad("value"))?;
            if !trace.kinds.contains(&kind) {
                trace.kinds.push(kind);
            }
            cells.entry(epoch).or_default().push((kind, value));
        }
        for (epoch, entries) in cells {
            let mut row = vec![f64::NAN; trace.kinds.len()];
            for (k, v) in entries {
                row[trace.column(k).unwrap()] = v;
            }
            trace.epochs.push(epoch);
            trace.values.push(row);
        }
        Ok(trace)
    }
}

/// Per-epoch optimizer diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "paradigm", rename_all = "lowercase")]
pub enum EpochStats {
    Pairwise { mean_abs_lambda: f64, pairs: usize },
    Listwise { mean_loss: f64, grad_norm: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestModel {
    pub epoch: usize,
    pub value: f64,
    pub model: FactorModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub config: TrainConfig,
    pub trace: MetricTrace,
    /// Indexed by epoch - 1.
    pub epoch_log: Vec<EpochStats>,
    pub best_models: BTreeMap<MetricKind, BestModel>,
    pub final_model: FactorModel,
    pub divergence: Option<Divergence>,
}

impl TrainHistory {
    pub fn select_best(&self, metric: MetricKind) -> Result<(usize, f64)> {
        self.trace.select_best(metric)
    }

    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    /// Rows of `epoch, paradigm, a, b`: `mean_abs_lambda, pairs` for pairwise,
    /// `mean_loss, grad_norm` for listwise.
    pub fn write_log_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        match self.config.objective.paradigm() {
            Paradigm::Pairwise => out.write_record(["epoch", "mean_abs_lambda", "pairs"])?,
            Paradigm::Listwise => out.write_record(["epoch", "mean_loss", "grad_norm"])?,
        }
        for (t, s) in self.epoch_log.iter().enumerate() {
            let (a, b) = match *s {
                EpochStats::Pairwise {
                    mean_abs_lambda,
                    pairs,
                } => (mean_abs_lambda.to_string(), pairs.to_string()),
                EpochStats::Listwise {
                    mean_loss,
                    grad_norm,
                } => (mean_loss.to_string(), grad_norm.to_string()),
            };
            out.write_record([(t + 1).to_string(), a, b])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Trains one configuration and records every reported metric at epoch 0 and
/// every `eval_every` epochs. Non-finite values end the run early and are
/// recorded in [`TrainHistory::divergence`] rather than returned as errors.
pub fn train(
    config: &TrainConfig,
    split: &SplitAssignment,
    set: &InteractionSet,
) -> Result<TrainHistory> {
    config.validate()?;
    if split.n_users() != set.n_users() {
        return Err(Error::contract(format!(
            "split has {} users, interaction set {}",
            split.n_users(),
            set.n_users()
        )));
    }
    let mut model = init_model(
        set.n_users(),
        set.n_items(),
        config.dim,
        config.seed,
        config.init_std,
    )?;
    let sgd = config.sgd();
    let kinds = MetricKind::reported();
    let mut history = TrainHistory {
        config: *config,
        trace: MetricTrace::new(kinds.clone()),
        epoch_log: Vec::with_capacity(config.epochs),
        best_models: BTreeMap::new(),
        final_model: model.clone(),
        divergence: None,
    };

    let record = |history: &mut TrainHistory, model: &FactorModel, epoch: usize| -> Result<()> {
        let report = evaluate_all(model, split, &kinds)?;
        if report.means.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                epoch,
                user: 0,
                reason: "non-finite evaluation".into(),
            });
        }
        if config.keep_best_models {
            for (k, &v) in kinds.iter().zip(&report.means) {
                let improved = history.best_models.get(k).is_none_or(|b| v > b.value);
                if improved {
                    history.best_models.insert(
                        *k,
                        BestModel {
                            epoch,
                            value: v,
                            model: model.clone(),
                        },
                    );
                }
            }
        }
        history.trace.epochs.push(epoch);
        history.trace.values.push(report.means);
        Ok(())
    };

    record(&mut history, &model, 0)?;
    for epoch in 1..=config.epochs {
        let step = match config.objective {
            Objective::Pairwise(kind) => train_epoch_pairwise(&mut model, split, kind, &sgd, epoch)
                .map(|s| EpochStats::Pairwise {
                    mean_abs_lambda: s.mean_abs_lambda,
                    pairs: s.pairs,
                }),
            Objective::Listwise(kind) => train_epoch_listwise(&mut model, split, kind, &sgd, epoch)
                .map(|s| EpochStats::Listwise {
                    mean_loss: s.mean_loss,
                    grad_norm: s.grad_norm,
                }),
        };
        let outcome = step.and_then(|stats| {
            history.epoch_log.push(stats);
            if epoch % config.eval_every == 0 {
                record(&mut history, &model, epoch)
            } else {
                Ok(())
            }
        });
        match outcome {
            Ok(()) => {}
            Err(Error::Training { reason, .. }) | Err(Error::Argument(reason)) => {
                history.divergence = Some(Divergence { epoch, reason });
                break;
            }
            Err(other) => return Err(other),
        }
    }
    history.final_model = model;
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrRun {
    pub learning_rate: f64,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSearch {
    /// Index into `runs` of the selected rate.
    pub best: usize,
    /// One run per rate, ascending by rate.
    pub runs: Vec<LrRun>,
}

impl LrSearch {
    pub fn best_run(&self) -> &LrRun {
        &self.runs[self.best]
    }

    pub fn best_config(&self) -> TrainConfig {
        self.best_run().history.config
    }
}

/// Best `(run index, epoch, value)` of `target` over non-diverged runs; ties go
/// to the earlier run.
pub fn select_over_runs(runs: &[LrRun], target: MetricKind) -> Result<Option<(usize, usize, f64)>> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (idx, run) in runs.iter().enumerate() {
        if run.history.diverged() {
            continue;
        }
        let (epoch, value) = run.history.select_best(target)?;
        if best.is_none_or(|(_, _, b)| value > b) {
            best = Some((idx, epoch, value));
        }
    }
    Ok(best)
}

/// Trains one run per learning rate (in parallel) and keeps the rate whose
/// best-epoch value of `target` is highest. Ties go to the smaller rate;
/// diverged runs are never selected.
pub fn lr_search(
    base: &TrainConfig,
    split: &SplitAssignment,
    set: &InteractionSet,
    grid: &[f64],
    target: MetricKind,
) -> Result<LrSearch> {
    if grid.is_empty() {
        return Err(Error::arg("empty learning-rate grid"));
    }
    let mut rates = grid.to_vec();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let runs = rates
        .par_iter()
        .map(|&lr| {
            let cfg = TrainConfig {
                learning_rate: lr,
                ..*base
            };
            train(&cfg, split, set).map(|history| LrRun {
                learning_rate: lr,
                history,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    match select_over_runs(&runs, target)? {
        Some((best, _, _)) => Ok(LrSearch { best, runs }),
        None => Err(Error::Grid(format!(
            "all {} learning rates diverged for {}",
            runs.len(),
            base.objective
        ))),
    }
}
