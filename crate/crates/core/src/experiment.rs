//! The experiment grid and the analysis tables built from it.
//!
//! A grid crosses datasets × splits × negative sampling ratios × objectives.
//! Each cell trains one run per learning rate and, for every evaluation
//! metric, keeps the best `(rate, epoch)` pair. Cells are cached on disk under
//! a hash of their full configuration, so an interrupted grid resumes where it
//! stopped and produces the same table.
//!
//! Analysis replaces model-based marginal means with standardized scores and
//! bootstrap percentile intervals.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{
    binarize_and_filter, generate_synthetic, load_interactions, sample_negatives, split_train_test,
    InteractionSet, RatingFormat, SplitAssignment, SyntheticConfig, DEFAULT_MIN_POSITIVES,
    DEFAULT_POSITIVE_THRESHOLD, DEFAULT_TRAIN_FRACTION, PROTOCOL_NSRS,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_all, MetricKind};
use crate::model::{FactorModel, DEFAULT_DIM, DEFAULT_INIT_STD};
use crate::seed::{derive_seed, rng_for, Stream};
use crate::trainer::{
    select_over_runs, train, LrRun, Objective, Paradigm, TrainConfig, DEFAULT_EPOCHS,
    DEFAULT_EVAL_EVERY, LISTWISE_LR_GRID, PAIRWISE_LR_GRID,
};

pub const DEFAULT_SPLITS: u32 = 3;
pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_CONFIDENCE: f64 = 0.95;

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    File {
        path: PathBuf,
        format: RatingFormat,
        #[serde(default = "default_threshold")]
        positive_threshold: u8,
        #[serde(default = "default_min_positives")]
        min_positives: usize,
    },
    Synthetic(SyntheticConfig),
}

fn default_threshold() -> u8 {
    DEFAULT_POSITIVE_THRESHOLD
}

fn default_min_positives() -> usize {
    DEFAULT_MIN_POSITIVES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(flatten)]
    pub source: DataSource,
}

impl DatasetSpec {
    /// Loads and binarizes the dataset. Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<InteractionSet> {
        match &self.source {
            DataSource::File {
                path,
                format,
                positive_threshold,
                min_positives,
            } => {
                let raw = load_interactions(base.join(path), *format)?;
                binarize_and_filter(&raw, *positive_threshold, *min_positives)
            }
            DataSource::Synthetic(cfg) => generate_synthetic(cfg),
        }
    }
}

/// Declarative description of a grid, usually read from TOML.
///
/// Only `datasets` is required; every axis defaults to the full protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub datasets: Vec<DatasetSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_splits")]
    pub splits: u32,
    #[serde(default = "default_nsrs")]
    pub nsrs: Vec<f64>,
    #[serde(default = "default_paradigms")]
    pub paradigms: Vec<Paradigm>,
    /// Pairwise objectives such as `"ap"` or `"nrbp@0.9"`; default all six.
    #[serde(default)]
    pub pairwise_losses: Option<Vec<String>>,
    /// Listwise objectives: `"rr"`, `"ap"`, `"ndcg"`, `"nrbp"`; default all four.
    #[serde(default)]
    pub listwise_losses: Option<Vec<String>>,
    #[serde(default = "default_pairwise_grid")]
    pub pairwise_lr_grid: Vec<f64>,
    #[serde(default = "default_listwise_grid")]
    pub listwise_lr_grid: Vec<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub l2: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Metrics that get a result row per cell; default the six protocol metrics.
    #[serde(default = "default_eval_metrics")]
    pub eval_metrics: Vec<MetricKind>,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
}

fn default_splits() -> u32 {
    DEFAULT_SPLITS
}
fn default_nsrs() -> Vec<f64> {
    PROTOCOL_NSRS.to_vec()
}
fn default_paradigms() -> Vec<Paradigm> {
    vec![Paradigm::Pairwise, Paradigm::Listwise]
}
fn default_pairwise_grid() -> Vec<f64> {
    PAIRWISE_LR_GRID.to_vec()
}
fn default_listwise_grid() -> Vec<f64> {
    LISTWISE_LR_GRID.to_vec()
}
fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_eval_every() -> usize {
    DEFAULT_EVAL_EVERY
}
fn default_dim() -> usize {
    DEFAULT_DIM
}
fn default_init_std() -> f64 {
    DEFAULT_INIT_STD
}
fn default_train_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}
fn default_eval_metrics() -> Vec<MetricKind> {
    MetricKind::protocol_eval().to_vec()
}

impl GridSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: GridSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::arg("grid lists no datasets"));
        }
        let names: BTreeSet<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        if names.len() != self.datasets.len() {
            return Err(Error::arg("dataset names must be unique"));
        }
        if self.splits == 0 || self.nsrs.is_empty() || self.paradigms.is_empty() {
            return Err(Error::arg(
                "grid needs at least one split, ratio and paradigm",
            ));
        }
        if self.eval_metrics.is_empty() {
            return Err(Error::arg("grid needs at least one evaluation metric"));
        }
        for p in &self.paradigms {
            if self.lr_grid(*p).is_empty() {
                return Err(Error::arg(format!("empty learning-rate grid for {p}")));
            }
        }
        self.objectives()?;
        Ok(())
    }

    pub fn lr_grid(&self, paradigm: Paradigm) -> &[f64] {
        match paradigm {
            Paradigm::Pairwise => &self.pairwise_lr_grid,
            Paradigm::Listwise => &self.listwise_lr_grid,
        }
    }

    pub fn objectives(&self) -> Result<Vec<Objective>> {
        let mut out = Vec::new();
        for &paradigm in &self.paradigms {
            let names = match paradigm {
                Paradigm::Pairwise => &self.pairwise_losses,
                Paradigm::Listwise => &self.listwise_losses,
            };
            match names {
                None => out.extend(paradigm.protocol_objectives()),
                Some(names) => {
                    for n in names {
                        out.push(Objective::parse(paradigm, n, None)?);
                    }
                }
            }
        }
        Ok(out)
    }

    fn train_config(&self, objective: Objective, learning_rate: f64, split_id: u32) -> TrainConfig {
        TrainConfig {
            objective,
            learning_rate,
            epochs: self.epochs,
            eval_every: self.eval_every,
            seed: model_seed(self.seed, split_id),
            dim: self.dim,
            l2: self.l2,
            init_std: self.init_std,
            keep_best_models: false,
        }
    }
}

/// Reads a grid spec. Relative dataset paths are resolved against the
/// directory containing the file.
pub fn load_grid_spec(path: &Path) -> Result<(GridSpec, PathBuf)> {
    let text = fs::read_to_string(path)?;
    let spec = GridSpec::from_toml(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((spec, base))
}

/// Model seed for a split: every objective and rate on one split starts from
/// the same factors.
pub fn model_seed(seed: u64, split_id: u32) -> u64 {
    derive_seed(seed, Stream::ModelSeed, &[split_id as u64])
}

/// Positive split plus negatives for one `(split, nsr)`.
pub fn prepare_split(
    set: &InteractionSet,
    split_id: u32,
    nsr: f64,
    seed: u64,
    train_fraction: f64,
) -> Result<SplitAssignment> {
    let positives = split_train_test(set, split_id, seed, train_fraction)?;
    sample_negatives(&positives, set, nsr, seed)
}

/// One result per (dataset, split, nsr, paradigm, loss, eval metric).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResultRow {
    pub dataset: String,
    pub split: u32,
    pub nsr: f64,
    pub paradigm: Paradigm,
    pub loss: String,
    pub eval_metric: MetricKind,
    pub value: f64,
    pub best_epoch: usize,
    pub learning_rate: f64,
    /// Value of the metric before any training.
    pub initial_value: f64,
}

impl GridResultRow {
    pub fn objective(&self) -> Result<Objective> {
        Objective::parse(self.paradigm, &self.loss, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub dataset: String,
    pub split: u32,
    pub nsr: f64,
    pub paradigm: Paradigm,
    pub loss: String,
    pub reason: String,
}

/// Everything that determines a cell's output; hashed to name its cache dir.
#[derive(Debug, Clone, Serialize)]
struct CellKey<'a> {
    dataset: &'a DatasetSpec,
    seed: u64,
    split: u32,
    nsr: f64,
    train_fraction: f64,
    objective: Objective,
    lr_grid: &'a [f64],
    epochs: usize,
    eval_every: usize,
    dim: usize,
    l2: f64,
    init_std: f64,
    eval_metrics: &'a [MetricKind],
}

impl CellKey<'_> {
    fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub rows: Vec<GridResultRow>,
    pub failures: Vec<CellFailure>,
    /// Cells answered from the on-disk cache.
    pub reused: usize,
    pub computed: usize,
}

enum CellResult {
    Rows(Vec<GridResultRow>),
    Failed(CellFailure),
}

/// Runs every cell of `spec`, caching each under `out_dir/cells/<hash>/`.
/// With `resume`, cached cells are read back instead of retrained.
///
/// Writes `results.csv` and `failures.csv` into `out_dir`.
pub fn run_grid(spec: &GridSpec, base: &Path, out_dir: &Path, resume: bool) -> Result<GridOutcome> {
    spec.validate()?;
    let objectives = spec.objectives()?;
    fs::create_dir_all(out_dir.join("cells"))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::Grid(format!("thread pool: {e}")))?;

    let sets = spec
        .datasets
        .iter()
        .map(|ds| ds.load(base))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for (ds, set) in spec.datasets.iter().zip(&sets) {
        for split_id in 0..spec.splits {
            for &nsr in &spec.nsrs {
                let split = prepare_split(set, split_id, nsr, spec.seed, spec.train_fraction)?;
                cells.push((ds, set, split_id, nsr, split));
            }
        }
    }

    let tasks: Vec<(usize, Objective)> = (0..cells.len())
        .flat_map(|c| objectives.iter().map(move |o| (c, *o)))
        .collect();
    let results: Vec<(CellResult, bool)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(c, objective)| {
                let (ds, set, split_id, nsr, split) = &cells[c];
                let key = CellKey {
                    dataset: ds,
                    seed: spec.seed,
                    split: *split_id,
                    nsr: *nsr,
                    train_fraction: spec.train_fraction,
                    objective,
                    lr_grid: spec.lr_grid(objective.paradigm()),
                    epochs: spec.epochs,
                    eval_every: spec.eval_every,
                    dim: spec.dim,
                    l2: spec.l2,
                    init_std: spec.init_std,
                    eval_metrics: &spec.eval_metrics,
                };
                let dir = out_dir.join("cells").join(key.hash()?);
                if resume {
                    if let Some(done) = read_cached(&dir)? {
                        return Ok((done, true));
                    }
                }
                let result = run_cell(spec, ds, set, *split_id, *nsr, split, objective);
                write_cell(&dir, &key, &result)?;
                Ok((result, false))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut outcome = GridOutcome {
        rows: Vec::new(),
        failures: Vec::new(),
        reused: 0,
        computed: 0,
    };
    for (result, reused) in results {
        if reused {
            outcome.reused += 1;
        } else {
            outcome.computed += 1;
        }
        match result {
            CellResult::Rows(rows) => outcome.rows.extend(rows),
            CellResult::Failed(f) => outcome.failures.push(f),
        }
    }
    write_csv_rows(
        fs::File::create(out_dir.join("results.csv"))?,
        &outcome.rows,
    )?;
    write_csv_rows(
        fs::File::create(out_dir.join("failures.csv"))?,
        &outcome.failures,
    )?;
    Ok(outcome)
}

fn run_cell(
    spec: &GridSpec,
    ds: &DatasetSpec,
    set: &InteractionSet,
    split_id: u32,
    nsr: f64,
    split: &SplitAssignment,
    objective: Objective,
) -> CellResult {
    let fail = |reason: String| {
        CellResult::Failed(CellFailure {
            dataset: ds.name.clone(),
            split: split_id,
            nsr,
            paradigm: objective.paradigm(),
            loss: objective.to_string(),
            reason,
        })
    };
    let mut rates = spec.lr_grid(objective.paradigm()).to_vec();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let runs: Result<Vec<LrRun>> = rates
        .par_iter()
        .map(|&lr| {
            let cfg = spec.train_config(objective, lr, split_id);
            Ok(LrRun {
                learning_rate: lr,
                history: train(&cfg, split, set)?,
            })
        })
        .collect();
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    let mut rows = Vec::with_capacity(spec.eval_metrics.len());
    for &metric in &spec.eval_metrics {
        let (idx, best_epoch, value) = match select_over_runs(&runs, metric) {
            Ok(Some(best)) => best,
            Ok(None) => {
                return fail(format!("all {} learning rates diverged", runs.len()));
            }
            Err(e) => return fail(e.to_string()),
        };
        let initial_value = runs[idx]
            .history
            .trace
            .value_at(0, metric)
            .unwrap_or(f64::NAN);
        rows.push(GridResultRow {
            dataset: ds.name.clone(),
            split: split_id,
            nsr,
            paradigm: objective.paradigm(),
            loss: objective.to_string(),
            eval_metric: metric,
            value,
            best_epoch,
            learning_rate: runs[idx].learning_rate,
            initial_value,
        });
    }
    CellResult::Rows(rows)
}

fn read_cached(dir: &Path) -> Result<Option<CellResult>> {
    let rows = dir.join("rows.csv");
    if rows.exists() {
        return Ok(Some(CellResult::Rows(read_csv_rows(fs::File::open(
            rows,
        )?)?)));
    }
    let failure = dir.join("failure.json");
    if failure.exists() {
        let f: CellFailure = serde_json::from_reader(fs::File::open(failure)?)?;
        return Ok(Some(CellResult::Failed(f)));
    }
    Ok(None)
}

fn write_cell(dir: &Path, key: &CellKey<'_>, result: &CellResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = serde_json::to_vec_pretty(key)?;
    manifest.push(b'\n');
    fs::write(dir.join("manifest.json"), manifest)?;
    // write then rename, so a half-written marker never counts as done
    let (name, bytes) = match result {
        CellResult::Rows(rows) => {
            let mut buf = Vec::new();
            write_csv_rows(&mut buf, rows)?;
            ("rows.csv", buf)
        }
        CellResult::Failed(f) => {
            let mut buf = serde_json::to_vec_pretty(f)?;
            buf.push(b'\n');
            ("failure.json", buf)
        }
    };
    let tmp = dir.join(format!("{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, dir.join(name))?;
    Ok(())
}

pub fn write_csv_rows<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv_rows<R: Read, T: DeserializeOwned>(r: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// A grid row with its score standardized within `(dataset, nsr, eval_metric)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizedRow {
    pub dataset: String,
    pub split: u32,
    pub nsr: f64,
    pub paradigm: Paradigm,
    pub loss: String,
    pub eval_metric: MetricKind,
    pub value: f64,
    pub z_value: f64,
    /// Set when the group had one member or no spread; `z_value` is then 0.
    pub degenerate: bool,
}

/// `z = (value - mean) / sd` per `(dataset, nsr, eval_metric)` group, using
/// the population standard deviation, so `{0.4, 0.6}` maps to `{-1, 1}`.
/// Rows keep their input order.
pub fn standardize(rows: &[GridResultRow]) -> Vec<StandardizedRow> {
    let mut groups: BTreeMap<(&str, u64, MetricKind), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups
            .entry((r.dataset.as_str(), r.nsr.to_bits(), r.eval_metric))
            .or_default()
            .push(i);
    }
    let mut z = vec![(0.0, true); rows.len()];
    for members in groups.values() {
        let values: Vec<f64> = members.iter().map(|&i| rows[i].value).collect();
        let all_equal = values.iter().all(|v| *v == values[0]);
        if values.len() < 2 || all_equal {
            continue;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        for (&i, v) in members.iter().zip(&values) {
            z[i] = ((v - mean) / sd, false);
        }
    }
    rows.iter()
        .zip(z)
        .map(|(r, (z_value, degenerate))| StandardizedRow {
            dataset: r.dataset.clone(),
            split: r.split,
            nsr: r.nsr,
            paradigm: r.paradigm,
            loss: r.loss.clone(),
            eval_metric: r.eval_metric,
            value: r.value,
            z_value,
            degenerate,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub dataset: String,
    pub paradigm: Paradigm,
    pub eval_metric: MetricKind,
    pub loss: String,
    /// Number of (split, nsr) cells in which this loss attains the maximum.
    pub count: usize,
}

/// Counts, per `(dataset, paradigm, eval_metric)`, how often each loss is
/// best over the `(split, nsr)` cells. Tied losses are all credited, so a
/// group's counts sum to at least the number of cells.
///
/// Every loss must have a row in every cell seen for its dataset; otherwise
/// the missing combinations are reported.
pub fn best_loss_frequency(rows: &[GridResultRow]) -> Result<Vec<FrequencyRow>> {
    type Group<'a> = (&'a str, Paradigm, MetricKind);
    let mut cells_of: BTreeMap<&str, BTreeSet<(u32, u64)>> = BTreeMap::new();
    let mut losses_of: BTreeMap<(&str, Paradigm), BTreeSet<Objective>> = BTreeMap::new();
    let mut metrics_of: BTreeMap<&str, BTreeSet<MetricKind>> = BTreeMap::new();
    let mut value: BTreeMap<(Group<'_>, (u32, u64), Objective), f64> = BTreeMap::new();
    for r in rows {
        let objective = r.objective()?;
        let cell = (r.split, r.nsr.to_bits());
        cells_of.entry(&r.dataset).or_default().insert(cell);
        losses_of
            .entry((&r.dataset, r.paradigm))
            .or_default()
            .insert(objective);
        metrics_of
            .entry(&r.dataset)
            .or_default()
            .insert(r.eval_metric);
        let key = (
            (r.dataset.as_str(), r.paradigm, r.eval_metric),
            cell,
            objective,
        );
        if value.insert(key, r.value).is_some() {
            return Err(Error::Grid(format!(
                "duplicate row for {} split {} nsr {} {} {} {}",
                r.dataset, r.split, r.nsr, r.paradigm, r.loss, r.eval_metric
            )));
        }
    }

    let mut missing = Vec::new();
    let mut out = Vec::new();
    for (&(dataset, paradigm), losses) in &losses_of {
        for &metric in &metrics_of[dataset] {
            let mut counts: BTreeMap<Objective, usize> = losses.iter().map(|o| (*o, 0)).collect();
            for &cell in &cells_of[dataset] {
                let mut best = f64::NEG_INFINITY;
                let mut present = Vec::new();
                for &o in losses {
                    match value.get(&((dataset, paradigm, metric), cell, o)) {
                        Some(&v) => {
                            best = best.max(v);
                            present.push((o, v));
                        }
                        None => missing.push(format!(
                            "{dataset} split {} nsr {} {paradigm} {o} {metric}",
                            cell.0,
                            f64::from_bits(cell.1)
                        )),
                    }
                }
                for (o, v) in present {
                    if v == best {
                        *counts.get_mut(&o).unwrap() += 1;
                    }
                }
            }
            out.extend(counts.into_iter().map(|(o, count)| FrequencyRow {
                dataset: dataset.to_owned(),
                paradigm,
                eval_metric: metric,
                loss: o.to_string(),
                count,
            }));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Grid(format!(
            "incomplete grid, missing {} rows: {}",
            missing.len(),
            missing.join("; ")
        )));
    }
    Ok(out)
}

/// Sum of counts per `(dataset, paradigm, eval_metric)`.
pub fn frequency_row_sums(
    rows: &[FrequencyRow],
) -> BTreeMap<(String, Paradigm, MetricKind), usize> {
    let mut sums = BTreeMap::new();
    for r in rows {
        *sums
            .entry((r.dataset.clone(), r.paradigm, r.eval_metric))
            .or_default() += r.count;
    }
    sums
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserDiff {
    pub user: usize,
    pub train_positives: usize,
    pub value_a: f64,
    pub value_b: f64,
    pub diff: f64,
}

/// Per-user `metric(a) - metric(b)` on the split's test candidates, with each
/// user's number of training positives.
pub fn per_user_diff(
    model_a: &FactorModel,
    model_b: &FactorModel,
    split: &SplitAssignment,
    metric: MetricKind,
) -> Result<Vec<UserDiff>> {
    for (name, m) in [("a", model_a), ("b", model_b)] {
        if m.n_users() != split.n_users() {
            return Err(Error::contract(format!(
                "model {name} has {} users, split has {}",
                m.n_users(),
                split.n_users()
            )));
        }
    }
    let a = evaluate_all(model_a, split, &[metric])?;
    let b = evaluate_all(model_b, split, &[metric])?;
    if a.users != b.users {
        return Err(Error::contract("models evaluated different user sets"));
    }
    Ok(a.users
        .iter()
        .zip(a.per_user.iter().zip(&b.per_user))
        .map(|(&user, (va, vb))| UserDiff {
            user,
            train_positives: split.users[user].train_pos.len(),
            value_a: va[0],
            value_b: vb[0],
            diff: va[0] - vb[0],
        })
        .collect())
}

/// Pearson correlation; `None` when either side has no variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Correlation between each user's training positive count and the diff.
pub fn diff_size_correlation(diffs: &[UserDiff]) -> Option<f64> {
    let xs: Vec<f64> = diffs.iter().map(|d| d.train_positives as f64).collect();
    let ys: Vec<f64> = diffs.iter().map(|d| d.diff).collect();
    pearson(&xs, &ys)
}

/// Mean standardized score of one `(paradigm, loss, eval_metric)` with a
/// bootstrap percentile interval. Not an estimated marginal mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub paradigm: Paradigm,
    pub loss: String,
    pub eval_metric: MetricKind,
    pub n: usize,
    pub mean_z: f64,
    pub bootstrap_lower: f64,
    pub bootstrap_upper: f64,
    pub confidence: f64,
    pub resamples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: DEFAULT_RESAMPLES,
            confidence: DEFAULT_CONFIDENCE,
            seed: 0,
        }
    }
}

/// Groups standardized rows by `(paradigm, loss, eval_metric)` and reports
/// the mean z with a percentile bootstrap interval of the mean.
pub fn summarize(rows: &[StandardizedRow], cfg: &BootstrapConfig) -> Result<Vec<SummaryRow>> {
    if cfg.resamples == 0 || !(cfg.confidence > 0.0 && cfg.confidence < 1.0) {
        return Err(Error::arg(
            "bootstrap needs resamples > 0 and confidence in (0, 1)",
        ));
    }
    let mut groups: BTreeMap<(Paradigm, String, MetricKind), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.paradigm, r.loss.clone(), r.eval_metric))
            .or_default()
            .push(r.z_value);
    }
    let alpha = 1.0 - cfg.confidence;
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(g, ((paradigm, loss, eval_metric), zs))| {
            let n = zs.len();
            let mean_z = zs.iter().sum::<f64>() / n as f64;
            let mut rng = rng_for(cfg.seed, Stream::Bootstrap, &[g as u64]);
            let mut means: Vec<f64> = (0..cfg.resamples)
                .map(|_| (0..n).map(|_| zs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
                .collect();
            means.sort_by(f64::total_cmp);
            SummaryRow {
                paradigm,
                loss,
                eval_metric,
                n,
                mean_z,
                bootstrap_lower: quantile(&means, alpha / 2.0),
                bootstrap_upper: quantile(&means, 1.0 - alpha / 2.0),
                confidence: cfg.confidence,
                resamples: cfg.resamples,
            }
        })
        .collect())
}

/// Linear interpolation between order statistics of sorted `xs`.
fn quantile(xs: &[f64], q: f64) -> f64 {
    let pos = q * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    xs[lo] + (xs[hi] - xs[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use proptest::prelude::*;

    fn row(
        dataset: &str,
        split: u32,
        nsr: f64,
        loss: &str,
        metric: MetricKind,
        value: f64,
    ) -> GridResultRow {
        GridResultRow {
            dataset: dataset.into(),
            split,
            nsr,
            paradigm: Paradigm::Pairwise,
            loss: loss.into(),
            eval_metric: metric,
            value,
            best_epoch: 0,
            learning_rate: 0.1,
            initial_value: 0.0,
        }
    }

    fn full_grid(values: impl Fn(u32, f64, &str) -> f64) -> Vec<GridResultRow> {
        let mut rows = Vec::new();
        for split in 0..3 {
            for nsr in PROTOCOL_NSRS {
                for loss in ["rr", "ap", "ndcg"] {
                    rows.push(row(
                        "d",
                        split,
                        nsr,
                        loss,
                        MetricKind::Ap,
                        values(split, nsr, loss),
                    ));
                }
            }
        }
        rows
    }

    fn tiny_spec(epochs: usize) -> GridSpec {
        GridSpec::from_toml(&format!(
            r#"
            splits = 3
            nsrs = [1, 2, 5]
            paradigms = ["pairwise"]
            pairwise_losses = ["ap"]
            pairwise_lr_grid = [0.1]
            epochs = {epochs}
            eval_every = 2
            dim = 4
            workers = 2

            [[datasets]]
            name = "toy"
            source = "synthetic"
            n_users = 12
            n_items = 120
            latent_dim = 4
            positives_per_user = 25
            seed = 5
            "#
        ))
        .unwrap()
    }

    #[test]
    fn spec_defaults_follow_protocol() {
        let spec = GridSpec::from_toml(
            "[[datasets]]\nname = \"a\"\nsource = \"file\"\npath = \"a.tsv\"\nformat = \"graded\"\n",
        )
        .unwrap();
        assert_eq!(spec.splits, 3);
        assert_eq!(spec.nsrs, vec![1.0, 2.0, 5.0]);
        assert_eq!(spec.epochs, 3000);
        assert_eq!(spec.dim, 32);
        assert_eq!(spec.eval_metrics.len(), 6);
        assert_eq!(spec.objectives().unwrap().len(), 10);
        let DataSource::File {
            positive_threshold,
            min_positives,
            ..
        } = &spec.datasets[0].source
        else {
            panic!("expected a file source");
        };
        assert_eq!((*positive_threshold, *min_positives), (4, 25));
        assert!(GridSpec::from_toml("datasets = []").is_err());
        assert!(GridSpec::from_toml(
            "bogus = 1\n[[datasets]]\nname=\"a\"\nsource=\"file\"\npath=\"a\"\nformat=\"unary\""
        )
        .is_err());
    }

    #[test]
    fn grid_row_count_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(4);
        let first = run_grid(&spec, Path::new("."), dir.path(), false).unwrap();
        assert!(first.failures.is_empty());
        assert_eq!(first.rows.len(), 3 * 3 * 6);
        assert_eq!(first.computed, 9);
        let table = fs::read(dir.path().join("results.csv")).unwrap();

        // lose one cell and the final table, as after an interruption
        let cells: Vec<_> = fs::read_dir(dir.path().join("cells")).unwrap().collect();
        fs::remove_file(cells[0].as_ref().unwrap().path().join("rows.csv")).unwrap();
        fs::remove_file(dir.path().join("results.csv")).unwrap();
        let again = run_grid(&spec, Path::new("."), dir.path(), true).unwrap();
        assert_eq!((again.reused, again.computed), (8, 1));
        assert_eq!(again.rows, first.rows);
        assert_eq!(fs::read(dir.path().join("results.csv")).unwrap(), table);

        let back: Vec<GridResultRow> = read_csv_rows(&table[..]).unwrap();
        assert_eq!(back, first.rows);
    }

    #[test]
    fn changed_config_misses_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        run_grid(&tiny_spec(2), Path::new("."), dir.path(), true).unwrap();
        let other = run_grid(&tiny_spec(4), Path::new("."), dir.path(), true).unwrap();
        assert_eq!(other.reused, 0);
    }

    #[test]
    fn diverged_cells_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(4);
        spec.splits = 1;
        spec.nsrs = vec![1.0];
        spec.pairwise_lr_grid = vec![1e200];
        let out = run_grid(&spec, Path::new("."), dir.path(), false).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(out.failures.len(), 1);
        assert!(
            out.failures[0].reason.contains("diverged"),
            "{}",
            out.failures[0].reason
        );
    }

    #[test]
    fn standardize_two_values() {
        let rows = vec![
            row("d", 0, 1.0, "ap", MetricKind::Ap, 0.4),
            row("d", 0, 1.0, "rr", MetricKind::Ap, 0.6),
        ];
        let z = standardize(&rows);
        assert!((z[0].z_value + 1.0).abs() < 1e-12 && (z[1].z_value - 1.0).abs() < 1e-12);
        assert!(!z[0].degenerate);
    }

    #[test]
    fn standardize_degenerate_groups() {
        let rows = vec![
            row("d", 0, 1.0, "ap", MetricKind::Ap, 0.3),
            row("d", 1, 1.0, "rr", MetricKind::Ap, 0.3),
            row("d", 0, 2.0, "rr", MetricKind::Ap, 0.9),
        ];
        for s in standardize(&rows) {
            assert_eq!(s.z_value, 0.0);
            assert!(s.degenerate);
        }
    }

    #[test]
    fn standardize_groups_by_dataset_nsr_metric() {
        let rows = vec![
            row("d", 0, 1.0, "ap", MetricKind::Ap, 0.1),
            row("d", 0, 1.0, "rr", MetricKind::Ap, 0.2),
            row("d", 0, 1.0, "ap", MetricKind::Rr, 5.0),
            row("d", 0, 1.0, "rr", MetricKind::Rr, 7.0),
            row("e", 0, 1.0, "ap", MetricKind::Ap, 100.0),
            row("e", 0, 1.0, "rr", MetricKind::Ap, 0.0),
        ];
        let z = standardize(&rows);
        for (s, want) in z.iter().zip([-1.0, 1.0, -1.0, 1.0, 1.0, -1.0]) {
            assert!((s.z_value - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn standardized_groups_are_unit(values in prop::collection::vec(-10.0f64..10.0, 2..20)) {
            prop_assume!(values.iter().any(|v| *v != values[0]));
            let rows: Vec<_> = values
                .iter()
                .enumerate()
                .map(|(i, v)| row("d", i as u32, 1.0, "ap", MetricKind::Ndcg, *v))
                .collect();
            let z: Vec<f64> = standardize(&rows).iter().map(|s| s.z_value).collect();
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((sd - 1.0).abs() < 1e-9);

            let again_rows: Vec<_> = rows.iter().zip(&z).map(|(r, z)| GridResultRow { value: *z, ..r.clone() }).collect();
            for (a, b) in standardize(&again_rows).iter().zip(&z) {
                prop_assert!((a.z_value - b).abs() < 1e-9);
            }
        }

        #[test]
        fn frequency_ignores_affine_transforms(
            values in prop::collection::vec(0.0f64..1.0, 27),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let base = full_grid(|s, n, l| {
                let li = ["rr", "ap", "ndcg"].iter().position(|x| *x == l).unwrap();
                let ni = PROTOCOL_NSRS.iter().position(|x| *x == n).unwrap();
                values[(s as usize * 3 + ni) * 3 + li]
            });
            let moved: Vec<_> = base.iter().map(|r| GridResultRow { value: r.value * scale + shift, ..r.clone() }).collect();
            prop_assert_eq!(best_loss_frequency(&base).unwrap(), best_loss_frequency(&moved).unwrap());
        }
    }

    #[test]
    fn frequency_single_winner() {
        let rows = full_grid(|_, _, l| if l == "ap" { 0.9 } else { 0.1 });
        let freq = best_loss_frequency(&rows).unwrap();
        let count = |l: &str| freq.iter().find(|f| f.loss == l).unwrap().count;
        assert_eq!((count("ap"), count("rr"), count("ndcg")), (9, 0, 0));
        assert!(frequency_row_sums(&freq).values().all(|s| *s == 9));
    }

    #[test]
    fn frequency_credits_ties() {
        let rows = full_grid(|s, n, l| match l {
            "ap" => 0.9,
            "rr" if s == 0 && n == 1.0 => 0.9,
            _ => 0.1,
        });
        let freq = best_loss_frequency(&rows).unwrap();
        assert_eq!(
            frequency_row_sums(&freq)
                .values()
                .copied()
                .collect::<Vec<_>>(),
            vec![10]
        );
    }

    #[test]
    fn frequency_rejects_incomplete_grid() {
        let mut rows = full_grid(|_, _, _| 0.5);
        rows.remove(4);
        let Err(Error::Grid(msg)) = best_loss_frequency(&rows) else {
            panic!("expected a grid error");
        };
        assert!(msg.contains("missing 1 rows"), "{msg}");
    }

    #[test]
    fn per_user_diff_identity() {
        let set = generate_synthetic(&SyntheticConfig {
            n_users: 8,
            n_items: 60,
            latent_dim: 3,
            positives_per_user: 25,
            seed: 1,
        })
        .unwrap();
        let split = prepare_split(&set, 0, 1.0, 1, 0.8).unwrap();
        let m = init_model(8, 60, 4, 3, 0.1).unwrap();
        let diffs = per_user_diff(&m, &m, &split, MetricKind::Ap).unwrap();
        assert_eq!(diffs.len(), 8);
        assert!(diffs
            .iter()
            .all(|d| d.diff == 0.0 && d.train_positives == 20));
        assert_eq!(diff_size_correlation(&diffs), None);

        let other = init_model(7, 60, 4, 3, 0.1).unwrap();
        assert!(matches!(
            per_user_diff(&m, &other, &split, MetricKind::Ap),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pearson_known_values() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    fn zrow(loss: &str, z: f64) -> StandardizedRow {
        StandardizedRow {
            dataset: "d".into(),
            split: 0,
            nsr: 1.0,
            paradigm: Paradigm::Listwise,
            loss: loss.into(),
            eval_metric: MetricKind::Ap,
            value: 0.0,
            z_value: z,
            degenerate: false,
        }
    }

    #[test]
    fn summary_single_row_collapses() {
        let s = summarize(&[zrow("ap", 0.7)], &BootstrapConfig::default()).unwrap();
        assert_eq!(
            (s[0].mean_z, s[0].bootstrap_lower, s[0].bootstrap_upper),
            (0.7, 0.7, 0.7)
        );
    }

    #[test]
    fn summary_mean_and_determinism() {
        let rows = vec![
            zrow("ap", -1.0),
            zrow("ap", 1.0),
            zrow("rr", 0.5),
            zrow("rr", 2.0),
            zrow("rr", -0.3),
        ];
        let cfg = BootstrapConfig {
            seed: 9,
            ..Default::default()
        };
        let a = summarize(&rows, &cfg).unwrap();
        assert_eq!(a, summarize(&rows, &cfg).unwrap());
        assert_eq!(a[0].loss, "ap");
        assert_eq!(a[0].mean_z, 0.0);
        assert!(a[0].bootstrap_lower <= 0.0 && a[0].bootstrap_upper >= 0.0);
        assert!(a[1].bootstrap_lower < a[1].bootstrap_upper);
        let spread: Vec<_> = (0..12)
            .map(|i| zrow("ndcg", (i * i) as f64 / 10.0))
            .collect();
        let x = summarize(&spread, &cfg).unwrap();
        let y = summarize(&spread, &BootstrapConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(x[0].bootstrap_lower, y[0].bootstrap_lower);
    }
}
