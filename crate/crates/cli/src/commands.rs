use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use metricopt::dataio::{
    binarize_and_filter, generate_synthetic, load_interactions, write_unary, SyntheticConfig,
};
use metricopt::experiment::{
    best_loss_frequency, diff_size_correlation, load_grid_spec, per_user_diff, prepare_split,
    read_csv_rows, run_grid, standardize, summarize, write_csv_rows, BootstrapConfig,
    GridResultRow, StandardizedRow,
};
use metricopt::trainer::{lr_search, select_over_runs, train as train_run, LrRun, LrSearch};
use metricopt::{FactorModel, InteractionSet, MetricKind, Objective, SplitAssignment, TrainConfig};
use serde::Serialize;

use crate::{AnalyzeCommand, DataArgs, GridArgs, PrepareArgs, SynthArgs, TrainArgs};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load(data: &DataArgs) -> Result<InteractionSet> {
    let raw = load_interactions(&data.dataset, data.format)
        .with_context(|| format!("reading {}", data.dataset.display()))?;
    Ok(binarize_and_filter(
        &raw,
        data.threshold,
        data.min_positives,
    )?)
}

fn split_file_name(split: u32, nsr: f64) -> String {
    format!("split{split}_nsr{nsr}.tsv")
}

/// Metric names as file-name fragments: `rbp@0.8` becomes `rbp_p0.8`.
fn metric_file_tag(kind: MetricKind) -> String {
    kind.to_string().replace('@', "_p")
}

#[derive(Serialize)]
struct DatasetSummary {
    users: usize,
    items: usize,
    ratings: usize,
    positives: usize,
    density: f64,
    splits: Vec<SplitSummary>,
}

#[derive(Serialize)]
struct SplitSummary {
    split: u32,
    nsr: f64,
    file: String,
    short_pool_users: usize,
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    let set = load(&a.data)?;
    fs::create_dir_all(&a.out_dir)?;
    set.write_index_maps(
        create(&a.out_dir.join("users.tsv"))?,
        create(&a.out_dir.join("items.tsv"))?,
    )?;
    let mut splits = Vec::new();
    for split in 0..a.splits {
        for &nsr in &a.nsr {
            let s = prepare_split(&set, split, nsr, a.data.seed, a.data.train_fraction)?;
            let file = split_file_name(split, nsr);
            s.write_tsv(create(&a.out_dir.join(&file))?)?;
            splits.push(SplitSummary {
                split,
                nsr,
                file,
                short_pool_users: s.short_pool_users.len(),
            });
        }
    }
    let summary = DatasetSummary {
        users: set.n_users(),
        items: set.n_items(),
        ratings: set.n_ratings(),
        positives: (0..set.n_users()).map(|u| set.n_positives(u)).sum(),
        density: set.density(),
        splits,
    };
    write_json(&a.out_dir.join("summary.json"), &summary)?;
    println!(
        "{} users, {} items, {} ratings, density {:.4}%",
        summary.users,
        summary.items,
        summary.ratings,
        summary.density * 100.0
    );
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let set = generate_synthetic(&SyntheticConfig {
        n_users: a.users,
        n_items: a.items,
        latent_dim: a.latent_dim,
        positives_per_user: a.positives,
        seed: a.seed,
    })?;
    let mut w = create(&a.out)?;
    write_unary(&set, &mut w)?;
    w.flush()?;
    println!(
        "{} users, {} items, {} positives",
        set.n_users(),
        set.n_items(),
        set.n_ratings()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainManifest<'a> {
    dataset: &'a Path,
    format: metricopt::RatingFormat,
    positive_threshold: u8,
    min_positives: usize,
    train_fraction: f64,
    data_seed: u64,
    split: u32,
    nsr: f64,
    learning_rates: &'a [f64],
    selected: TrainConfig,
    target_metric: MetricKind,
    diverged: Option<&'a metricopt::trainer::Divergence>,
    best_epochs: Vec<BestEpoch>,
}

#[derive(Serialize)]
struct BestEpoch {
    metric: MetricKind,
    epoch: usize,
    value: f64,
}

#[derive(Serialize)]
struct LrRow {
    learning_rate: f64,
    diverged: bool,
    best_epoch: Option<usize>,
    best_value: Option<f64>,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let objective = Objective::parse(a.paradigm, &a.loss, a.p)?;
    let set = load(&a.data)?;
    let split = prepare_split(&set, a.split, a.nsr, a.data.seed, a.data.train_fraction)?;
    let base = TrainConfig {
        epochs: a.epochs,
        eval_every: a.eval_every,
        dim: a.dim,
        l2: a.l2,
        init_std: a.init_std,
        ..TrainConfig::new(
            objective,
            a.lr[0],
            metricopt::experiment::model_seed(a.data.seed, a.split),
        )
    };
    let target = objective.target_metrics()[0];
    let search = if a.lr.len() == 1 {
        LrSearch {
            best: 0,
            runs: vec![LrRun {
                learning_rate: a.lr[0],
                history: train_run(&base, &split, &set)?,
            }],
        }
    } else {
        lr_search(&base, &split, &set, &a.lr, target)?
    };

    let out = &a.out_dir;
    fs::create_dir_all(out.join("checkpoints"))?;
    let run = search.best_run();
    let h = &run.history;
    h.trace.write_csv(create(&out.join("history.csv"))?)?;
    h.write_log_csv(create(&out.join("training_log.csv"))?)?;
    split.write_tsv(create(&out.join("split.tsv"))?)?;
    h.final_model
        .write_checkpoint(create(&out.join("checkpoints/final.ckpt"))?)?;
    let mut best_epochs = Vec::new();
    for (metric, best) in &h.best_models {
        best.model.write_checkpoint(create(&out.join(format!(
            "checkpoints/best_{}.ckpt",
            metric_file_tag(*metric)
        )))?)?;
        best_epochs.push(BestEpoch {
            metric: *metric,
            epoch: best.epoch,
            value: best.value,
        });
    }
    if search.runs.len() > 1 {
        let rows: Vec<LrRow> = search
            .runs
            .iter()
            .map(|r| {
                let best = select_over_runs(std::slice::from_ref(r), target)
                    .ok()
                    .flatten();
                LrRow {
                    learning_rate: r.learning_rate,
                    diverged: r.history.diverged(),
                    best_epoch: best.map(|b| b.1),
                    best_value: best.map(|b| b.2),
                }
            })
            .collect();
        write_csv_rows(create(&out.join("lr_search.csv"))?, &rows)?;
    }
    write_json(
        &out.join("manifest.json"),
        &TrainManifest {
            dataset: &a.data.dataset,
            format: a.data.format,
            positive_threshold: a.data.threshold,
            min_positives: a.data.min_positives,
            train_fraction: a.data.train_fraction,
            data_seed: a.data.seed,
            split: a.split,
            nsr: a.nsr,
            learning_rates: &a.lr,
            selected: h.config,
            target_metric: target,
            diverged: h.divergence.as_ref(),
            best_epochs,
        },
    )?;
    if let Some(d) = &h.divergence {
        eprintln!("warning: run diverged at epoch {}: {}", d.epoch, d.reason);
    }
    let (epoch, value) = h.select_best(target)?;
    println!(
        "{objective} lr {}: best {target} {value:.6} at epoch {epoch}",
        run.learning_rate
    );
    Ok(())
}

pub fn grid(a: GridArgs) -> Result<()> {
    let (mut spec, base) = load_grid_spec(&a.config)
        .with_context(|| format!("reading grid spec {}", a.config.display()))?;
    if let Some(w) = a.workers {
        spec.workers = w;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(s) = a.splits {
        spec.splits = s;
    }
    if let Some(e) = a.epochs {
        spec.epochs = e;
    }
    if let Some(e) = a.eval_every {
        spec.eval_every = e;
    }
    let outcome = run_grid(&spec, &base, &a.out_dir, a.resume)?;
    let standardized = standardize(&outcome.rows);
    write_csv_rows(create(&a.out_dir.join("standardized.csv"))?, &standardized)?;
    match best_loss_frequency(&outcome.rows) {
        Ok(freq) => write_csv_rows(create(&a.out_dir.join("frequency.csv"))?, &freq)?,
        Err(e) => eprintln!("warning: no frequency table: {e}"),
    }
    println!(
        "{} rows, {} failed cells ({} computed, {} reused)",
        outcome.rows.len(),
        outcome.failures.len(),
        outcome.computed,
        outcome.reused
    );
    Ok(())
}

pub fn analyze(cmd: AnalyzeCommand) -> Result<()> {
    match cmd {
        AnalyzeCommand::Standardize { input, out } => {
            let rows: Vec<GridResultRow> = read_csv_rows(File::open(&input)?)?;
            write_csv_rows(create(&out)?, &standardize(&rows))?;
        }
        AnalyzeCommand::Frequency { input, out } => {
            let rows: Vec<GridResultRow> = read_csv_rows(File::open(&input)?)?;
            write_csv_rows(create(&out)?, &best_loss_frequency(&rows)?)?;
        }
        AnalyzeCommand::Summarize {
            input,
            out,
            resamples,
            confidence,
            seed,
        } => {
            let rows: Vec<StandardizedRow> = read_csv_rows(File::open(&input)?)?;
            let cfg = BootstrapConfig {
                resamples,
                confidence,
                seed,
            };
            write_csv_rows(create(&out)?, &summarize(&rows, &cfg)?)?;
        }
        AnalyzeCommand::PerUserDiff {
            model_a,
            model_b,
            split,
            metric,
            out,
        } => {
            let read = |p: &Path| -> Result<FactorModel> {
                let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
                Ok(FactorModel::read_checkpoint(std::io::BufReader::new(f))?)
            };
            let a = read(&model_a)?;
            let b = read(&model_b)?;
            if a.n_users() != b.n_users() {
                bail!(
                    "checkpoints disagree on user count ({} vs {})",
                    a.n_users(),
                    b.n_users()
                );
            }
            let s = SplitAssignment::read_tsv(File::open(&split)?, a.n_users(), 0.0)?;
            let diffs = per_user_diff(&a, &b, &s, metric)?;
            write_csv_rows(create(&out)?, &diffs)?;
            match diff_size_correlation(&diffs) {
                Some(r) => println!(
                    "{} users, correlation with training positives {r:.6}",
                    diffs.len()
                ),
                None => println!("{} users, correlation undefined (no variance)", diffs.len()),
            }
        }
    }
    Ok(())
}
