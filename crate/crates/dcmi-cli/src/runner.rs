//! Experiment orchestration: data preparation, variant x seed matrices,
//! lambda sweeps, and artifact emission. Artifacts are staged to a
//! temporary name and renamed on completion so aborts leave no partial
//! files behind.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use dcmi_core::data::{downsample, generate_synthetic, load_jsonl, split, tokenize_dataset, Dataset};
use dcmi_core::derive_seed;
use dcmi_core::train::{
    aggregate_run_reports, train, AggregateReport, RunReport, TrainConfig, TrainOutcome, Variant,
};

use crate::config::{DataSource, ExperimentConfig, Preset, SweepSection};

#[derive(Debug, Error)]
pub enum RunnerError {
    /// Exit code 2: the config was rejected before any work started.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// Exit code 1: a run aborted at runtime.
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl RunnerError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::InvalidConfig(_) => 2,
            RunnerError::Aborted(_) | RunnerError::Io(_) => 1,
        }
    }
}

fn validated(config: &ExperimentConfig) -> Result<(), RunnerError> {
    let diags = config.diagnostics();
    if diags.is_empty() {
        Ok(())
    } else {
        Err(RunnerError::InvalidConfig(diags.join("; ")))
    }
}

/// Write atomically: stage to `<name>.tmp`, then rename into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunnerError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load or generate the dataset, split it, and down-sample train/val.
pub fn prepare_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset), RunnerError> {
    let dataset = match config.data.source {
        DataSource::Synthetic => {
            let section = config
                .data
                .synthetic
                .as_ref()
                .expect("validated: synthetic section present");
            generate_synthetic(&section.to_spec(config.base_seed))
                .map_err(|e| RunnerError::Aborted(e.to_string()))?
        }
        DataSource::Jsonl => {
            let path = config
                .data
                .jsonl_path
                .as_ref()
                .expect("validated: jsonl path present");
            load_jsonl(path).map_err(|e| RunnerError::Aborted(e.to_string()))?
        }
    };
    let f = config.split.fractions;
    let (train_split, val_split, test_split) = split(&dataset, (f[0], f[1], f[2]), config.split_seed())
        .map_err(|e| RunnerError::Aborted(e.to_string()))?;
    let factor = config.split.downsample_factor;
    let train_split = downsample(&train_split, factor, derive_seed(config.base_seed, "downsample/train"))
        .map_err(|e| RunnerError::Aborted(e.to_string()))?;
    let val_split = downsample(&val_split, factor, derive_seed(config.base_seed, "downsample/val"))
        .map_err(|e| RunnerError::Aborted(e.to_string()))?;
    Ok((train_split, val_split, test_split))
}

fn train_config_for(config: &ExperimentConfig, variant: Variant, seed_index: usize) -> TrainConfig {
    TrainConfig {
        variant,
        seed: derive_seed(config.base_seed, &format!("seed/{seed_index}")),
        ..config.train.base.clone()
    }
}

fn losses_csv(report: &RunReport) -> String {
    let mut out = String::from("epoch,supervised,domain,contrastive,val_macro_auc\n");
    for (epoch, losses) in report.epoch_losses.iter().enumerate() {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.9e}"));
        let _ = writeln!(
            out,
            "{},{:.9e},{},{},{}",
            epoch,
            losses.supervised,
            fmt(losses.domain),
            fmt(losses.contrastive),
            fmt(report.validation_macro_auc[epoch]),
        );
    }
    out
}

fn emit_run_artifacts(
    config: &ExperimentConfig,
    out_dir: &Path,
    outcome: &TrainOutcome,
    test_split: &Dataset,
) -> Result<(), RunnerError> {
    let report = &outcome.report;
    let tag = format!("{}_{}", report.variant, report.seed);
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    write_atomic(&out_dir.join(format!("report_{tag}.json")), json.as_bytes())?;
    write_atomic(
        &out_dir.join(format!("losses_{tag}.csv")),
        losses_csv(report).as_bytes(),
    )?;
    if config.export_representations {
        let tokens = tokenize_dataset(test_split, &outcome.vocab, config.train.base.max_tokens);
        let path = out_dir.join(format!("repr_{tag}.csv"));
        let staged = path.with_extension("tmp");
        outcome
            .model
            .export_representations(&tokens, &staged)
            .map_err(|e| RunnerError::Aborted(e.to_string()))?;
        std::fs::rename(&staged, &path)?;
    }
    Ok(())
}

fn fmt_metric(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.3} +/- {s:.3}"),
        (Some(m), None) => format!("{m:.3}"),
        _ => "undefined".into(),
    }
}

/// Markdown table in the layout style of a models-by-metrics comparison,
/// plus a per-domain breakdown.
fn render_aggregate(aggregates: &[AggregateReport], domain_names: &[String]) -> String {
    let mut out = String::from("# Aggregate report\n\n");
    out.push_str("## Macro / micro AUC (mean +/- std over seeds)\n\n");
    out.push_str("| Model | Macro | Micro |\n|---|---|---|\n");
    for agg in aggregates {
        let partial = if agg.partial { " (partial)" } else { "" };
        let _ = writeln!(
            out,
            "| {}{} | {} | {} |",
            agg.variant,
            partial,
            fmt_metric(agg.macro_mean, agg.macro_std),
            fmt_metric(agg.micro_mean, agg.micro_std),
        );
    }
    out.push_str("\n## Per-domain AUC (mean over seeds)\n\n");
    out.push_str("| Domain |");
    for agg in aggregates {
        let _ = write!(out, " {} |", agg.variant);
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(aggregates.len()));
    out.push('\n');
    for (d, name) in domain_names.iter().enumerate() {
        let _ = write!(out, "| {name} |");
        for agg in aggregates {
            match agg.per_domain_mean.get(d).copied().flatten() {
                Some(v) => {
                    let _ = write!(out, " {v:.3} |");
                }
                None => {
                    let _ = write!(out, " skipped |");
                }
            }
        }
        out.push('\n');
    }
    out
}

fn run_matrix(
    config: &ExperimentConfig,
    variants: &[Variant],
    splits: &(Dataset, Dataset, Dataset),
    seeds: usize,
) -> Result<Vec<(Variant, Vec<TrainOutcome>)>, RunnerError> {
    let (train_split, val_split, test_split) = splits;
    let jobs: Vec<(Variant, usize)> = variants
        .iter()
        .flat_map(|&v| (0..seeds).map(move |i| (v, i)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| RunnerError::Aborted(e.to_string()))?;
    let results: Vec<((Variant, usize), Result<TrainOutcome, String>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(variant, seed_index)| {
                let cfg = train_config_for(config, variant, seed_index);
                let outcome =
                    train(&cfg, train_split, val_split, test_split).map_err(|e| e.to_string());
                ((variant, seed_index), outcome)
            })
            .collect()
    });

    let mut slots: std::collections::HashMap<(Variant, usize), TrainOutcome> =
        std::collections::HashMap::new();
    for ((variant, seed_index), result) in results {
        match result {
            Ok(outcome) => {
                slots.insert((variant, seed_index), outcome);
            }
            Err(msg) => {
                return Err(RunnerError::Aborted(format!(
                    "{} seed {}: {}",
                    variant.name(),
                    seed_index,
                    msg
                )))
            }
        }
    }
    let mut by_variant = Vec::new();
    for &variant in variants {
        let outcomes = (0..seeds)
            .map(|i| slots.remove(&(variant, i)).expect("every job completed"))
            .collect();
        by_variant.push((variant, outcomes));
    }
    Ok(by_variant)
}

/// `run <config>`: execute the variant x seed matrix and write per-run
/// reports, loss traces, optional representation exports, and the
/// aggregate table.
pub fn run(config: &ExperimentConfig) -> Result<PathBuf, RunnerError> {
    validated(config)?;
    let variants = config.variants().map_err(RunnerError::InvalidConfig)?;
    std::fs::create_dir_all(&config.out_dir)?;
    let splits = prepare_data(config)?;

    let matrix = run_matrix(config, &variants, &splits, config.seeds)?;
    let mut aggregates = Vec::new();
    for (variant, outcomes) in &matrix {
        for outcome in outcomes {
            emit_run_artifacts(config, &config.out_dir, outcome, &splits.2)?;
        }
        let reports: Vec<&RunReport> = outcomes.iter().map(|o| &o.report).collect();
        aggregates.push(aggregate_run_reports(variant.name(), &reports, false));
    }
    let table = render_aggregate(&aggregates, &splits.0.domain_names);
    let path = config.out_dir.join("aggregate.md");
    write_atomic(&path, table.as_bytes())?;
    Ok(path)
}

/// Best-validation-epoch macro AUC of one run, the sweep's selection
/// metric.
fn validation_score(report: &RunReport) -> f64 {
    report
        .validation_macro_auc
        .get(report.best_epoch)
        .copied()
        .flatten()
        .unwrap_or(f64::NEG_INFINITY)
}

/// `sweep <config>`: Cartesian lambda1 x lambda2 grid over the dcmi
/// variant at the sweep's (reduced) seed count; the best cell by
/// validation macro AUC is highlighted in the summary.
pub fn sweep(config: &ExperimentConfig) -> Result<PathBuf, RunnerError> {
    validated(config)?;
    let sweep: &SweepSection = config
        .sweep
        .as_ref()
        .ok_or_else(|| RunnerError::InvalidConfig("sweep: section required for the sweep command".into()))?;
    let l1 = sweep.lambda1.values();
    let l2 = sweep.lambda2.values();
    let cells = l1.len() * l2.len();
    if cells > sweep.max_cells {
        return Err(RunnerError::InvalidConfig(format!(
            "sweep: grid of {} x {} = {cells} cells exceeds sweep.max_cells = {} \
             (estimated {} training runs); raise the budget or shrink the grid",
            l1.len(),
            l2.len(),
            sweep.max_cells,
            cells * sweep.seeds,
        )));
    }
    std::fs::create_dir_all(&config.out_dir)?;
    let splits = prepare_data(config)?;

    let mut results: Vec<(f64, f64, f64, AggregateReport)> = Vec::new();
    for &a in &l1 {
        for &b in &l2 {
            let cell_dir = config.out_dir.join(format!("sweep_l1_{a}_l2_{b}"));
            std::fs::create_dir_all(&cell_dir)?;
            let mut cell_config = config.clone();
            cell_config.train.base.lambda1 = a;
            cell_config.train.base.lambda2 = b;
            let matrix = run_matrix(&cell_config, &[Variant::Dcmi], &splits, sweep.seeds)?;
            let (_, outcomes) = &matrix[0];
            let mut val_scores = Vec::new();
            for outcome in outcomes {
                emit_run_artifacts(&cell_config, &cell_dir, outcome, &splits.2)?;
                val_scores.push(validation_score(&outcome.report));
            }
            let reports: Vec<&RunReport> = outcomes.iter().map(|o| &o.report).collect();
            let agg = aggregate_run_reports(Variant::Dcmi.name(), &reports, false);
            let mean_val = val_scores.iter().sum::<f64>() / val_scores.len() as f64;
            results.push((a, b, mean_val, agg));
        }
    }

    let best = results
        .iter()
        .enumerate()
        .max_by(|(_, x), (_, y)| x.2.partial_cmp(&y.2).expect("finite scores"))
        .map(|(i, _)| i)
        .expect("at least one cell");

    let mut out = String::from("# Lambda sweep\n\n");
    out.push_str("| lambda1 | lambda2 | val macro AUC | test macro | test micro |\n");
    out.push_str("|---|---|---|---|---|\n");
    for (i, (a, b, val, agg)) in results.iter().enumerate() {
        let marker = if i == best { " **(best)**" } else { "" };
        let _ = writeln!(
            out,
            "| {a} | {b} | {val:.3}{marker} | {} | {} |",
            fmt_metric(agg.macro_mean, agg.macro_std),
            fmt_metric(agg.micro_mean, agg.micro_std),
        );
    }
    let (a, b, val, _) = &results[best];
    let _ = writeln!(out, "\nBest cell: lambda1 = {a}, lambda2 = {b} (validation macro AUC {val:.3}).");
    let path = config.out_dir.join("aggregate.md");
    write_atomic(&path, out.as_bytes())?;
    Ok(path)
}

/// `validate <config>`: diagnostics only, no side effects.
pub fn validate(config: &ExperimentConfig) -> Vec<String> {
    config.diagnostics()
}

/// Apply command-line overrides onto a parsed config.
pub fn apply_overrides(
    config: &mut ExperimentConfig,
    out: Option<PathBuf>,
    workers: Option<usize>,
    preset: Option<Preset>,
) {
    if let Some(dir) = out {
        config.out_dir = dir;
    }
    if let Some(n) = workers {
        config.workers = n;
    }
    if let Some(p) = preset {
        let (l1, l2) = p.lambdas();
        config.train.base.lambda1 = l1;
        config.train.base.lambda2 = l2;
    }
}
