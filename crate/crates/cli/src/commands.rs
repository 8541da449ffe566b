use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use breg_core::data::{load_predictions, write_predictions, Dataset, Predictions, Split, Targets, Task};
use breg_core::gradcheck::gradcheck_suite;
use breg_core::metrics::{categorical_report, dimensional_report, MetricReport, MetricValue};
use breg_core::model::{clamp_prediction, load_checkpoint, save_checkpoint, Head, Network};
use breg_core::training::{argmax_rows, predict_dataset, train as run_training};
use log::{info, warn};
use serde::Serialize;

use crate::config::{DataConfig, DataSource, RunConfig};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRACE_FILE: &str = "trace.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// `report.json` → `report.config.toml`, next to the report.
fn echo_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    report.with_file_name(format!("{stem}.config.toml"))
}

pub fn gradcheck(seed: u64, tolerance: f64) -> Result<(), CliError> {
    let rows = gradcheck_suite(seed)?;
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    println!("{:width$}  {:>14}  status", "check", "max_rel_error");
    let mut failed = Vec::new();
    for row in &rows {
        let ok = row.max_rel_error < tolerance;
        println!(
            "{:width$}  {:>14.3e}  {}",
            row.name,
            row.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(row.name.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient check above tolerance {tolerance:e}: {}",
            failed.join(", ")
        )))
    }
}

pub fn train(config_path: &Path, data: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(p) = data {
        if cfg.data.source == DataSource::Synthetic {
            return Err(CliError::Usage("--data cannot be combined with synthetic data".into()));
        }
        cfg.data.path = Some(p.to_path_buf());
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_file(&out.join(RESOLVED_CONFIG_FILE), &cfg.to_toml())?;

    let mut net = Network::build(&cfg.network)?;
    let mut splits = cfg.data.load(net.head())?;
    let train_set = splits
        .take(Split::Train)
        .ok_or_else(|| CliError::Usage("the data has no training split".into()))?;
    let val_set = splits.take(Split::Val);
    info!(
        "training a {}-layer network ({} parameters) on {} samples",
        net.depth(),
        net.count_parameters(),
        train_set.len()
    );
    let report = run_training(&mut net, &train_set, val_set.as_ref(), &cfg.training)?;
    report
        .write_trace_csv(&out.join(TRACE_FILE))
        .map_err(|e| io_err(&out.join(TRACE_FILE), e))?;
    save_checkpoint(&net, &out.join(CHECKPOINT_FILE))?;
    if let Some(last) = report.trace.last() {
        println!(
            "epoch {}: train loss {:.6}, train metric {:.4}{}",
            last.epoch,
            last.train_loss,
            last.train_metric,
            match (last.val_loss, last.val_metric) {
                (Some(l), Some(m)) => format!(", val loss {l:.6}, val metric {m:.4}"),
                _ => String::new(),
            }
        );
    }
    Ok(())
}

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub report: PathBuf,
    pub split: Split,
    pub skew_trials: usize,
    pub seed: u64,
    pub predictions: Option<PathBuf>,
    pub standardize: bool,
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    command: &'static str,
    ckpt: &'a Path,
    data: &'a Path,
    split: Split,
    skew_trials: usize,
    seed: u64,
    standardize: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    predictions: Option<&'a Path>,
}

/// Reads the data description behind `--data`: a run configuration, a
/// FER2013 CSV or a manifest CSV (told apart by the header).
fn data_config(path: &Path, standardize: bool) -> Result<DataConfig, CliError> {
    if path.extension().is_some_and(|e| e == "toml") {
        let mut data = RunConfig::load(path)?.data;
        data.standardize |= standardize;
        return Ok(data);
    }
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = String::new();
    std::io::BufReader::new(file)
        .read_line(&mut header)
        .map_err(|e| io_err(path, e))?;
    let source = if header.trim() == breg_core::data::FER2013_HEADER {
        DataSource::Fer2013
    } else {
        DataSource::Manifest
    };
    Ok(DataConfig {
        source,
        path: Some(path.to_path_buf()),
        standardize,
        synthetic: None,
    })
}

/// Skew normalization needs every class in the ground truth; otherwise the
/// report carries original values only.
fn usable_trials(gt: &[usize], classes: usize, trials: usize) -> usize {
    if trials == 0 {
        return 0;
    }
    let mut seen = vec![false; classes];
    for &g in gt {
        if g < classes {
            seen[g] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        warn!("class {missing} has no samples; skipping skew normalization");
        return 0;
    }
    trials
}

fn warn_undefined(report: &MetricReport) {
    for e in &report.entries {
        for (suffix, v) in [("", Some(&e.original)), ("_norm", e.normalized.as_ref())] {
            if let Some(MetricValue::Undefined(reason)) = v {
                warn!("{}{suffix} is undefined: {reason}", e.name);
            }
        }
    }
}

fn score(predictions: &Predictions, classes: Option<usize>, trials: usize, seed: u64) -> Result<MetricReport, CliError> {
    let report = match predictions {
        Predictions::Categorical { pred, gt } => {
            let k = classes.unwrap_or_else(|| pred.iter().chain(gt).max().map_or(0, |m| m + 1));
            categorical_report(pred, gt, k, usable_trials(gt, k, trials), seed)?
        }
        Predictions::Dimensional { pred, gt } => {
            let clamped: Vec<[f64; 2]> = pred
                .iter()
                .map(|p| [clamp_prediction(p[0]), clamp_prediction(p[1])])
                .collect();
            dimensional_report(&clamped, gt)?
        }
    };
    warn_undefined(&report);
    Ok(report)
}

fn predictions_for(net: &Network, data: &Dataset) -> Result<Predictions, CliError> {
    let outputs = predict_dataset(net, data, 64)?;
    Ok(match data.targets() {
        Targets::Categorical { labels, .. } => Predictions::Categorical {
            pred: argmax_rows(&outputs),
            gt: labels.clone(),
        },
        Targets::Dimensional(gt) => Predictions::Dimensional {
            pred: outputs
                .data()
                .chunks(2)
                .map(|r| [clamp_prediction(r[0]), clamp_prediction(r[1])])
                .collect(),
            gt: gt.clone(),
        },
    })
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let net = load_checkpoint(&args.ckpt)?;
    let mut splits = data_config(&args.data, args.standardize)?.load(net.head())?;
    let data = splits
        .take(args.split)
        .ok_or_else(|| CliError::Usage(format!("the data has no {} split", args.split)))?;
    let task_matches = matches!(
        (net.head(), data.task()),
        (Head::Classification { .. }, Task::Categorical) | (Head::Regression, Task::Dimensional)
    );
    if !task_matches {
        return Err(CliError::Usage(format!(
            "checkpoint head {:?} does not match {:?} data",
            net.head(),
            data.task()
        )));
    }
    let predictions = predictions_for(&net, &data)?;
    let classes = match net.head() {
        Head::Classification { classes } => Some(classes),
        Head::Regression => None,
    };
    let report = score(&predictions, classes, args.skew_trials, args.seed)?;
    write_file(&args.report, &(report.to_json() + "\n"))?;
    if let Some(p) = &args.predictions {
        write_predictions(p, &predictions)?;
    }
    let echo = EvalEcho {
        command: "eval",
        ckpt: &args.ckpt,
        data: &args.data,
        split: args.split,
        skew_trials: args.skew_trials,
        seed: args.seed,
        standardize: args.standardize,
        predictions: args.predictions.as_deref(),
    };
    write_file(&echo_path(&args.report), &toml::to_string_pretty(&echo).expect("echo serializes"))?;
    println!("{}", report.to_json());
    Ok(())
}

#[derive(Serialize)]
struct MetricsEcho<'a> {
    command: &'static str,
    pred: &'a Path,
    task: Task,
    skew_trials: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
}

pub fn metrics(
    pred: &Path,
    task: Task,
    skew_trials: usize,
    seed: u64,
    classes: Option<usize>,
    report_path: Option<&Path>,
) -> Result<(), CliError> {
    let predictions = load_predictions(pred, task)?;
    let report = score(&predictions, classes, skew_trials, seed)?;
    let json = report.to_json();
    match report_path {
        Some(path) => {
            write_file(path, &(json + "\n"))?;
            let echo = MetricsEcho {
                command: "metrics",
                pred,
                task,
                skew_trials,
                seed,
                classes,
            };
            write_file(&echo_path(path), &toml::to_string_pretty(&echo).expect("echo serializes"))?;
        }
        None => println!("{json}"),
    }
    Ok(())
}
