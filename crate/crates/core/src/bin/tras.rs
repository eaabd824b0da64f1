//! Command-line front end. Each subcommand prints one JSON summary line on
//! success. Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tras::experiment::{self, Checkpoint, Overrides};
use tras::model::{export_features, write_features_csv};
use tras::{Result, TrasError};

#[derive(Parser)]
#[command(name = "tras", version, about = "Long-tailed semi-supervised learning with teacher-student transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML or JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets both the dataset and training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `section.key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Comma-separated seed list; writes one run per seed plus an aggregate.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, value_parser = ["shared", "two-stage", "tras-minus"])]
    mode: Option<String>,
    #[arg(long = "A")]
    a: Option<f64>,
    #[arg(long = "B")]
    b: Option<f64>,
    /// Use the untransformed teacher distribution as the KL target.
    #[arg(long)]
    no_teacher_transform: bool,
    /// Plain cross-entropy instead of the prior-adjusted loss on labeled data.
    #[arg(long)]
    plain_ce: bool,
    /// Apply the KL term to every unlabeled example.
    #[arg(long)]
    no_mask: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Labeled,
    Unlabeled,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic long-tailed dataset as CSV files.
    GenData(ConfigArgs),
    /// Train and evaluate.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its config's dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid sweep over the adjustment schedule parameters.
    SweepAb {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long = "A-values", value_delimiter = ',', required = true)]
        a_values: Vec<f64>,
        #[arg(long = "B-values", value_delimiter = ',', required = true)]
        b_values: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Write penultimate-layer features of a checkpoint's inference model.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset split rebuilt from the checkpoint's config.
        #[arg(long, value_enum, default_value = "test", conflicts_with = "input")]
        split: Split,
        /// Headerless CSV of inputs; the first input_dim columns are used.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "features.csv")]
        out: PathBuf,
    },
}

fn overrides(common: &ConfigArgs) -> Result<Overrides> {
    let mut o = Overrides::default();
    for s in &common.set {
        o.push_assignment(s)?;
    }
    if let Some(seed) = common.seed {
        o.set("dataset.seed", seed.to_string());
        o.set("train.seed", seed.to_string());
    }
    if let Some(out) = &common.out {
        o.set("output_dir", toml_string(out));
    }
    Ok(o)
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn train_overrides(args: &TrainArgs) -> Result<Overrides> {
    let mut o = overrides(&args.common)?;
    if let Some(m) = &args.mode {
        o.set("train.mode", format!("\"{m}\""));
    }
    if let Some(a) = args.a {
        o.set("train.A", format!("{a:?}"));
    }
    if let Some(b) = args.b {
        o.set("train.B", format!("{b:?}"));
    }
    if args.no_teacher_transform {
        o.set("train.disable_teacher_transform", "true");
    }
    if args.plain_ce {
        o.set("train.use_plain_ce_labeled", "true");
    }
    if args.no_mask {
        o.set("train.disable_student_mask", "true");
    }
    Ok(o)
}

fn read_inputs(path: &Path, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse_err = |message: String| TrasError::Parse {
            path: path.to_path_buf(),
            row: i + 1,
            message,
        };
        if rec.len() < dim {
            return Err(parse_err(format!("expected at least {dim} columns, got {}", rec.len())));
        }
        let x = rec
            .iter()
            .take(dim)
            .map(|c| c.trim().parse::<f64>().map_err(|e| parse_err(format!("{c:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(x);
    }
    Ok(rows)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = experiment::parse_config(common.config.as_deref(), &overrides(&common)?)?;
            let dir = cfg.output_dir();
            let ds = experiment::generate_dataset(&cfg, &dir)?;
            Ok(json!({
                "command": "gen-data",
                "dir": dir,
                "labeled": ds.labeled.len(),
                "unlabeled": ds.unlabeled.len(),
                "test": ds.test.len(),
            }))
        }
        Command::Train(args) => {
            let cfg = experiment::parse_config(args.common.config.as_deref(), &train_overrides(&args)?)?;
            let summary = experiment::run_experiment(&cfg, &args.seeds)?;
            let runs: Vec<_> = summary
                .runs
                .iter()
                .map(|r| {
                    json!({
                        "seed": r.metrics.seed,
                        "dir": r.dir,
                        "overall_accuracy": r.metrics.student.overall_accuracy,
                        "minority_accuracy": r.metrics.student.minority_accuracy,
                        "gm": r.metrics.student.gm,
                    })
                })
                .collect();
            Ok(json!({"command": "train", "mode": cfg.train.mode.to_string(), "runs": runs, "aggregate": summary.aggregate}))
        }
        Command::Eval { checkpoint, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let dataset = ck.config.dataset.build()?;
            let metrics = experiment::evaluate_checkpoint(&ck, &dataset)?;
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join(experiment::METRICS_FILE), serde_json::to_string_pretty(&metrics)? + "\n")?;
                metrics.student.confusion.write_csv(&dir.join(experiment::CONFUSION_FILE))?;
            }
            Ok(json!({
                "command": "eval",
                "overall_accuracy": metrics.student.overall_accuracy,
                "minority_accuracy": metrics.student.minority_accuracy,
                "gm": metrics.student.gm,
                "teacher_overall_accuracy": metrics.teacher.overall_accuracy,
            }))
        }
        Command::SweepAb {
            common,
            a_values,
            b_values,
            seeds,
        } => {
            let cfg = experiment::parse_config(common.config.as_deref(), &overrides(&common)?)?;
            let rows = experiment::run_sweep(&cfg, &a_values, &b_values, &seeds)?;
            Ok(json!({
                "command": "sweep-ab",
                "csv": cfg.output_dir().join(experiment::SWEEP_FILE),
                "cells": rows.len(),
            }))
        }
        Command::ExportFeatures {
            checkpoint,
            split,
            input,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let params = ck.eval_params();
            let inputs = match input {
                Some(p) => read_inputs(&p, params.input_dim())?,
                None => {
                    let ds = ck.config.dataset.build()?;
                    match split {
                        Split::Labeled => ds.labeled.into_iter().map(|e| e.x).collect(),
                        Split::Unlabeled => ds.unlabeled.into_iter().map(|e| e.x).collect(),
                        Split::Test => ds.test.into_iter().map(|e| e.x).collect(),
                    }
                }
            };
            let feats = export_features(params, &inputs)?;
            write_features_csv(&out, params.feature_dim(), &feats)?;
            Ok(json!({"command": "export-features", "out": out, "rows": feats.len(), "dim": params.feature_dim()}))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
