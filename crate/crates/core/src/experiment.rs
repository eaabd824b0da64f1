//! Experiment configuration, runs, the (A, B) sweep and checkpoints.
//!
//! Configs are TOML with `[dataset]`, `[train]` and `[eval]` sections, or the
//! equivalent JSON object. Every field has a default, so an empty file is a
//! valid config describing the synthetic benchmark.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_csv_dataset, longtail_counts, split_labeled_unlabeled, synth_gaussian_mixture, write_labeled_csv,
    write_unlabeled_csv, Dataset, DatasetManifest, MixtureSpec,
};
use crate::error::{Result, TrasError};
use crate::metrics::{ClassGrouping, MetricsReport, DEFAULT_GM_FLOOR};
use crate::model::ModelParams;
use crate::optim::AdamState;
use crate::trainer::{evaluate_head, train, Head, TrainConfig, TrainLog, TrainOutcome};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "TRAS_OUTPUT_ROOT";

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    #[serde(alias = "L")]
    pub num_classes: usize,
    /// Size of the largest class, labeled plus unlabeled.
    pub n1: usize,
    pub gamma: f64,
    pub beta: f64,
    pub feature_dim: usize,
    /// Standard deviation of the random class means.
    pub mean_spread: f64,
    /// Within-class standard deviation.
    pub std_dev: f64,
    /// Balanced test set size per class.
    pub test_per_class: usize,
    pub seed: u64,
    pub labeled_path: Option<PathBuf>,
    pub unlabeled_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            num_classes: 10,
            n1: 1000,
            gamma: 50.0,
            beta: 0.2,
            feature_dim: 4,
            mean_spread: 1.0,
            std_dev: 0.5,
            test_per_class: 100,
            seed: 0,
            labeled_path: None,
            unlabeled_path: None,
            test_path: None,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(TrasError::config(format!("dataset.{k}"), m));
        match self.source {
            DataSource::Synthetic => {
                if self.num_classes < 2 {
                    return err("num_classes", format!("need at least 2 classes, got {}", self.num_classes));
                }
                if !(self.gamma >= 1.0) {
                    return err("gamma", format!("gamma must be >= 1, got {}", self.gamma));
                }
                if !(self.beta > 0.0 && self.beta < 1.0) {
                    return err("beta", format!("beta must lie in (0,1), got {}", self.beta));
                }
                if self.n1 < self.num_classes {
                    return err("n1", format!("n1 must be >= num_classes, got {}", self.n1));
                }
                if self.feature_dim == 0 {
                    return err("feature_dim", "feature_dim must be >= 1".into());
                }
                if !(self.std_dev >= 0.0) || !(self.mean_spread > 0.0) {
                    return err("std_dev", "std_dev must be >= 0 and mean_spread > 0".into());
                }
            }
            DataSource::Csv => {
                for (key, path) in [
                    ("labeled_path", &self.labeled_path),
                    ("unlabeled_path", &self.unlabeled_path),
                ] {
                    match path {
                        None => return err(key, "required when source = \"csv\"".into()),
                        Some(p) if !p.exists() => return err(key, format!("{} does not exist", p.display())),
                        _ => {}
                    }
                }
                if let Some(p) = &self.test_path {
                    if !p.exists() {
                        return err("test_path", format!("{} does not exist", p.display()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Builds (or loads) the dataset this section describes.
    pub fn build(&self) -> Result<Dataset> {
        match self.source {
            DataSource::Synthetic => {
                let totals = longtail_counts(self.n1, self.gamma, self.num_classes)?;
                let (labeled, unlabeled) = split_labeled_unlabeled(&totals, self.beta)?;
                let spec = MixtureSpec::random_means(
                    self.num_classes,
                    self.feature_dim,
                    self.mean_spread,
                    self.std_dev,
                    self.seed,
                )?;
                let test = vec![self.test_per_class; self.num_classes];
                synth_gaussian_mixture(&spec, &labeled, &unlabeled, &test)
            }
            DataSource::Csv => load_csv_dataset(
                self.labeled_path.as_deref().expect("validated"),
                self.unlabeled_path.as_deref().expect("validated"),
                self.test_path.as_deref(),
                Some(self.num_classes),
            ),
        }
    }

    pub fn manifest(&self, dataset: &Dataset) -> DatasetManifest {
        match self.source {
            DataSource::Synthetic => {
                let mut m = DatasetManifest::describe(dataset, Some(self.gamma), Some(self.beta), Some(self.seed));
                m.entries.insert("source".into(), "synthetic".into());
                m.entries.insert("n1".into(), self.n1.to_string());
                m.entries.insert("std_dev".into(), self.std_dev.to_string());
                m.entries.insert("mean_spread".into(), self.mean_spread.to_string());
                m
            }
            DataSource::Csv => {
                let mut m = DatasetManifest::describe(dataset, None, None, None);
                m.entries.insert("source".into(), "csv".into());
                m
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Explicit groups; all three or none. Defaults follow the 30/40/30 split.
    pub head: Option<Vec<usize>>,
    pub torso: Option<Vec<usize>>,
    pub tail: Option<Vec<usize>>,
    /// Defaults to the tail half of the classes.
    pub minority: Option<Vec<usize>>,
    pub gm_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            head: None,
            torso: None,
            tail: None,
            minority: None,
            gm_floor: DEFAULT_GM_FLOOR,
        }
    }
}

impl EvalConfig {
    pub fn grouping(&self, num_classes: usize) -> Result<ClassGrouping> {
        let mut g = ClassGrouping::for_sorted_classes(num_classes);
        match (&self.head, &self.torso, &self.tail) {
            (Some(h), Some(m), Some(t)) => {
                g.head = h.clone();
                g.torso = m.clone();
                g.tail = t.clone();
            }
            (None, None, None) => {}
            _ => {
                return Err(TrasError::config(
                    "eval.head",
                    "head, torso and tail must be given together",
                ))
            }
        }
        if let Some(m) = &self.minority {
            g.minority = m.clone();
        }
        g.validate(num_classes)?;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Defaults to `$TRAS_OUTPUT_ROOT`, else `runs`.
    pub output_dir: Option<PathBuf>,
}

/// Command-line style overrides: `section.key = value` pairs applied on top
/// of the file before deserialization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub pairs: Vec<(String, String)>,
}

impl Overrides {
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) -> &mut Self {
        self.pairs.push((key.into(), value.into()));
        self
    }

    /// Parses `key=value`.
    pub fn push_assignment(&mut self, text: &str) -> Result<()> {
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| TrasError::config(text, "override must look like section.key=value"))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }
}

fn parse_scalar(text: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {text}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(text.to_owned()),
    }
}

fn apply_override(root: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for s in sections {
        let entry = table
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| TrasError::config(key, format!("`{s}` is not a section")))?;
    }
    table.insert(last.to_string(), parse_scalar(value));
    Ok(())
}

fn config_error(source: &str, err: impl std::fmt::Display) -> TrasError {
    let msg = err.to_string();
    let key = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("unknown field") || msg.contains("invalid type"))
        .unwrap_or(source)
        .to_owned();
    TrasError::config(key, msg.trim().replace('\n', " "))
}

/// Reads a config file (TOML, or JSON when the extension is `.json`), applies
/// overrides, fills defaults and validates.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut root = match path {
        None => toml::Table::new(),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let is_json = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
            if is_json {
                let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| config_error("config", e))?;
                match toml::Value::try_from(v).map_err(|e| config_error("config", e))? {
                    toml::Value::Table(t) => t,
                    _ => return Err(TrasError::config("config", "top level must be an object")),
                }
            } else {
                toml::from_str(&text).map_err(|e| config_error("config", e))?
            }
        }
    };
    for (k, v) in &overrides.pairs {
        apply_override(&mut root, k, v)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(root)
        .try_into()
        .map_err(|e| config_error("config", e))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.eval.grouping(self.dataset.num_classes)?;
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Same config with dataset and training seeds set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.dataset.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn with_ab(&self, a: f64, b: f64) -> Self {
        let mut c = self.clone();
        c.train.a = a;
        c.train.b = b;
        c
    }
}

/// Everything a run writes to its checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub prior: Vec<f64>,
    pub params: ModelParams,
    pub ema: ModelParams,
    pub optimizer: AdamState,
    pub teacher: Option<ModelParams>,
}

impl Checkpoint {
    pub const FORMAT: &'static str = "tras-checkpoint";
    pub const VERSION: u32 = 1;

    pub fn from_outcome(config: &ExperimentConfig, outcome: &TrainOutcome) -> Self {
        Self {
            format: Self::FORMAT.into(),
            version: Self::VERSION,
            config: config.clone(),
            prior: outcome.prior.probs().to_vec(),
            params: outcome.params.clone(),
            ema: outcome.ema.clone(),
            optimizer: outcome.optimizer.clone(),
            teacher: outcome.teacher.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format != Self::FORMAT || ck.version != Self::VERSION {
            return Err(TrasError::InvalidArgument(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Weights used for inference.
    pub fn eval_params(&self) -> &ModelParams {
        match self.config.train.decay_target {
            crate::trainer::DecayTarget::Ema => &self.ema,
            crate::trainer::DecayTarget::LearningRate => &self.params,
        }
    }

    /// Model whose teacher head is reported as the teacher.
    pub fn teacher_params(&self) -> &ModelParams {
        self.teacher.as_ref().unwrap_or_else(|| self.eval_params())
    }
}

/// Final evaluation of one run. Inference uses the student head; the teacher
/// head is reported alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub mode: String,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub student: MetricsReport,
    pub teacher: MetricsReport,
    pub balancedness_raw: Option<f64>,
}

/// Evaluates a checkpoint's student and teacher on the dataset's test split
/// (the labeled split when there is none).
pub fn evaluate_checkpoint(ck: &Checkpoint, dataset: &Dataset) -> Result<RunMetrics> {
    let grouping = ck.config.eval.grouping(dataset.num_classes)?;
    let examples = if dataset.test.is_empty() {
        &dataset.labeled
    } else {
        &dataset.test
    };
    let floor = ck.config.eval.gm_floor;
    let l = dataset.num_classes;
    Ok(RunMetrics {
        seed: ck.config.train.seed,
        mode: ck.config.train.mode.to_string(),
        a: ck.config.train.a,
        b: ck.config.train.b,
        student: evaluate_head(ck.eval_params(), examples, l, Head::Student, &grouping, floor)?,
        teacher: evaluate_head(ck.teacher_params(), examples, l, Head::Teacher, &grouping, floor)?,
        balancedness_raw: None,
    })
}

/// Result of one seed of an experiment.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub metrics: RunMetrics,
    pub log: TrainLog,
}

/// Trains and evaluates once, writing the manifest, training log, metrics,
/// confusion matrix and checkpoint into `dir`.
pub fn run_single(config: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    config.validate()?;
    std::fs::create_dir_all(dir)?;
    let dataset = config.dataset.build()?;
    config.dataset.manifest(&dataset).write(&dir.join(MANIFEST_FILE))?;
    let outcome = train(&dataset, &config.train)?;
    std::fs::write(dir.join(LOG_FILE), outcome.log.to_jsonl()?)?;
    let ck = Checkpoint::from_outcome(config, &outcome);
    let mut metrics = evaluate_checkpoint(&ck, &dataset)?;
    if let Some(last) = outcome.log.last() {
        metrics.student.group_quality = last.pseudo_label_quality;
        metrics.student.balancedness = last.balancedness_transformed;
        metrics.balancedness_raw = last.balancedness_raw;
    }
    std::fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)? + "\n")?;
    metrics.student.confusion.write_csv(&dir.join(CONFUSION_FILE))?;
    ck.save(&dir.join(CHECKPOINT_FILE))?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        metrics,
        log: outcome.log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Sample mean and (n−1) standard deviation; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub overall_accuracy: MeanStd,
    pub minority_accuracy: MeanStd,
    pub gm: MeanStd,
    pub teacher_overall_accuracy: MeanStd,
    pub teacher_minority_accuracy: MeanStd,
    pub teacher_gm: MeanStd,
}

impl Aggregate {
    pub fn from_runs(runs: &[RunMetrics]) -> Self {
        let col = |f: fn(&RunMetrics) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            seeds: runs.iter().map(|r| r.seed).collect(),
            overall_accuracy: col(|r| r.student.overall_accuracy),
            minority_accuracy: col(|r| r.student.minority_accuracy),
            gm: col(|r| r.student.gm),
            teacher_overall_accuracy: col(|r| r.teacher.overall_accuracy),
            teacher_minority_accuracy: col(|r| r.teacher.minority_accuracy),
            teacher_gm: col(|r| r.teacher.gm),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub runs: Vec<RunOutput>,
    pub aggregate: Option<Aggregate>,
}

/// Runs the experiment once per seed. A single seed writes directly into the
/// output directory; several seeds write `seed-<n>/` subdirectories and an
/// aggregate file with per-metric mean and standard deviation.
pub fn run_experiment(config: &ExperimentConfig, seeds: &[u64]) -> Result<ExperimentSummary> {
    config.validate()?;
    let out = config.output_dir();
    let seeds: Vec<u64> = if seeds.is_empty() {
        vec![config.train.seed]
    } else {
        seeds.to_vec()
    };
    if seeds.len() == 1 {
        let cfg = config.with_seed(seeds[0]);
        let run = run_single(&cfg, &out)?;
        return Ok(ExperimentSummary {
            runs: vec![run],
            aggregate: None,
        });
    }
    let runs = seeds
        .par_iter()
        .map(|&s| run_single(&config.with_seed(s), &out.join(format!("seed-{s}"))))
        .collect::<Result<Vec<_>>>()?;
    let agg = Aggregate::from_runs(&runs.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>());
    std::fs::write(out.join(AGGREGATE_FILE), serde_json::to_string_pretty(&agg)? + "\n")?;
    Ok(ExperimentSummary {
        runs,
        aggregate: Some(agg),
    })
}

/// One cell of the (A, B) sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub overall_accuracy: f64,
    pub minority_accuracy: f64,
    pub gm: f64,
    pub head_precision: f64,
    pub head_recall: f64,
    pub torso_precision: f64,
    pub torso_recall: f64,
    pub tail_precision: f64,
    pub tail_recall: f64,
    pub balancedness: f64,
}

impl SweepRow {
    fn from_metrics(m: &RunMetrics) -> Self {
        let q = m.student.group_quality.unwrap_or_default();
        Self {
            a: m.a,
            b: m.b,
            overall_accuracy: m.student.overall_accuracy,
            minority_accuracy: m.student.minority_accuracy,
            gm: m.student.gm,
            head_precision: q.head.precision,
            head_recall: q.head.recall,
            torso_precision: q.torso.precision,
            torso_recall: q.torso.recall,
            tail_precision: q.tail.precision,
            tail_recall: q.tail.recall,
            balancedness: m.student.balancedness.unwrap_or(f64::NAN),
        }
    }

    fn mean(a: f64, b: f64, rows: &[SweepRow]) -> Self {
        let n = rows.len() as f64;
        let avg = |f: fn(&SweepRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            a,
            b,
            overall_accuracy: avg(|r| r.overall_accuracy),
            minority_accuracy: avg(|r| r.minority_accuracy),
            gm: avg(|r| r.gm),
            head_precision: avg(|r| r.head_precision),
            head_recall: avg(|r| r.head_recall),
            torso_precision: avg(|r| r.torso_precision),
            torso_recall: avg(|r| r.torso_recall),
            tail_precision: avg(|r| r.tail_precision),
            tail_recall: avg(|r| r.tail_recall),
            balancedness: avg(|r| r.balancedness),
        }
    }
}

/// Writes sweep rows as CSV with a header.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One full training run per (A, B) cell (per seed when several are given,
/// averaged into one row). Cells write into `A<a>_B<b>/` subdirectories.
pub fn run_sweep(config: &ExperimentConfig, a_values: &[f64], b_values: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if a_values.is_empty() || b_values.is_empty() {
        return Err(TrasError::InvalidArgument("sweep grids must be nonempty".into()));
    }
    config.validate()?;
    let out = config.output_dir();
    let cells: Vec<(f64, f64)> = a_values
        .iter()
        .flat_map(|&a| b_values.iter().map(move |&b| (a, b)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(a, b)| {
            let mut cell = config.with_ab(a, b);
            cell.output_dir = Some(out.join(format!("A{a}_B{b}")));
            let summary = run_experiment(&cell, seeds)?;
            let rows: Vec<SweepRow> = summary.runs.iter().map(|r| SweepRow::from_metrics(&r.metrics)).collect();
            Ok(if rows.len() == 1 {
                rows.into_iter().next().unwrap()
            } else {
                SweepRow::mean(a, b, &rows)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&out)?;
    write_sweep_csv(&out.join(SWEEP_FILE), &rows)?;
    Ok(rows)
}

/// Writes the dataset as CSV files plus its manifest.
pub fn generate_dataset(config: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    config.dataset.validate()?;
    std::fs::create_dir_all(dir)?;
    let dataset = config.dataset.build()?;
    write_labeled_csv(&dir.join("labeled.csv"), &dataset.labeled)?;
    write_unlabeled_csv(&dir.join("unlabeled.csv"), &dataset.unlabeled)?;
    write_labeled_csv(&dir.join("test.csv"), &dataset.test)?;
    config.dataset.manifest(&dataset).write(&dir.join(MANIFEST_FILE))?;
    Ok(dataset)
}
