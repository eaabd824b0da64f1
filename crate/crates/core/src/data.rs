//! Long-tailed datasets: class-count profiles, labeled/unlabeled splits, a
//! seeded Gaussian-mixture generator, weak/strong augmentation and CSV I/O.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrasError};

/// A labeled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

/// An unlabeled example. `hidden_y` is kept only for pseudo-label diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledExample {
    pub x: Vec<f64>,
    pub hidden_y: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub num_classes: usize,
    pub labeled: Vec<Example>,
    pub unlabeled: Vec<UnlabeledExample>,
    /// Held-out evaluation examples; empty when none were provided.
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn feature_dim(&self) -> usize {
        self.labeled
            .first()
            .map(|e| e.x.len())
            .or_else(|| self.unlabeled.first().map(|e| e.x.len()))
            .or_else(|| self.test.first().map(|e| e.x.len()))
            .unwrap_or(0)
    }

    /// `N_l`.
    pub fn labeled_counts(&self) -> Vec<u64> {
        class_counts(self.labeled.iter().map(|e| e.y), self.num_classes)
    }

    /// `M_l`, over unlabeled examples that carry a hidden label.
    pub fn unlabeled_counts(&self) -> Vec<u64> {
        class_counts(self.unlabeled.iter().filter_map(|e| e.hidden_y), self.num_classes)
    }

    pub fn test_counts(&self) -> Vec<u64> {
        class_counts(self.test.iter().map(|e| e.y), self.num_classes)
    }

    pub fn labeled_labels(&self) -> Vec<usize> {
        self.labeled.iter().map(|e| e.y).collect()
    }
}

fn class_counts(labels: impl Iterator<Item = usize>, num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for y in labels {
        counts[y] += 1;
    }
    counts
}

/// Per-class totals `round(n1 · γ^{-(l-1)/(L-1)})`, floored at 1, head first.
pub fn longtail_counts(n1: usize, gamma: f64, num_classes: usize) -> Result<Vec<usize>> {
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(TrasError::InvalidArgument(format!("gamma must be >= 1, got {gamma}")));
    }
    if num_classes < 2 {
        return Err(TrasError::InvalidArgument(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    if n1 < num_classes {
        return Err(TrasError::InvalidArgument(format!(
            "n1 ({n1}) must be >= num_classes ({num_classes})"
        )));
    }
    let denom = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|l| {
            let c = n1 as f64 * gamma.powf(-(l as f64) / denom);
            (c.round() as usize).max(1)
        })
        .collect())
}

/// Splits each class total into `round(β·total)` labeled (clamped to
/// `[1, total-1]`) and the remainder unlabeled.
pub fn split_labeled_unlabeled(totals: &[usize], beta: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(TrasError::InvalidArgument(format!("beta must lie in (0,1), got {beta}")));
    }
    let mut labeled = Vec::with_capacity(totals.len());
    let mut unlabeled = Vec::with_capacity(totals.len());
    for (class, &total) in totals.iter().enumerate() {
        if total < 2 {
            return Err(TrasError::InvalidArgument(format!(
                "class {class} has {total} examples; at least 2 are needed to split"
            )));
        }
        let n = ((beta * total as f64).round() as usize).clamp(1, total - 1);
        labeled.push(n);
        unlabeled.push(total - n);
    }
    Ok((labeled, unlabeled))
}

/// Isotropic Gaussian mixture with one component per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub means: Vec<Vec<f64>>,
    pub std_dev: f64,
    pub seed: u64,
}

impl MixtureSpec {
    /// Class means drawn from `N(0, spread²)` per coordinate, seeded by `seed`.
    pub fn random_means(num_classes: usize, feature_dim: usize, spread: f64, std_dev: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65_616e_7321);
        let means = (0..num_classes)
            .map(|_| {
                (0..feature_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        spread * z
                    })
                    .collect()
            })
            .collect();
        let spec = Self {
            num_classes,
            feature_dim,
            means,
            std_dev,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.feature_dim == 0 {
            return Err(TrasError::InvalidArgument(
                "a mixture needs >= 2 classes and >= 1 feature".into(),
            ));
        }
        if self.means.len() != self.num_classes {
            return Err(TrasError::ShapeMismatch {
                expected: self.num_classes,
                actual: self.means.len(),
            });
        }
        if let Some(m) = self.means.iter().find(|m| m.len() != self.feature_dim) {
            return Err(TrasError::ShapeMismatch {
                expected: self.feature_dim,
                actual: m.len(),
            });
        }
        if !(self.std_dev >= 0.0) {
            return Err(TrasError::InvalidArgument(format!(
                "std_dev must be >= 0, got {}",
                self.std_dev
            )));
        }
        for i in 0..self.num_classes {
            for j in i + 1..self.num_classes {
                if self.means[i] == self.means[j] {
                    return Err(TrasError::InvalidArgument(format!("means of classes {i} and {j} coincide")));
                }
            }
        }
        Ok(())
    }

    fn draw(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.means[class]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.std_dev * z
            })
            .collect()
    }
}

/// Samples `mean_y + σ·ε` per class for the three splits. Each split uses its
/// own stream, so changing one split's counts leaves the others untouched.
pub fn synth_gaussian_mixture(
    spec: &MixtureSpec,
    labeled_counts: &[usize],
    unlabeled_counts: &[usize],
    test_counts: &[usize],
) -> Result<Dataset> {
    spec.validate()?;
    for counts in [labeled_counts, unlabeled_counts] {
        if counts.len() != spec.num_classes {
            return Err(TrasError::ShapeMismatch {
                expected: spec.num_classes,
                actual: counts.len(),
            });
        }
    }
    if !test_counts.is_empty() && test_counts.len() != spec.num_classes {
        return Err(TrasError::ShapeMismatch {
            expected: spec.num_classes,
            actual: test_counts.len(),
        });
    }
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut test = Vec::new();
    for class in 0..spec.num_classes {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 1, class as u64));
        labeled.extend((0..labeled_counts[class]).map(|_| Example {
            x: spec.draw(class, &mut rng),
            y: class,
        }));
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 2, class as u64));
        unlabeled.extend((0..unlabeled_counts[class]).map(|_| UnlabeledExample {
            x: spec.draw(class, &mut rng),
            hidden_y: Some(class),
        }));
        if let Some(&n) = test_counts.get(class) {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 3, class as u64));
            test.extend((0..n).map(|_| Example {
                x: spec.draw(class, &mut rng),
                y: class,
            }));
        }
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        labeled,
        unlabeled,
        test,
    })
}

/// Combines seed material into one 64-bit seed (splitmix64 finalizer).
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Weak,
    Strong,
}

/// Numeric stand-in for image augmentation: dataset-relative Gaussian jitter,
/// plus coordinate masking for the strong view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmenter {
    /// Per-dimension data scale.
    pub scale: Vec<f64>,
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub mask_rate: f64,
}

impl Augmenter {
    pub const WEAK_SIGMA: f64 = 0.05;
    pub const STRONG_SIGMA: f64 = 0.2;
    pub const MASK_RATE: f64 = 0.2;

    /// Scale = per-dimension standard deviation of the labeled examples.
    pub fn from_labeled(labeled: &[Example]) -> Self {
        let dim = labeled.first().map_or(0, |e| e.x.len());
        let n = labeled.len().max(1) as f64;
        let scale = (0..dim)
            .map(|d| {
                let mean = labeled.iter().map(|e| e.x[d]).sum::<f64>() / n;
                let var = labeled.iter().map(|e| (e.x[d] - mean).powi(2)).sum::<f64>() / n;
                var.sqrt()
            })
            .collect();
        Self {
            scale,
            weak_sigma: Self::WEAK_SIGMA,
            strong_sigma: Self::STRONG_SIGMA,
            mask_rate: Self::MASK_RATE,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            scale: vec![0.0; dim],
            weak_sigma: 0.0,
            strong_sigma: 0.0,
            mask_rate: 0.0,
        }
    }

    /// Number of coordinates the strong view zeroes: `floor(mask_rate · dim)`.
    pub fn masked_coordinates(&self, dim: usize) -> usize {
        ((self.mask_rate * dim as f64) + 1e-9).floor() as usize
    }

    pub fn augment(&self, x: &[f64], mode: AugmentMode, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = match mode {
            AugmentMode::Weak => self.weak_sigma,
            AugmentMode::Strong => self.strong_sigma,
        };
        let mut out: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(d, &v)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + sigma * self.scale.get(d).copied().unwrap_or(0.0) * z
            })
            .collect();
        if mode == AugmentMode::Strong {
            let k = self.masked_coordinates(x.len()).min(x.len());
            for i in sample(&mut rng, x.len(), k) {
                out[i] = 0.0;
            }
        }
        out
    }
}

/// Paired weak/strong views of a batch of unlabeled examples. Only inputs are
/// carried; hidden labels never enter a batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnlabeledBatch {
    pub weak_views: Vec<Vec<f64>>,
    pub strong_views: Vec<Vec<f64>>,
    pub source_indices: Vec<usize>,
}

impl UnlabeledBatch {
    pub fn len(&self) -> usize {
        self.weak_views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weak_views.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledBatch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        rows.push(rec.iter().map(str::to_owned).collect());
    }
    Ok(rows)
}

fn parse_err(path: &Path, row: usize, message: impl Into<String>) -> TrasError {
    TrasError::Parse {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

fn parse_features(path: &Path, row: usize, cells: &[String]) -> Result<Vec<f64>> {
    cells
        .iter()
        .enumerate()
        .map(|(col, c)| {
            c.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, row, format!("column {}: `{c}` is not a finite number", col + 1)))
        })
        .collect()
}

fn parse_label(path: &Path, row: usize, cell: &str, num_classes: Option<usize>) -> Result<usize> {
    let y: usize = cell
        .parse()
        .map_err(|_| parse_err(path, row, format!("label `{cell}` is not a nonnegative integer")))?;
    if let Some(l) = num_classes {
        if y >= l {
            return Err(parse_err(path, row, format!("label {y} out of range for {l} classes")));
        }
    }
    Ok(y)
}

fn load_labeled(path: &Path, num_classes: Option<usize>, dim: Option<usize>) -> Result<Vec<Example>> {
    let rows = read_rows(path)?;
    let width = dim.map(|d| d + 1).or_else(|| rows.first().map(Vec::len));
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let row_no = i + 1;
        let width = width.unwrap();
        if row.len() != width || width < 2 {
            return Err(parse_err(
                path,
                row_no,
                format!("expected {width} columns (features then label), found {}", row.len()),
            ));
        }
        let x = parse_features(path, row_no, &row[..width - 1])?;
        let y = parse_label(path, row_no, &row[width - 1], num_classes)?;
        out.push(Example { x, y });
    }
    Ok(out)
}

/// Reads labeled (`features..., label`) and unlabeled (`features...[, hidden label]`)
/// CSV files. `num_classes` defaults to one past the largest labeled class.
pub fn load_csv_dataset(
    labeled_path: &Path,
    unlabeled_path: &Path,
    test_path: Option<&Path>,
    num_classes: Option<usize>,
) -> Result<Dataset> {
    let labeled = load_labeled(labeled_path, num_classes, None)?;
    if labeled.is_empty() {
        return Err(parse_err(labeled_path, 0, "labeled file has no rows"));
    }
    let dim = labeled[0].x.len();
    let num_classes = num_classes.unwrap_or_else(|| labeled.iter().map(|e| e.y).max().unwrap_or(0) + 1);

    let mut unlabeled = Vec::new();
    for (i, row) in read_rows(unlabeled_path)?.iter().enumerate() {
        let row_no = i + 1;
        let hidden_y = if row.len() == dim {
            None
        } else if row.len() == dim + 1 {
            Some(parse_label(unlabeled_path, row_no, &row[dim], Some(num_classes))?)
        } else {
            return Err(parse_err(
                unlabeled_path,
                row_no,
                format!("expected {dim} or {} columns, found {}", dim + 1, row.len()),
            ));
        };
        let x = parse_features(unlabeled_path, row_no, &row[..dim])?;
        unlabeled.push(UnlabeledExample { x, hidden_y });
    }
    let test = match test_path {
        Some(p) => load_labeled(p, Some(num_classes), Some(dim))?,
        None => Vec::new(),
    };
    Ok(Dataset {
        num_classes,
        labeled,
        unlabeled,
        test,
    })
}

fn fmt_row(x: &[f64], label: Option<usize>) -> String {
    let mut s = String::new();
    for (i, v) in x.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").unwrap();
    }
    if let Some(y) = label {
        write!(s, ",{y}").unwrap();
    }
    s.push('\n');
    s
}

pub fn write_labeled_csv(path: &Path, examples: &[Example]) -> Result<()> {
    let body: String = examples.iter().map(|e| fmt_row(&e.x, Some(e.y))).collect();
    std::fs::write(path, body)?;
    Ok(())
}

pub fn write_unlabeled_csv(path: &Path, examples: &[UnlabeledExample]) -> Result<()> {
    let body: String = examples.iter().map(|e| fmt_row(&e.x, e.hidden_y)).collect();
    std::fs::write(path, body)?;
    Ok(())
}

/// Key-value record of how a dataset was produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn describe(dataset: &Dataset, gamma: Option<f64>, beta: Option<f64>, seed: Option<u64>) -> Self {
        let join = |c: Vec<u64>| c.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let mut entries = BTreeMap::new();
        entries.insert("num_classes".into(), dataset.num_classes.to_string());
        entries.insert("feature_dim".into(), dataset.feature_dim().to_string());
        if let Some(g) = gamma {
            entries.insert("gamma".into(), g.to_string());
        }
        if let Some(b) = beta {
            entries.insert("beta".into(), b.to_string());
        }
        if let Some(s) = seed {
            entries.insert("seed".into(), s.to_string());
        }
        entries.insert("labeled_counts".into(), join(dataset.labeled_counts()));
        entries.insert("unlabeled_counts".into(), join(dataset.unlabeled_counts()));
        entries.insert("test_counts".into(), join(dataset.test_counts()));
        Self { entries }
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TrasError::Parse {
                path: "manifest".into(),
                row: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            entries.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}
