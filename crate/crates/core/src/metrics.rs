//! Evaluation: confusion matrices, overall / minority accuracy, geometric mean
//! of recalls, per-group pseudo-label quality and pseudo-label balancedness.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrasError};
use crate::losses::kl_div;

pub const DEFAULT_GM_FLOOR: f64 = 1e-3;

/// Head / torso / tail partition plus the minority set used for minority accuracy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassGrouping {
    pub head: Vec<usize>,
    pub torso: Vec<usize>,
    pub tail: Vec<usize>,
    pub minority: Vec<usize>,
}

impl ClassGrouping {
    /// Classes are assumed sorted head first. Head is the top 30%, tail the
    /// bottom 30% (for 10 classes: {0,1,2}, {3..6}, {7,8,9}); minority is
    /// `{⌈L/2⌉, …, L−1}`.
    pub fn for_sorted_classes(num_classes: usize) -> Self {
        let k = ((0.3 * num_classes as f64).round() as usize).max(1).min(num_classes / 2);
        let head = (0..k).collect();
        let torso = (k..num_classes - k).collect();
        let tail = (num_classes - k..num_classes).collect();
        let minority = (num_classes.div_ceil(2)..num_classes).collect();
        Self {
            head,
            torso,
            tail,
            minority,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut seen = vec![false; num_classes];
        for &c in self.head.iter().chain(&self.torso).chain(&self.tail) {
            if c >= num_classes || seen[c] {
                return Err(TrasError::config(
                    "eval.grouping",
                    format!("class {c} is out of range or assigned to two groups"),
                ));
            }
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(TrasError::config("eval.grouping", "groups must cover every class"));
        }
        if self.minority.is_empty() || self.minority.iter().any(|&c| c >= num_classes) {
            return Err(TrasError::config(
                "eval.minority",
                "minority set must be nonempty and in range",
            ));
        }
        Ok(())
    }

    fn groups(&self) -> [&[usize]; 3] {
        [&self.head, &self.torso, &self.tail]
    }
}

/// `counts[i][j]` = number of examples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        self.counts
            .iter()
            .map(|row| row.iter().map(u64::to_string).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub fn confusion_matrix(true_labels: &[usize], predicted: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted.len() {
        return Err(TrasError::ShapeMismatch {
            expected: true_labels.len(),
            actual: predicted.len(),
        });
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in true_labels.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(TrasError::InvalidArgument(format!(
                "label pair ({t}, {p}) out of range for {num_classes} classes"
            )));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub overall: f64,
    pub per_class_recall: Vec<f64>,
    /// Classes with no examples; their recall is reported as 0.
    pub empty_classes: Vec<usize>,
    pub minority_accuracy: f64,
}

pub fn accuracy_suite(confusion: &ConfusionMatrix, grouping: &ClassGrouping) -> AccuracySummary {
    let total = confusion.total();
    let overall = if total == 0 {
        0.0
    } else {
        confusion.trace() as f64 / total as f64
    };
    let mut empty_classes = Vec::new();
    let per_class_recall: Vec<f64> = confusion
        .counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: u64 = row.iter().sum();
            if n == 0 {
                empty_classes.push(i);
                0.0
            } else {
                row[i] as f64 / n as f64
            }
        })
        .collect();
    let minority_accuracy = if grouping.minority.is_empty() {
        0.0
    } else {
        grouping.minority.iter().map(|&c| per_class_recall[c]).sum::<f64>() / grouping.minority.len() as f64
    };
    AccuracySummary {
        overall,
        per_class_recall,
        empty_classes,
        minority_accuracy,
    }
}

/// `(Π_l max(recall_l, floor))^{1/L}`, computed in log space.
pub fn geometric_mean(per_class_recall: &[f64], floor: f64) -> f64 {
    if per_class_recall.is_empty() {
        return 0.0;
    }
    let log_sum: f64 = per_class_recall.iter().map(|&r| r.max(floor).ln()).sum();
    (log_sum / per_class_recall.len() as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// False when no mask-passing example was predicted into the group.
    pub precision_defined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupQuality {
    pub head: PrecisionRecall,
    pub torso: PrecisionRecall,
    pub tail: PrecisionRecall,
}

/// Per-group precision among mask-passing examples, and recall over all
/// examples of the group (masked-out examples count as missed).
pub fn pseudo_label_quality(
    hidden_labels: &[usize],
    pseudo_labels: &[usize],
    mask: &[bool],
    grouping: &ClassGrouping,
) -> Result<GroupQuality> {
    if hidden_labels.len() != pseudo_labels.len() || hidden_labels.len() != mask.len() {
        return Err(TrasError::ShapeMismatch {
            expected: hidden_labels.len(),
            actual: pseudo_labels.len().min(mask.len()),
        });
    }
    let score = |group: &[usize]| {
        let (mut predicted, mut correct, mut actual) = (0u64, 0u64, 0u64);
        for ((&t, &p), &m) in hidden_labels.iter().zip(pseudo_labels).zip(mask) {
            let t_in = group.contains(&t);
            actual += t_in as u64;
            if m && group.contains(&p) {
                predicted += 1;
                correct += (p == t) as u64;
            }
        }
        PrecisionRecall {
            precision: if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 },
            recall: if actual == 0 { 0.0 } else { correct as f64 / actual as f64 },
            precision_defined: predicted > 0,
        }
    };
    let [head, torso, tail] = grouping.groups().map(score);
    Ok(GroupQuality { head, torso, tail })
}

/// `KL(mean distribution ‖ uniform)`; 0 for perfectly balanced predictions.
pub fn balancedness(dists: &[Vec<f64>]) -> Result<f64> {
    let first = dists
        .first()
        .ok_or_else(|| TrasError::InvalidArgument("balancedness needs at least one distribution".into()))?;
    let l = first.len();
    let mut mean = vec![0.0; l];
    for d in dists {
        if d.len() != l {
            return Err(TrasError::ShapeMismatch {
                expected: l,
                actual: d.len(),
            });
        }
        mean.iter_mut().zip(d).for_each(|(m, v)| *m += v);
    }
    let n = dists.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(kl_div(&mean, &vec![1.0 / l as f64; l]))
}

/// Test-set evaluation of one classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub per_class_recall: Vec<f64>,
    pub minority_accuracy: f64,
    pub gm: f64,
    pub confusion: ConfusionMatrix,
    pub group_quality: Option<GroupQuality>,
    pub balancedness: Option<f64>,
}

impl MetricsReport {
    pub fn from_predictions(
        true_labels: &[usize],
        predicted: &[usize],
        num_classes: usize,
        grouping: &ClassGrouping,
        gm_floor: f64,
    ) -> Result<Self> {
        let confusion = confusion_matrix(true_labels, predicted, num_classes)?;
        let acc = accuracy_suite(&confusion, grouping);
        Ok(Self {
            overall_accuracy: acc.overall,
            gm: geometric_mean(&acc.per_class_recall, gm_floor),
            per_class_recall: acc.per_class_recall,
            minority_accuracy: acc.minority_accuracy,
            confusion,
            group_quality: None,
            balancedness: None,
        })
    }
}
