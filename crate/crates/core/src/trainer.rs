//! Loss assembly and the training loop.
//!
//! The objective has four terms:
//!
//! * teacher supervised CE on labeled data,
//! * teacher consistency CE on the strong view, gated by the teacher's
//!   confidence on the weak view (FixMatch),
//! * student distribution-aware CE on labeled data,
//! * student KL to the transformed teacher distribution, gated by the
//!   student's own confidence.
//!
//! Pseudo-labels, masks and KL targets are decided once per step and are
//! constants for differentiation. The KL term never sends gradient into the
//! teacher head, nor into the backbone through the teacher branch.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, AugmentMode, Augmenter, Dataset, LabeledBatch, UnlabeledBatch};
use crate::error::{Result, TrasError};
use crate::losses::{
    argmax, ce_grad, ce_loss, da_ce_grad, da_ce_loss, kl_grad_logits, kl_to_logits, shift_by_log_prior, softmax,
    transform_teacher_logits, AdjustmentSchedule, ClassPrior,
};
use crate::metrics::{balancedness, pseudo_label_quality, ClassGrouping, GroupQuality, MetricsReport};
use crate::model::{backward_into, forward, forward_traced, init_params, GradientSet, ModelParams};
use crate::optim::{adam_step, ema_update, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Teacher and student heads on one backbone, optimized jointly.
    #[default]
    Shared,
    /// FixMatch teacher first, then a fresh student against the frozen teacher.
    #[serde(alias = "two-stage")]
    TwoStage,
    /// Shared backbone, but student gradients stop at the student head.
    #[serde(alias = "tras-minus")]
    TrasMinus,
}

impl FromStr for TrainMode {
    type Err = TrasError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "shared" => Ok(TrainMode::Shared),
            "two_stage" => Ok(TrainMode::TwoStage),
            "tras_minus" => Ok(TrainMode::TrasMinus),
            _ => Err(TrasError::config(
                "train.mode",
                format!("unknown mode `{s}` (expected shared, two-stage or tras-minus)"),
            )),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Shared => "shared",
            TrainMode::TwoStage => "two-stage",
            TrainMode::TrasMinus => "tras-minus",
        })
    }
}

/// Which augmented view the student sees in the imitation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentView {
    Weak,
    #[default]
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Terms summed over the batch.
    #[default]
    Sum,
    /// Labeled and unlabeled sums divided by their batch sizes.
    Mean,
}

/// What the 0.999 decay rate applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayTarget {
    /// EMA of weights; evaluation uses the EMA copy.
    #[default]
    Ema,
    /// Learning rate multiplied by `decay` after every epoch; no EMA.
    LearningRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "A", alias = "a")]
    pub a: f64,
    #[serde(rename = "B", alias = "b")]
    pub b: f64,
    /// Constant scale of the labeled DA-CE term.
    pub tau_labeled: f64,
    /// Confidence threshold `t` for both masks.
    #[serde(alias = "t")]
    pub threshold: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub hidden_dims: Vec<usize>,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub decay_target: DecayTarget,
    pub mode: TrainMode,
    /// Skip the `A=0, B=1` adjustment of teacher scores used for pseudo-labeling.
    pub disable_teacher_transform: bool,
    pub use_plain_ce_labeled: bool,
    pub disable_student_mask: bool,
    pub student_view: StudentView,
    pub reduction: Reduction,
    pub prior_smoothing: f64,
    /// Known class counts overriding the labeled-data estimate of the prior.
    pub prior_counts: Option<Vec<u64>>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            a: 2.0,
            b: 2.0,
            tau_labeled: 1.0,
            threshold: 0.95,
            warmup_epochs: 2,
            epochs: 100,
            batches_per_epoch: 20,
            batch_size: 64,
            hidden_dims: vec![64, 64],
            learning_rate: 0.002,
            ema_decay: 0.999,
            decay_target: DecayTarget::Ema,
            mode: TrainMode::Shared,
            disable_teacher_transform: false,
            use_plain_ce_labeled: false,
            disable_student_mask: false,
            student_view: StudentView::Strong,
            reduction: Reduction::Sum,
            prior_smoothing: 0.0,
            prior_counts: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(TrasError::config(format!("train.{k}"), m));
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return err("t", format!("t must lie in (0,1], got {}", self.threshold));
        }
        if !(self.ema_decay >= 0.0 && self.ema_decay < 1.0) {
            return err("ema_decay", format!("ema_decay must lie in [0,1), got {}", self.ema_decay));
        }
        if self.warmup_epochs > self.epochs {
            return err(
                "warmup_epochs",
                format!("warmup_epochs ({}) exceeds epochs ({})", self.warmup_epochs, self.epochs),
            );
        }
        if !(self.a >= 0.0 && self.a.is_finite()) {
            return err("A", format!("A must be finite and >= 0, got {}", self.a));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return err("B", format!("B must be finite and >= 0, got {}", self.b));
        }
        if !(self.tau_labeled >= 0.0 && self.tau_labeled.is_finite()) {
            return err("tau_labeled", format!("tau_labeled must be >= 0, got {}", self.tau_labeled));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate", format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return err("batch_size", "batch_size must be >= 1".into());
        }
        if self.hidden_dims.contains(&0) {
            return err("hidden_dims", "hidden layer widths must be >= 1".into());
        }
        if !(self.prior_smoothing >= 0.0) {
            return err("prior_smoothing", "prior_smoothing must be >= 0".into());
        }
        Ok(())
    }

    fn teacher_scale(&self) -> f64 {
        if self.disable_teacher_transform {
            0.0
        } else {
            1.0
        }
    }
}

/// Which terms of the objective are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub ssl_labeled: bool,
    pub ssl_unlabeled: bool,
    pub tras_labeled: bool,
    pub tras_unlabeled: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        ssl_labeled: true,
        ssl_unlabeled: true,
        tras_labeled: true,
        tras_unlabeled: true,
    };
    pub const SSL: Terms = Terms {
        ssl_labeled: true,
        ssl_unlabeled: true,
        tras_labeled: false,
        tras_unlabeled: false,
    };
    pub const TRAS: Terms = Terms {
        ssl_labeled: false,
        ssl_unlabeled: false,
        tras_labeled: true,
        tras_unlabeled: true,
    };

    /// All 16 on/off combinations, in a fixed order.
    pub fn all_combinations() -> Vec<Terms> {
        (0..16u8)
            .map(|m| Terms {
                ssl_labeled: m & 1 != 0,
                ssl_unlabeled: m & 2 != 0,
                tras_labeled: m & 4 != 0,
                tras_unlabeled: m & 8 != 0,
            })
            .collect()
    }

    fn needs_unlabeled(&self) -> bool {
        self.ssl_unlabeled || self.tras_unlabeled
    }
}

/// Where teacher logits come from and how student gradients flow.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub prior: &'a ClassPrior,
    pub config: &'a TrainConfig,
    pub terms: Terms,
    /// False in tras-minus mode and during warmup.
    pub student_to_backbone: bool,
    /// Frozen teacher (two-stage). `None` uses the trained model's own teacher head.
    pub external_teacher: Option<&'a ModelParams>,
}

/// Per-term values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ssl_labeled: f64,
    pub ssl_unlabeled: f64,
    pub tras_labeled: f64,
    pub tras_unlabeled: f64,
    pub teacher_mask_passed: usize,
    pub student_mask_passed: usize,
    pub unlabeled: usize,
}

impl LossBreakdown {
    pub fn ssl(&self) -> f64 {
        self.ssl_labeled + self.ssl_unlabeled
    }

    pub fn tras(&self) -> f64 {
        self.tras_labeled + self.tras_unlabeled
    }

    pub fn total(&self) -> f64 {
        self.ssl() + self.tras()
    }
}

/// Pseudo-labeling decisions for one unlabeled example; constants for
/// differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDecision {
    /// `ŷ`: argmax of the (optionally prior-adjusted) teacher scores on the weak view.
    pub pseudo_label: usize,
    pub teacher_mask: bool,
    pub student_mask: bool,
    /// Transformed teacher distribution the student imitates.
    pub target: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub breakdown: LossBreakdown,
    pub decisions: Vec<UnlabeledDecision>,
    pub grads: Option<GradientSet>,
}

/// Teacher-side pseudo-label, confidence mask and transformed target from raw
/// weak-view teacher logits.
pub fn teacher_decision(z_t: &[f64], prior: &ClassPrior, sched: &AdjustmentSchedule, config: &TrainConfig) -> (usize, bool, Vec<f64>) {
    let adjusted = shift_by_log_prior(z_t, prior, -config.teacher_scale());
    let probs = softmax(&adjusted);
    let pseudo = argmax(&probs);
    let mask = probs[pseudo] >= config.threshold;
    let target = transform_teacher_logits(z_t, pseudo, prior, sched);
    (pseudo, mask, target)
}

fn student_confident(z_s: &[f64], config: &TrainConfig) -> bool {
    config.disable_student_mask || softmax(z_s).iter().copied().fold(0.0, f64::max) >= config.threshold
}

/// Evaluates the objective on one labeled and one unlabeled batch, with
/// gradients when `with_grads` is set.
pub fn evaluate_objective(
    params: &ModelParams,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    objective: &Objective<'_>,
    with_grads: bool,
) -> Result<Evaluation> {
    let Objective {
        prior,
        config,
        terms,
        student_to_backbone,
        external_teacher,
    } = *objective;
    if prior.num_classes() != params.num_classes() {
        return Err(TrasError::ShapeMismatch {
            expected: params.num_classes(),
            actual: prior.num_classes(),
        });
    }
    let sched = AdjustmentSchedule::new(config.a, config.b, prior)?;
    let (lab_scale, unl_scale) = match config.reduction {
        Reduction::Sum => (1.0, 1.0),
        Reduction::Mean => (
            1.0 / labeled.len().max(1) as f64,
            1.0 / unlabeled.len().max(1) as f64,
        ),
    };
    let scaled = |mut g: Vec<f64>, s: f64| {
        if s != 1.0 {
            g.iter_mut().for_each(|v| *v *= s);
        }
        g
    };
    let mut grads = with_grads.then(|| params.zeros_like());
    let mut bd = LossBreakdown {
        unlabeled: unlabeled.len(),
        ..Default::default()
    };

    if terms.ssl_labeled || terms.tras_labeled {
        for (x, &y) in labeled.inputs.iter().zip(&labeled.labels) {
            let (trace, out) = forward_traced(params, x)?;
            let mut tg = None;
            let mut sg = None;
            if terms.ssl_labeled {
                bd.ssl_labeled += lab_scale * ce_loss(y, &out.teacher_logits);
                tg = with_grads.then(|| scaled(ce_grad(y, &out.teacher_logits), lab_scale));
            }
            if terms.tras_labeled {
                let (v, g) = if config.use_plain_ce_labeled {
                    (ce_loss(y, &out.student_logits), ce_grad(y, &out.student_logits))
                } else {
                    (
                        da_ce_loss(y, &out.student_logits, prior, config.tau_labeled),
                        da_ce_grad(y, &out.student_logits, prior, config.tau_labeled),
                    )
                };
                bd.tras_labeled += lab_scale * v;
                sg = with_grads.then(|| scaled(g, lab_scale));
            }
            if let Some(grads) = grads.as_mut() {
                backward_into(params, &trace, tg.as_deref(), sg.as_deref(), student_to_backbone, grads);
            }
        }
    }

    let mut decisions = Vec::new();
    if terms.needs_unlabeled() {
        for (weak, strong) in unlabeled.weak_views.iter().zip(&unlabeled.strong_views) {
            let (weak_trace, weak_out) = forward_traced(params, weak)?;
            let (strong_trace, strong_out) = forward_traced(params, strong)?;
            let z_t = match external_teacher {
                Some(t) => forward(t, weak)?.teacher_logits,
                None => weak_out.teacher_logits.clone(),
            };
            let (pseudo, teacher_mask, target) = teacher_decision(&z_t, prior, &sched, config);
            let student_logits = match config.student_view {
                StudentView::Weak => &weak_out.student_logits,
                StudentView::Strong => &strong_out.student_logits,
            };
            let student_mask = student_confident(student_logits, config);
            bd.teacher_mask_passed += teacher_mask as usize;
            bd.student_mask_passed += student_mask as usize;

            let mut strong_tg = None;
            if terms.ssl_unlabeled && teacher_mask {
                bd.ssl_unlabeled += unl_scale * ce_loss(pseudo, &strong_out.teacher_logits);
                strong_tg = with_grads.then(|| scaled(ce_grad(pseudo, &strong_out.teacher_logits), unl_scale));
            }
            let mut sg = None;
            if terms.tras_unlabeled && student_mask {
                bd.tras_unlabeled += unl_scale * kl_to_logits(&target, student_logits);
                sg = with_grads.then(|| scaled(kl_grad_logits(&target, student_logits), unl_scale));
            }
            if let Some(grads) = grads.as_mut() {
                match config.student_view {
                    StudentView::Weak => {
                        backward_into(params, &weak_trace, None, sg.as_deref(), student_to_backbone, grads);
                        backward_into(params, &strong_trace, strong_tg.as_deref(), None, student_to_backbone, grads);
                    }
                    StudentView::Strong => backward_into(
                        params,
                        &strong_trace,
                        strong_tg.as_deref(),
                        sg.as_deref(),
                        student_to_backbone,
                        grads,
                    ),
                }
            }
            decisions.push(UnlabeledDecision {
                pseudo_label: pseudo,
                teacher_mask,
                student_mask,
                target,
            });
        }
    }

    let mut value = 0.0;
    for (on, v) in [
        (terms.ssl_labeled, bd.ssl_labeled),
        (terms.ssl_unlabeled, bd.ssl_unlabeled),
        (terms.tras_labeled, bd.tras_labeled),
        (terms.tras_unlabeled, bd.tras_unlabeled),
    ] {
        if on {
            value += v;
        }
    }
    Ok(Evaluation {
        value,
        breakdown: bd,
        decisions,
        grads,
    })
}

/// FixMatch objective of the teacher branch: labeled CE plus confidence-masked
/// CE of the strong view against the weak-view pseudo-label.
pub fn ssl_loss(
    params: &ModelParams,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    prior: &ClassPrior,
    config: &TrainConfig,
) -> Result<(f64, LossBreakdown)> {
    let obj = Objective {
        prior,
        config,
        terms: Terms::SSL,
        student_to_backbone: true,
        external_teacher: None,
    };
    let e = evaluate_objective(params, labeled, unlabeled, &obj, false)?;
    Ok((e.value, e.breakdown))
}

/// Student objective: labeled DA-CE plus student-masked KL to the transformed
/// teacher distribution.
pub fn tras_loss(
    params: &ModelParams,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    prior: &ClassPrior,
    config: &TrainConfig,
) -> Result<(f64, LossBreakdown)> {
    let obj = Objective {
        prior,
        config,
        terms: Terms::TRAS,
        student_to_backbone: config.mode != TrainMode::TrasMinus,
        external_teacher: None,
    };
    let e = evaluate_objective(params, labeled, unlabeled, &obj, false)?;
    Ok((e.value, e.breakdown))
}

/// Objective scheduled for `epoch` in the joint modes. During warmup only the
/// FixMatch terms and the labeled student term are active, and the student
/// gradient does not reach the backbone.
pub fn scheduled_objective<'a>(prior: &'a ClassPrior, config: &'a TrainConfig, epoch: usize) -> Objective<'a> {
    let warm = epoch < config.warmup_epochs;
    Objective {
        prior,
        config,
        terms: if warm {
            Terms {
                tras_unlabeled: false,
                ..Terms::ALL
            }
        } else {
            Terms::ALL
        },
        student_to_backbone: !warm && config.mode != TrainMode::TrasMinus,
        external_teacher: None,
    }
}

/// Total loss and its gradient for one step at `epoch`.
pub fn total_loss_and_grads(
    params: &ModelParams,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    prior: &ClassPrior,
    config: &TrainConfig,
    epoch: usize,
) -> Result<(f64, GradientSet, LossBreakdown)> {
    let obj = scheduled_objective(prior, config, epoch);
    let e = evaluate_objective(params, labeled, unlabeled, &obj, true)?;
    Ok((e.value, e.grads.expect("requested"), e.breakdown))
}

/// Diagnostics of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub warmup: bool,
    pub learning_rate: f64,
    /// Mean per step.
    pub loss: LossMeans,
    pub teacher_mask_rate: f64,
    pub student_mask_rate: f64,
    /// Pseudo-labels are the argmax of the transformed teacher distribution on
    /// clean unlabeled inputs; the mask is the student confidence mask.
    pub pseudo_label_quality: Option<GroupQuality>,
    pub balancedness_raw: Option<f64>,
    pub balancedness_transformed: Option<f64>,
    pub test: Option<TestSnapshot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossMeans {
    pub ssl_labeled: f64,
    pub ssl_unlabeled: f64,
    pub tras_labeled: f64,
    pub tras_unlabeled: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTriple {
    pub overall: f64,
    pub minority: f64,
    pub gm: f64,
}

/// Test accuracy of the evaluated (EMA when enabled) student and teacher, and
/// of the raw-weight student.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestSnapshot {
    pub student: AccuracyTriple,
    pub teacher: AccuracyTriple,
    pub student_raw: AccuracyTriple,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub ema: ModelParams,
    pub optimizer: AdamState,
    pub log: TrainLog,
    /// Frozen stage-one model in two-stage mode.
    pub teacher: Option<ModelParams>,
    pub prior: ClassPrior,
}

impl TrainOutcome {
    /// Weights used for inference: EMA unless EMA is disabled.
    pub fn eval_params(&self, config: &TrainConfig) -> &ModelParams {
        match config.decay_target {
            DecayTarget::Ema => &self.ema,
            DecayTarget::LearningRate => &self.params,
        }
    }
}

/// Which head to predict with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Student,
    Teacher,
}

pub fn predict(params: &ModelParams, x: &[f64], head: Head) -> Result<usize> {
    let out = forward(params, x)?;
    Ok(argmax(match head {
        Head::Student => &out.student_logits,
        Head::Teacher => &out.teacher_logits,
    }))
}

/// Metrics of one head on labeled examples.
pub fn evaluate_head(
    params: &ModelParams,
    examples: &[crate::data::Example],
    num_classes: usize,
    head: Head,
    grouping: &ClassGrouping,
    gm_floor: f64,
) -> Result<MetricsReport> {
    let truth: Vec<usize> = examples.iter().map(|e| e.y).collect();
    let pred = examples
        .iter()
        .map(|e| predict(params, &e.x, head))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_predictions(&truth, &pred, num_classes, grouping, gm_floor)
}

/// Prior used for training: explicit counts when configured, else labeled counts.
pub fn training_prior(dataset: &Dataset, config: &TrainConfig) -> Result<ClassPrior> {
    let counts = match &config.prior_counts {
        Some(c) => {
            if c.len() != dataset.num_classes {
                return Err(TrasError::config(
                    "train.prior_counts",
                    format!("expected {} counts, got {}", dataset.num_classes, c.len()),
                ));
            }
            c.clone()
        }
        None => dataset.labeled_counts(),
    };
    ClassPrior::from_counts(&counts, config.prior_smoothing)
}

struct Cycler {
    len: usize,
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
    stream: u64,
}

impl Cycler {
    fn new(len: usize, seed: u64, stream: u64) -> Self {
        Self {
            len,
            order: Vec::new(),
            pos: 0,
            pass: 0,
            seed,
            stream,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.len).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, self.stream, self.pass));
            self.order.shuffle(&mut rng);
            self.pass += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

struct BatchSource<'a> {
    dataset: &'a Dataset,
    augmenter: Augmenter,
    labeled: Cycler,
    unlabeled: Cycler,
    seed: u64,
    drawn: u64,
}

impl<'a> BatchSource<'a> {
    fn new(dataset: &'a Dataset, seed: u64) -> Self {
        Self {
            dataset,
            augmenter: Augmenter::from_labeled(&dataset.labeled),
            labeled: Cycler::new(dataset.labeled.len(), seed, 101),
            unlabeled: Cycler::new(dataset.unlabeled.len(), seed, 102),
            seed,
            drawn: 0,
        }
    }

    fn aug(&mut self, x: &[f64], mode: AugmentMode) -> Vec<f64> {
        self.drawn += 1;
        let stream = match mode {
            AugmentMode::Weak => 201,
            AugmentMode::Strong => 202,
        };
        self.augmenter.augment(x, mode, mix_seed(self.seed, stream, self.drawn))
    }

    fn next(&mut self, batch_size: usize) -> (LabeledBatch, UnlabeledBatch) {
        let mut lab = LabeledBatch::default();
        for _ in 0..batch_size {
            let i = self.labeled.next();
            let e = &self.dataset.labeled[i];
            lab.inputs.push(self.aug(&e.x, AugmentMode::Weak));
            lab.labels.push(e.y);
        }
        let mut unl = UnlabeledBatch::default();
        if !self.dataset.unlabeled.is_empty() {
            for _ in 0..batch_size {
                let i = self.unlabeled.next();
                let x = &self.dataset.unlabeled[i].x;
                unl.weak_views.push(self.aug(x, AugmentMode::Weak));
                unl.strong_views.push(self.aug(x, AugmentMode::Strong));
                unl.source_indices.push(i);
            }
        }
        (lab, unl)
    }
}

enum Stage<'a> {
    /// Joint objective scheduled by epoch.
    Joint,
    /// Student-only objective against a frozen teacher.
    Student(&'a ModelParams),
}

fn accuracy(report: &MetricsReport) -> AccuracyTriple {
    AccuracyTriple {
        overall: report.overall_accuracy,
        minority: report.minority_accuracy,
        gm: report.gm,
    }
}

struct LoopResult {
    params: ModelParams,
    ema: ModelParams,
    optimizer: AdamState,
    log: TrainLog,
}

fn run_loop(
    dataset: &Dataset,
    config: &TrainConfig,
    prior: &ClassPrior,
    stage: Stage<'_>,
    init_seed: u64,
    data_seed: u64,
) -> Result<LoopResult> {
    let grouping = ClassGrouping::for_sorted_classes(dataset.num_classes);
    let mut params = init_params(dataset.feature_dim(), &config.hidden_dims, dataset.num_classes, init_seed)?;
    let mut ema = params.clone();
    let mut opt = AdamState::new(&params);
    let mut source = BatchSource::new(dataset, data_seed);
    let sched = AdjustmentSchedule::new(config.a, config.b, prior)?;
    let mut lr = config.learning_rate;
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        let objective = match stage {
            Stage::Joint => scheduled_objective(prior, config, epoch),
            Stage::Student(teacher) => Objective {
                prior,
                config,
                terms: Terms::TRAS,
                student_to_backbone: true,
                external_teacher: Some(teacher),
            },
        };
        let mut sums = LossMeans::default();
        let (mut t_pass, mut s_pass, mut seen) = (0usize, 0usize, 0usize);
        for _ in 0..config.batches_per_epoch {
            let (lab, unl) = source.next(config.batch_size);
            let e = evaluate_objective(&params, &lab, &unl, &objective, true)?;
            let g = e.grads.expect("requested");
            adam_step(&mut params, &g, &mut opt, lr)?;
            if config.decay_target == DecayTarget::Ema {
                ema_update(&mut ema, &params, config.ema_decay)?;
            }
            let b = e.breakdown;
            sums.ssl_labeled += b.ssl_labeled;
            sums.ssl_unlabeled += b.ssl_unlabeled;
            sums.tras_labeled += b.tras_labeled;
            sums.tras_unlabeled += b.tras_unlabeled;
            t_pass += b.teacher_mask_passed;
            s_pass += b.student_mask_passed;
            seen += b.unlabeled;
        }
        if !params.is_finite() {
            return Err(TrasError::InvalidArgument(format!(
                "parameters became non-finite in epoch {epoch}; lower the learning rate"
            )));
        }
        let steps = config.batches_per_epoch.max(1) as f64;
        let loss = LossMeans {
            ssl_labeled: sums.ssl_labeled / steps,
            ssl_unlabeled: sums.ssl_unlabeled / steps,
            tras_labeled: sums.tras_labeled / steps,
            tras_unlabeled: sums.tras_unlabeled / steps,
        };
        let rate = |n: usize| if seen == 0 { 0.0 } else { n as f64 / seen as f64 };

        let eval_model = match config.decay_target {
            DecayTarget::Ema => &ema,
            DecayTarget::LearningRate => &params,
        };
        let teacher_model = match stage {
            Stage::Joint => &params,
            Stage::Student(t) => t,
        };
        let diag = unlabeled_diagnostics(dataset, &params, teacher_model, prior, &sched, config, &grouping)?;
        let test = if dataset.test.is_empty() {
            None
        } else {
            let eval_teacher = match stage {
                Stage::Joint => eval_model,
                Stage::Student(t) => t,
            };
            let l = dataset.num_classes;
            let f = crate::metrics::DEFAULT_GM_FLOOR;
            Some(TestSnapshot {
                student: accuracy(&evaluate_head(eval_model, &dataset.test, l, Head::Student, &grouping, f)?),
                teacher: accuracy(&evaluate_head(eval_teacher, &dataset.test, l, Head::Teacher, &grouping, f)?),
                student_raw: accuracy(&evaluate_head(&params, &dataset.test, l, Head::Student, &grouping, f)?),
            })
        };
        log.records.push(EpochRecord {
            epoch,
            warmup: matches!(stage, Stage::Joint) && epoch < config.warmup_epochs,
            learning_rate: lr,
            loss,
            teacher_mask_rate: rate(t_pass),
            student_mask_rate: rate(s_pass),
            pseudo_label_quality: diag.quality,
            balancedness_raw: diag.balancedness_raw,
            balancedness_transformed: diag.balancedness_transformed,
            test,
        });
        if config.decay_target == DecayTarget::LearningRate {
            lr *= config.ema_decay;
        }
    }
    Ok(LoopResult {
        params,
        ema,
        optimizer: opt,
        log,
    })
}

struct Diagnostics {
    quality: Option<GroupQuality>,
    balancedness_raw: Option<f64>,
    balancedness_transformed: Option<f64>,
}

/// Teacher pseudo-label statistics on the clean unlabeled inputs.
fn unlabeled_diagnostics(
    dataset: &Dataset,
    student_model: &ModelParams,
    teacher_model: &ModelParams,
    prior: &ClassPrior,
    sched: &AdjustmentSchedule,
    config: &TrainConfig,
    grouping: &ClassGrouping,
) -> Result<Diagnostics> {
    if dataset.unlabeled.is_empty() {
        return Ok(Diagnostics {
            quality: None,
            balancedness_raw: None,
            balancedness_transformed: None,
        });
    }
    let mut raw = Vec::with_capacity(dataset.unlabeled.len());
    let mut transformed = Vec::with_capacity(dataset.unlabeled.len());
    let mut pseudo = Vec::new();
    let mut mask = Vec::new();
    let mut hidden = Vec::new();
    for u in &dataset.unlabeled {
        let t_out = forward(teacher_model, &u.x)?;
        let (_, _, target) = teacher_decision(&t_out.teacher_logits, prior, sched, config);
        if let Some(h) = u.hidden_y {
            let s_out = forward(student_model, &u.x)?;
            hidden.push(h);
            pseudo.push(argmax(&target));
            mask.push(student_confident(&s_out.student_logits, config));
        }
        raw.push(t_out.teacher_probs);
        transformed.push(target);
    }
    let quality = if hidden.len() == dataset.unlabeled.len() {
        Some(pseudo_label_quality(&hidden, &pseudo, &mask, grouping)?)
    } else {
        None
    };
    Ok(Diagnostics {
        quality,
        balancedness_raw: Some(balancedness(&raw)?),
        balancedness_transformed: Some(balancedness(&transformed)?),
    })
}

/// Trains in the configured mode. Deterministic in `config.seed`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.labeled.is_empty() {
        return Err(TrasError::InvalidArgument("training needs at least one labeled example".into()));
    }
    let prior = training_prior(dataset, config)?;
    let init_seed = mix_seed(config.seed, 1, 0);
    let data_seed = mix_seed(config.seed, 2, 0);
    match config.mode {
        TrainMode::Shared | TrainMode::TrasMinus => {
            let r = run_loop(dataset, config, &prior, Stage::Joint, init_seed, data_seed)?;
            Ok(TrainOutcome {
                params: r.params,
                ema: r.ema,
                optimizer: r.optimizer,
                log: r.log,
                teacher: None,
                prior,
            })
        }
        TrainMode::TwoStage => {
            let stage_one = TrainConfig {
                warmup_epochs: config.epochs,
                mode: TrainMode::Shared,
                ..config.clone()
            };
            let first = run_loop(dataset, &stage_one, &prior, Stage::Joint, init_seed, data_seed)?;
            let teacher = match config.decay_target {
                DecayTarget::Ema => first.ema,
                DecayTarget::LearningRate => first.params,
            };
            let second = run_loop(
                dataset,
                config,
                &prior,
                Stage::Student(&teacher),
                mix_seed(config.seed, 3, 0),
                mix_seed(config.seed, 4, 0),
            )?;
            let mut log = first.log;
            let offset = log.records.len();
            log.records.extend(second.log.records.into_iter().map(|mut r| {
                r.epoch += offset;
                r
            }));
            Ok(TrainOutcome {
                params: second.params,
                ema: second.ema,
                optimizer: second.optimizer,
                log,
                teacher: Some(teacher),
                prior,
            })
        }
    }
}
