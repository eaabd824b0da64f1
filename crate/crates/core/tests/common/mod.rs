//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tras::data::{LabeledBatch, UnlabeledBatch};
use tras::losses::ClassPrior;
use tras::metrics::{
    accuracy_suite, confusion_matrix, geometric_mean, pseudo_label_quality, ClassGrouping, PrecisionRecall,
};
use tras::model::{forward, init_params, ModelParams};
use tras::trainer::{
    evaluate_objective, Objective, Reduction, StudentView, Terms, TrainConfig, TrainMode, UnlabeledDecision,
};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradient magnitudes below this are compared on absolute error `FD_TOLERANCE * floor`.
pub const FD_FLOOR: f64 = 1e-4;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn ref_ce(y: usize, z: &[f64]) -> f64 {
    logsumexp(z) - z[y]
}

fn ref_kl(p: &[f64], z: &[f64]) -> f64 {
    let lse = logsumexp(z);
    p.iter()
        .zip(z)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &zi)| pi * (pi.ln() - (zi - lse)))
        .sum()
}

/// One randomized tiny problem for the gradient oracle.
pub struct GradInstance {
    pub params: ModelParams,
    pub teacher: Option<ModelParams>,
    pub prior: ClassPrior,
    pub config: TrainConfig,
    pub labeled: LabeledBatch,
    pub unlabeled: UnlabeledBatch,
    pub terms: Terms,
}

impl GradInstance {
    pub fn random(seed: u64, terms: Terms, mode: TrainMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = rng.random_range(2..=4);
        let dim = rng.random_range(2..=3);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(3..=5)).collect();
        let mut params = init_params(dim, &hidden, l, rng.random()).unwrap();
        for t in params.tensors_mut() {
            t.iter_mut().for_each(|v| *v += 0.1 * normal(&mut rng));
        }
        let teacher = (mode == TrainMode::TwoStage).then(|| init_params(dim, &hidden, l, rng.random()).unwrap());
        let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let prior = ClassPrior::from_probs(&raw.iter().map(|v| v / s).collect::<Vec<_>>()).unwrap();
        let config = TrainConfig {
            a: rng.random_range(0.0..3.0),
            b: rng.random_range(0.0..3.0),
            tau_labeled: rng.random_range(0.0..2.0),
            threshold: rng.random_range(0.2..0.7),
            mode,
            disable_teacher_transform: rng.random_bool(0.2),
            use_plain_ce_labeled: rng.random_bool(0.3),
            disable_student_mask: rng.random_bool(0.3),
            student_view: if rng.random_bool(0.5) { StudentView::Weak } else { StudentView::Strong },
            reduction: if rng.random_bool(0.5) { Reduction::Sum } else { Reduction::Mean },
            ..TrainConfig::default()
        };
        let n_lab = rng.random_range(1..=3);
        let n_unl = rng.random_range(1..=4);
        let labeled = LabeledBatch {
            inputs: (0..n_lab).map(|_| normal_vec(&mut rng, dim)).collect(),
            labels: (0..n_lab).map(|_| rng.random_range(0..l)).collect(),
        };
        let weak_views: Vec<Vec<f64>> = (0..n_unl).map(|_| normal_vec(&mut rng, dim)).collect();
        let strong_views = weak_views
            .iter()
            .map(|w| w.iter().map(|v| v + 0.3 * normal(&mut rng)).collect())
            .collect();
        let unlabeled = UnlabeledBatch {
            weak_views,
            strong_views,
            source_indices: (0..n_unl).collect(),
        };
        Self {
            params,
            teacher,
            prior,
            config,
            labeled,
            unlabeled,
            terms,
        }
    }

    pub fn student_to_backbone(&self) -> bool {
        self.config.mode != TrainMode::TrasMinus
    }

    pub fn objective(&self) -> Objective<'_> {
        Objective {
            prior: &self.prior,
            config: &self.config,
            terms: self.terms,
            student_to_backbone: self.student_to_backbone(),
            external_teacher: self.teacher.as_ref(),
        }
    }

    /// Independent restatement of the objective with the pseudo-labels,
    /// masks and targets frozen, and with student features held at `base`
    /// when the student gradient does not reach the backbone.
    pub fn reference_value(&self, params: &ModelParams, base: &ModelParams, decisions: &[UnlabeledDecision]) -> f64 {
        let c = &self.config;
        let (ls, us) = match c.reduction {
            Reduction::Sum => (1.0, 1.0),
            Reduction::Mean => (1.0 / self.labeled.len() as f64, 1.0 / self.unlabeled.len() as f64),
        };
        let student_logits = |x: &[f64]| {
            let feats = if self.student_to_backbone() {
                forward(params, x).unwrap().features
            } else {
                forward(base, x).unwrap().features
            };
            params.student_head.apply(&feats)
        };
        let mut total = 0.0;
        for (x, &y) in self.labeled.inputs.iter().zip(&self.labeled.labels) {
            if self.terms.ssl_labeled {
                total += ls * ref_ce(y, &forward(params, x).unwrap().teacher_logits);
            }
            if self.terms.tras_labeled {
                let mut z = student_logits(x);
                if !c.use_plain_ce_labeled {
                    for (zi, pi) in z.iter_mut().zip(self.prior.probs()) {
                        *zi += c.tau_labeled * pi.ln();
                    }
                }
                total += ls * ref_ce(y, &z);
            }
        }
        for (i, d) in decisions.iter().enumerate() {
            let strong = &self.unlabeled.strong_views[i];
            if self.terms.ssl_unlabeled && d.teacher_mask {
                total += us * ref_ce(d.pseudo_label, &forward(params, strong).unwrap().teacher_logits);
            }
            if self.terms.tras_unlabeled && d.student_mask {
                let view = match c.student_view {
                    StudentView::Weak => &self.unlabeled.weak_views[i],
                    StudentView::Strong => strong,
                };
                total += us * ref_kl(&d.target, &student_logits(view));
            }
        }
        total
    }

    /// Worst per-coordinate relative error between analytic and central
    /// finite-difference gradients, and the value mismatch at the base point.
    pub fn check(&self) -> (f64, f64) {
        let eval = evaluate_objective(&self.params, &self.labeled, &self.unlabeled, &self.objective(), true).unwrap();
        let analytic = eval.grads.unwrap();
        let base = &self.params;
        let value_err = (eval.value - self.reference_value(base, base, &eval.decisions)).abs();
        let mut worst: f64 = 0.0;
        let mut probe = self.params.clone();
        let a_tensors: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.to_vec()).collect();
        for (ti, at) in a_tensors.iter().enumerate() {
            for j in 0..at.len() {
                let orig = probe.tensors()[ti][j];
                probe.tensors_mut()[ti][j] = orig + FD_STEP;
                let fp = self.reference_value(&probe, base, &eval.decisions);
                probe.tensors_mut()[ti][j] = orig - FD_STEP;
                let fm = self.reference_value(&probe, base, &eval.decisions);
                probe.tensors_mut()[ti][j] = orig;
                let numeric = (fp - fm) / (2.0 * FD_STEP);
                let a = at[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
                worst = worst.max(rel);
            }
        }
        (worst, value_err)
    }
}

pub struct GradientSuite {
    pub instances: usize,
    pub worst_rel_err: f64,
    pub worst_value_err: f64,
    pub worst_case: String,
}

/// Every term combination in every mode, `per_combo` random instances each.
pub fn gradient_suite(per_combo: usize) -> GradientSuite {
    let mut s = GradientSuite {
        instances: 0,
        worst_rel_err: 0.0,
        worst_value_err: 0.0,
        worst_case: String::new(),
    };
    let modes = [TrainMode::Shared, TrainMode::TrasMinus, TrainMode::TwoStage];
    for (ci, terms) in Terms::all_combinations().into_iter().enumerate() {
        for (mi, &mode) in modes.iter().enumerate() {
            for k in 0..per_combo {
                let seed = (ci * 1000 + mi * 100 + k) as u64;
                let (rel, verr) = GradInstance::random(seed, terms, mode).check();
                s.instances += 1;
                if rel > s.worst_rel_err {
                    s.worst_rel_err = rel;
                    s.worst_case = format!("{terms:?} {mode} seed {seed}");
                }
                s.worst_value_err = s.worst_value_err.max(verr);
            }
        }
    }
    s
}

/// Gradient of the KL term alone, and the teacher-head parameters before and
/// after one Adam step on it.
pub fn kl_only_step(seed: u64) -> (ModelParams, ModelParams, ModelParams) {
    let terms = Terms {
        ssl_labeled: false,
        ssl_unlabeled: false,
        tras_labeled: false,
        tras_unlabeled: true,
    };
    let mut inst = GradInstance::random(seed, terms, TrainMode::Shared);
    inst.config.disable_student_mask = true;
    let g = evaluate_objective(&inst.params, &inst.labeled, &inst.unlabeled, &inst.objective(), true)
        .unwrap()
        .grads
        .unwrap();
    let before = inst.params.clone();
    let mut after = inst.params.clone();
    let mut state = tras::optim::AdamState::new(&after);
    tras::optim::adam_step(&mut after, &g, &mut state, 0.01).unwrap();
    (g, before, after)
}

// ---------------------------------------------------------------------------
// Brute-force metric oracles

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, l: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..l)).collect()
}

pub fn random_grouping(rng: &mut ChaCha8Rng, l: usize) -> ClassGrouping {
    let mut classes: Vec<usize> = (0..l).collect();
    for i in (1..l).rev() {
        classes.swap(i, rng.random_range(0..=i));
    }
    let a = rng.random_range(0..=l);
    let b = rng.random_range(a..=l);
    let minority: Vec<usize> = (0..l).filter(|_| rng.random_bool(0.5)).collect();
    ClassGrouping {
        head: classes[..a].to_vec(),
        torso: classes[a..b].to_vec(),
        tail: classes[b..].to_vec(),
        minority: if minority.is_empty() { vec![l - 1] } else { minority },
    }
}

fn brute_recall(t: &[usize], p: &[usize], c: usize) -> f64 {
    let n = t.iter().filter(|&&x| x == c).count();
    let hit = t.iter().zip(p).filter(|(&x, &y)| x == c && y == c).count();
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

fn brute_group(t: &[usize], p: &[usize], m: &[bool], group: &[usize]) -> PrecisionRecall {
    let inside = |c: usize| group.contains(&c);
    let idx = 0..t.len();
    let predicted = idx.clone().filter(|&i| m[i] && inside(p[i])).count();
    let correct = idx.clone().filter(|&i| m[i] && inside(p[i]) && p[i] == t[i]).count();
    let actual = idx.clone().filter(|&i| inside(t[i])).count();
    let found = idx.filter(|&i| inside(t[i]) && m[i] && p[i] == t[i]).count();
    PrecisionRecall {
        precision: if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 },
        recall: if actual == 0 { 0.0 } else { found as f64 / actual as f64 },
        precision_defined: predicted > 0,
    }
}

pub struct MetricsSuite {
    pub instances: usize,
    pub worst_err: f64,
    pub confusion_mismatches: usize,
}

/// Compares the metrics module against direct counting on random instances.
pub fn metrics_suite(instances: usize, seed: u64) -> MetricsSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut confusion_mismatches = 0;
    for _ in 0..instances {
        let l = rng.random_range(2..=20);
        let n = if rng.random_bool(0.05) { rng.random_range(0..=10_000) } else { rng.random_range(0..=300) };
        let t = random_labels(&mut rng, n, l);
        let bias = rng.random_range(0.0..1.0);
        let p: Vec<usize> = t
            .iter()
            .map(|&x| if rng.random_bool(bias) { x } else { rng.random_range(0..l) })
            .collect();
        let m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let grouping = random_grouping(&mut rng, l);

        let conf = confusion_matrix(&t, &p, l).unwrap();
        for i in 0..l {
            for j in 0..l {
                let direct = t.iter().zip(&p).filter(|(&a, &b)| a == i && b == j).count() as u64;
                confusion_mismatches += (conf.counts[i][j] != direct) as usize;
            }
        }

        let s = accuracy_suite(&conf, &grouping);
        let overall = if n == 0 {
            0.0
        } else {
            t.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / n as f64
        };
        worst = worst.max((s.overall - overall).abs());
        let recalls: Vec<f64> = (0..l).map(|c| brute_recall(&t, &p, c)).collect();
        for (a, b) in s.per_class_recall.iter().zip(&recalls) {
            worst = worst.max((a - b).abs());
        }
        let minority = grouping.minority.iter().map(|&c| recalls[c]).sum::<f64>() / grouping.minority.len() as f64;
        worst = worst.max((s.minority_accuracy - minority).abs());

        let floor = if rng.random_bool(0.5) { 1e-3 } else { rng.random_range(1e-6..0.5) };
        let product: f64 = recalls.iter().map(|r| r.max(floor)).product();
        worst = worst.max((geometric_mean(&recalls, floor) - product.powf(1.0 / l as f64)).abs());

        let q = pseudo_label_quality(&t, &p, &m, &grouping).unwrap();
        for (got, group) in [(q.head, &grouping.head), (q.torso, &grouping.torso), (q.tail, &grouping.tail)] {
            let want = brute_group(&t, &p, &m, group);
            worst = worst.max((got.precision - want.precision).abs());
            worst = worst.max((got.recall - want.recall).abs());
            if got.precision_defined != want.precision_defined {
                worst = f64::INFINITY;
            }
        }
    }
    MetricsSuite {
        instances,
        worst_err: worst,
        confusion_mismatches,
    }
}
