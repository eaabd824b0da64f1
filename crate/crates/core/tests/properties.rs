mod common;

use proptest::prelude::*;
use tras::data::{
    load_csv_dataset, longtail_counts, split_labeled_unlabeled, synth_gaussian_mixture, write_labeled_csv,
    write_unlabeled_csv, AugmentMode, Augmenter, Example, LabeledBatch, MixtureSpec, UnlabeledBatch,
};
use tras::experiment::{parse_config, ExperimentConfig, Overrides};
use tras::losses::{
    alpha_weights, argmax, ce_loss, da_ce_loss, kl_div, shift_by_log_prior, softmax, transform_teacher_logits,
    AdjustmentSchedule, ClassPrior,
};
use tras::metrics::{accuracy_suite, balancedness, confusion_matrix, geometric_mean, ClassGrouping};
use tras::model::{backward_into, forward, forward_traced, init_params};
use tras::trainer::{
    evaluate_objective, ssl_loss, total_loss_and_grads, tras_loss, train, Objective, Terms, TrainConfig,
};

fn logits(l: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0..8.0f64, l)
}

fn dist(l: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01..1.0f64, l).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

/// Strictly decreasing prior, head first.
fn sorted_prior(l: usize) -> impl Strategy<Value = ClassPrior> {
    prop::collection::vec(0.05..1.0f64, l).prop_map(|mut v| {
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for i in 1..v.len() {
            if v[i] >= v[i - 1] * 0.95 {
                v[i] = v[i - 1] * 0.95;
            }
        }
        let s: f64 = v.iter().sum();
        ClassPrior::from_probs(&v.iter().map(|x| x / s).collect::<Vec<_>>()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_is_shift_invariant(z in logits(6), c in -50.0..50.0f64) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((softmax(&z).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn da_ce_reduces_to_ce(z in logits(5), y in 0usize..5, p in dist(5), tau in 0.0..3.0f64) {
        let uniform = ClassPrior::from_probs(&[0.2; 5]).unwrap();
        let prior = ClassPrior::from_probs(&p).unwrap();
        prop_assert!((da_ce_loss(y, &z, &uniform, tau) - ce_loss(y, &z)).abs() < 1e-12);
        prop_assert!((da_ce_loss(y, &z, &prior, 0.0) - ce_loss(y, &z)).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_on_identity(p in dist(5), q in dist(5)) {
        prop_assert!(kl_div(&p, &q) >= 0.0);
        prop_assert!(kl_div(&p, &p) < 1e-12);
        let gap = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > 1e-3 {
            prop_assert!(kl_div(&p, &q) > 0.0);
        }
    }

    #[test]
    fn alpha_is_softmax_of_negative_log_prior(p in dist(7)) {
        let prior = ClassPrior::from_probs(&p).unwrap();
        let neg: Vec<f64> = p.iter().map(|v| -v.ln()).collect();
        for (a, b) in alpha_weights(&prior).iter().zip(softmax(&neg)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tau_is_nondecreasing_in_pseudo_label(prior in sorted_prior(6), a in 0.01..5.0f64, b in 0.0..5.0f64) {
        let s = AdjustmentSchedule::new(a, b, &prior).unwrap();
        for y in 1..6 {
            prop_assert!(s.tau_of(y) >= s.tau_of(y - 1));
        }
    }

    #[test]
    fn larger_b_lowers_head_to_tail_ratio(
        z in logits(5), prior in sorted_prior(5), a in 0.0..3.0f64, b in 0.0..3.0f64, db in 0.01..2.0f64, y in 0usize..5,
    ) {
        let lo = transform_teacher_logits(&z, y, &prior, &AdjustmentSchedule::new(a, b, &prior).unwrap());
        let hi = transform_teacher_logits(&z, y, &prior, &AdjustmentSchedule::new(a, b + db, &prior).unwrap());
        for h in 0..5 {
            for t in h + 1..5 {
                prop_assert!(hi[h] / hi[t] < lo[h] / lo[t]);
            }
        }
    }

    /// Head-biased batches: logits lean toward the prior by `c·log π`, and the
    /// schedule never subtracts more than that lean.
    #[test]
    fn transform_does_not_increase_head_bias(
        prior in sorted_prior(6),
        noise in prop::collection::vec(prop::collection::vec(-0.5..0.5f64, 6), 1..20),
        c in 1.0..3.0f64, a in 0.0..2.0f64, b in 0.0..1.0f64,
    ) {
        let sched = AdjustmentSchedule::new(a, b, &prior).unwrap();
        let max_tau = (0..6).map(|y| sched.tau_of(y)).fold(0.0, f64::max);
        prop_assume!(max_tau <= c);
        let batch: Vec<Vec<f64>> = noise.iter().map(|n| shift_by_log_prior(n, &prior, c)).collect();
        let raw: Vec<Vec<f64>> = batch.iter().map(|z| softmax(z)).collect();
        let transformed: Vec<Vec<f64>> = batch
            .iter()
            .map(|z| {
                let y = argmax(&shift_by_log_prior(z, &prior, -1.0));
                transform_teacher_logits(z, y, &prior, &sched)
            })
            .collect();
        prop_assert!(balancedness(&transformed).unwrap() <= balancedness(&raw).unwrap() + 1e-12);
    }

    #[test]
    fn count_profile_is_monotone_with_ratio_near_gamma(n1 in 20usize..6000, gamma in 1.0..120.0f64, l in 2usize..12) {
        let c = longtail_counts(n1, gamma, l).unwrap();
        prop_assert_eq!(c[0], n1);
        prop_assert!(c.windows(2).all(|w| w[1] <= w[0]));
        let last = *c.last().unwrap() as f64;
        let ratio = c[0] as f64 / last;
        if n1 as f64 / gamma >= 1.0 {
            prop_assert!(ratio >= gamma * (1.0 - 1.0 / last) - 1e-9 && ratio <= gamma * (1.0 + 1.0 / last) + 1e-9);
        }
    }

    #[test]
    fn split_conserves_and_tracks_beta(totals in prop::collection::vec(2usize..3000, 1..12), beta in 0.01..0.99f64) {
        let (lab, unl) = split_labeled_unlabeled(&totals, beta).unwrap();
        for ((t, l), u) in totals.iter().zip(&lab).zip(&unl) {
            prop_assert_eq!(l + u, *t);
            prop_assert!(*l >= 1 && *u >= 1);
            let want = beta * *t as f64;
            prop_assert!((*l as f64 - want).abs() <= 0.5 + 1e-9 || *l == 1 || *u == 1);
        }
    }

    #[test]
    fn augmentation_is_a_pure_function_of_seed(x in prop::collection::vec(-3.0..3.0f64, 4), seed in any::<u64>()) {
        let aug = Augmenter::from_labeled(&[
            Example { x: vec![0.0, 1.0, 2.0, 3.0], y: 0 },
            Example { x: vec![1.0, -1.0, 0.5, 2.0], y: 1 },
        ]);
        for mode in [AugmentMode::Weak, AugmentMode::Strong] {
            prop_assert_eq!(aug.augment(&x, mode, seed), aug.augment(&x, mode, seed));
        }
    }

    #[test]
    fn forward_is_finite_and_normalized(x in prop::collection::vec(-10.0..10.0f64, 3), seed in any::<u64>()) {
        let p = init_params(3, &[8, 5], 4, seed).unwrap();
        let out = forward(&p, &x).unwrap();
        prop_assert!(out.teacher_logits.iter().chain(&out.student_logits).all(|v| v.is_finite()));
        prop_assert!((out.teacher_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((out.student_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backbone_gradient_is_sum_of_branches(
        x in prop::collection::vec(-2.0..2.0f64, 3), gt in logits(4), gs in logits(4), seed in any::<u64>(),
    ) {
        let p = init_params(3, &[6, 5], 4, seed).unwrap();
        let (trace, _) = forward_traced(&p, &x).unwrap();
        let mut both = p.zeros_like();
        backward_into(&p, &trace, Some(&gt), Some(&gs), true, &mut both);
        let mut sum = p.zeros_like();
        backward_into(&p, &trace, Some(&gt), None, true, &mut sum);
        backward_into(&p, &trace, None, Some(&gs), true, &mut sum);
        prop_assert!(both.max_abs_diff(&sum) < 1e-12);
    }

    #[test]
    fn gm_is_at_most_arithmetic_mean(r in prop::collection::vec(0.0..1.0f64, 1..20), floor in 1e-6..0.5f64) {
        let floored: Vec<f64> = r.iter().map(|v| v.max(floor)).collect();
        let am = floored.iter().sum::<f64>() / floored.len() as f64;
        let gm = geometric_mean(&r, floor);
        prop_assert!(gm <= am + 1e-12);
        prop_assert!((0.0..=1.0).contains(&gm));
    }

    #[test]
    fn relabeling_classes_permutes_recalls(
        pairs in prop::collection::vec((0usize..6, 0usize..6), 1..200), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let tp: Vec<usize> = t.iter().map(|&c| perm[c]).collect();
        let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
        let g = ClassGrouping::for_sorted_classes(6);
        let a = accuracy_suite(&confusion_matrix(&t, &p, 6).unwrap(), &g);
        let b = accuracy_suite(&confusion_matrix(&tp, &pp, 6).unwrap(), &g);
        prop_assert!((a.overall - b.overall).abs() < 1e-12);
        for c in 0..6 {
            prop_assert!((a.per_class_recall[c] - b.per_class_recall[perm[c]]).abs() < 1e-12);
        }
        prop_assert!((geometric_mean(&a.per_class_recall, 1e-3) - geometric_mean(&b.per_class_recall, 1e-3)).abs() < 1e-12);
    }

    #[test]
    fn confusion_rows_sum_to_class_counts(pairs in prop::collection::vec((0usize..5, 0usize..5), 0..100)) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let m = confusion_matrix(&t, &p, 5).unwrap();
        for c in 0..5 {
            prop_assert_eq!(m.counts[c].iter().sum::<u64>(), t.iter().filter(|&&y| y == c).count() as u64);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn raising_threshold_never_admits_more(seed in 0u64..10_000, t1 in 0.1..0.9f64, dt in 0.0..0.1f64) {
        let inst = common::GradInstance::random(seed, Terms::ALL, tras::trainer::TrainMode::Shared);
        let mut lo = inst.config.clone();
        lo.threshold = t1;
        lo.disable_student_mask = false;
        let mut hi = lo.clone();
        hi.threshold = t1 + dt;
        let run = |c: &TrainConfig| {
            let obj = Objective { config: c, ..inst.objective() };
            evaluate_objective(&inst.params, &inst.labeled, &inst.unlabeled, &obj, false).unwrap().breakdown
        };
        let (a, b) = (run(&lo), run(&hi));
        prop_assert!(b.teacher_mask_passed <= a.teacher_mask_passed);
        prop_assert!(b.student_mask_passed <= a.student_mask_passed);
    }

    #[test]
    fn total_loss_is_sum_of_branch_losses(seed in 0u64..10_000) {
        let inst = common::GradInstance::random(seed, Terms::ALL, tras::trainer::TrainMode::Shared);
        let (lab, unl, prior, cfg) = (&inst.labeled, &inst.unlabeled, &inst.prior, &inst.config);
        let (total, _, _) = total_loss_and_grads(&inst.params, lab, unl, prior, cfg, cfg.warmup_epochs).unwrap();
        let (ssl, _) = ssl_loss(&inst.params, lab, unl, prior, cfg).unwrap();
        let (tras, _) = tras_loss(&inst.params, lab, unl, prior, cfg).unwrap();
        prop_assert!((total - (ssl + tras)).abs() < 1e-12);
    }
}

#[test]
fn identical_heads_receive_identical_gradients() {
    let mut p = init_params(3, &[5], 4, 11).unwrap();
    p.student_head = p.teacher_head.clone();
    let (trace, out) = forward_traced(&p, &[0.3, -1.0, 0.7]).unwrap();
    let g = tras::losses::ce_grad(2, &out.teacher_logits);
    let mut grads = p.zeros_like();
    backward_into(&p, &trace, Some(&g), Some(&g), true, &mut grads);
    assert_eq!(grads.teacher_head, grads.student_head);
}

fn small_dataset(seed: u64) -> tras::data::Dataset {
    let totals = longtail_counts(60, 5.0, 3).unwrap();
    let (l, u) = split_labeled_unlabeled(&totals, 0.3).unwrap();
    let spec = MixtureSpec::random_means(3, 2, 2.0, 0.4, seed).unwrap();
    synth_gaussian_mixture(&spec, &l, &u, &[6, 6, 6]).unwrap()
}

#[test]
fn warmup_teacher_matches_fixmatch_only_run() {
    let ds = small_dataset(4);
    let base = TrainConfig {
        epochs: 4,
        warmup_epochs: 2,
        batches_per_epoch: 4,
        batch_size: 8,
        hidden_dims: vec![8],
        threshold: 0.6,
        seed: 9,
        ..TrainConfig::default()
    };
    let fixmatch = TrainConfig {
        warmup_epochs: 4,
        ..base.clone()
    };
    let a = train(&ds, &base).unwrap();
    let b = train(&ds, &fixmatch).unwrap();
    for e in 0..2 {
        let (ra, rb) = (&a.log.records[e], &b.log.records[e]);
        assert_eq!(ra.test.as_ref().unwrap().teacher, rb.test.as_ref().unwrap().teacher);
        assert_eq!(ra.loss.ssl_labeled, rb.loss.ssl_labeled);
        assert_eq!(ra.loss.ssl_unlabeled, rb.loss.ssl_unlabeled);
    }
    assert!(a.log.records.iter().all(|r| r.loss.tras_labeled.is_finite()));
    assert!(a.params.is_finite() && a.ema.is_finite());
}

#[test]
fn warmup_only_labeled_term_moves_student_head() {
    let inst = common::GradInstance::random(3, Terms::ALL, tras::trainer::TrainMode::Shared);
    let cfg = TrainConfig {
        warmup_epochs: 5,
        ..inst.config.clone()
    };
    let (_, g, _) = total_loss_and_grads(&inst.params, &inst.labeled, &inst.unlabeled, &inst.prior, &cfg, 0).unwrap();
    let unl_only = LabeledBatch::default();
    let (_, g_unl, _) = total_loss_and_grads(&inst.params, &unl_only, &inst.unlabeled, &inst.prior, &cfg, 0).unwrap();
    assert!(g.student_head.weight.iter().any(|&v| v != 0.0));
    assert!(g_unl.student_head.weight.iter().chain(&g_unl.student_head.bias).all(|&v| v == 0.0));
    let no_unl = UnlabeledBatch::default();
    let (_, g_lab, _) = total_loss_and_grads(&inst.params, &inst.labeled, &no_unl, &inst.prior, &cfg, 0).unwrap();
    assert_eq!(g.student_head, g_lab.student_head);
}

#[test]
fn csv_round_trip_preserves_dataset() {
    let ds = small_dataset(2);
    let dir = tempfile::tempdir().unwrap();
    let (l, u, t) = (dir.path().join("l.csv"), dir.path().join("u.csv"), dir.path().join("t.csv"));
    write_labeled_csv(&l, &ds.labeled).unwrap();
    write_unlabeled_csv(&u, &ds.unlabeled).unwrap();
    write_labeled_csv(&t, &ds.test).unwrap();
    let back = load_csv_dataset(&l, &u, Some(&t), Some(ds.num_classes)).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn csv_errors_carry_row_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let l = dir.path().join("l.csv");
    let u = dir.path().join("u.csv");
    std::fs::write(&l, "0.1,0.2,0\n0.3,oops,1\n").unwrap();
    std::fs::write(&u, "0.1,0.2\n").unwrap();
    let e = load_csv_dataset(&l, &u, None, None).unwrap_err().to_string();
    assert!(e.contains('2') && e.contains("oops"), "{e}");
    std::fs::write(&l, "0.1,0.2,0\n0.3,0.4,1\n").unwrap();
    std::fs::write(&u, "0.1,0.2\n0.1,0.2,0.3,0.4\n").unwrap();
    let e = load_csv_dataset(&l, &u, None, None).unwrap_err().to_string();
    assert!(e.contains("row 2") || e.contains(":2"), "{e}");
}

#[test]
fn config_survives_a_toml_round_trip() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.a = 3.5;
    cfg.train.mode = tras::trainer::TrainMode::TwoStage;
    cfg.dataset.feature_dim = 6;
    cfg.eval.minority = Some(vec![8, 9]);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, toml::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(parse_config(Some(&p), &Overrides::default()).unwrap(), cfg);
}
