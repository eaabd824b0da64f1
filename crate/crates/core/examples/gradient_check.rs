//! Compares backpropagated gradients of the full objective with central
//! finite differences on a tiny network, in each training mode.
//!
//! cargo run --example gradient_check

use tras::data::{LabeledBatch, UnlabeledBatch};
use tras::losses::ClassPrior;
use tras::model::{init_params, ModelParams};
use tras::trainer::{evaluate_objective, Objective, Terms, TrainConfig, TrainMode};

fn main() -> tras::Result<()> {
    let prior = ClassPrior::from_probs(&[0.6, 0.3, 0.1])?;
    let labeled = LabeledBatch {
        inputs: vec![vec![0.5, -1.0], vec![1.2, 0.3]],
        labels: vec![0, 2],
    };
    let unlabeled = UnlabeledBatch {
        weak_views: vec![vec![0.1, 0.9], vec![-0.7, 0.2], vec![1.5, -0.4]],
        strong_views: vec![vec![0.3, 0.6], vec![-0.9, 0.5], vec![1.1, -0.1]],
        source_indices: vec![0, 1, 2],
    };
    let frozen_teacher = init_params(2, &[5], 3, 99)?;

    for mode in [TrainMode::Shared, TrainMode::TrasMinus, TrainMode::TwoStage] {
        let config = TrainConfig {
            threshold: 0.34,
            mode,
            ..TrainConfig::default()
        };
        let params = init_params(2, &[5], 3, 7)?;
        // Pseudo-labels, masks and targets are constants of the objective, so
        // differencing the full value is only exact for the labeled terms. The
        // integration tests freeze those decisions to cover the rest.
        let terms = Terms {
            ssl_unlabeled: false,
            tras_unlabeled: false,
            ..Terms::ALL
        };
        let objective = Objective {
            prior: &prior,
            config: &config,
            terms,
            student_to_backbone: mode != TrainMode::TrasMinus,
            external_teacher: (mode == TrainMode::TwoStage).then_some(&frozen_teacher),
        };
        let value = |p: &ModelParams| evaluate_objective(p, &labeled, &unlabeled, &objective, false).map(|e| e.value);
        let analytic = evaluate_objective(&params, &labeled, &unlabeled, &objective, true)?.grads.unwrap();

        let h = 1e-5;
        let mut probe = params.clone();
        let mut worst: f64 = 0.0;
        for (t, grads) in analytic.tensors().iter().enumerate() {
            for j in 0..grads.len() {
                let orig = probe.tensors()[t][j];
                probe.tensors_mut()[t][j] = orig + h;
                let up = value(&probe)?;
                probe.tensors_mut()[t][j] = orig - h;
                let down = value(&probe)?;
                probe.tensors_mut()[t][j] = orig;
                let numeric = (up - down) / (2.0 * h);
                if mode == TrainMode::TrasMinus && t < 2 * params.backbone.len() {
                    // Student gradients are blocked from the backbone on purpose.
                    continue;
                }
                worst = worst.max((grads[j] - numeric).abs() / grads[j].abs().max(numeric.abs()).max(1e-4));
            }
        }
        println!("{:<11} params {:>3}  worst relative error {worst:.2e}", mode.to_string(), params.num_params());
    }
    println!("(the tests/ oracle covers every term combination with frozen pseudo-labels)");
    Ok(())
}
