//! Trains the shared-backbone model on a reduced benchmark and prints the
//! per-epoch log alongside the final student and teacher metrics.
//!
//! cargo run --release --example train_shared -- [epochs]

use tras::experiment::{evaluate_checkpoint, Checkpoint, ExperimentConfig};
use tras::trainer::train;

fn main() -> tras::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let mut config = ExperimentConfig::default();
    config.train.epochs = epochs;
    config.validate()?;

    let dataset = config.dataset.build()?;
    println!(
        "labeled {} / unlabeled {} / test {}, counts {:?}",
        dataset.labeled.len(),
        dataset.unlabeled.len(),
        dataset.test.len(),
        dataset.labeled_counts()
    );
    let outcome = train(&dataset, &config.train)?;
    println!("epoch  warmup  loss(ssl)  loss(tras)  mask(t)  mask(s)  bal raw/transf  test student/teacher");
    for r in outcome.log.records.iter().filter(|r| r.epoch % 5 == 4 || r.epoch < 3) {
        let t = r.test.as_ref().unwrap();
        println!(
            "{:>5}  {:>6}  {:>9.2}  {:>10.2}  {:>7.2}  {:>7.2}  {:>6.3}/{:<6.3}  {:>6.1}%/{:.1}%",
            r.epoch,
            r.warmup,
            r.loss.ssl_labeled + r.loss.ssl_unlabeled,
            r.loss.tras_labeled + r.loss.tras_unlabeled,
            r.teacher_mask_rate,
            r.student_mask_rate,
            r.balancedness_raw.unwrap_or(f64::NAN),
            r.balancedness_transformed.unwrap_or(f64::NAN),
            100.0 * t.student.overall,
            100.0 * t.teacher.overall,
        );
    }

    let metrics = evaluate_checkpoint(&Checkpoint::from_outcome(&config, &outcome), &dataset)?;
    for (name, m) in [("student", &metrics.student), ("teacher", &metrics.teacher)] {
        println!(
            "{name}: overall {:.1}%  minority {:.1}%  GM {:.3}",
            100.0 * m.overall_accuracy,
            100.0 * m.minority_accuracy,
            m.gm
        );
    }
    Ok(())
}
