//! Shared backbone vs. blocked student gradients vs. two-stage training, plus
//! the FixMatch-only teacher, averaged over a few seeds.
//!
//! cargo run --release --example ablation_modes -- [epochs] [seeds]

use tras::experiment::{evaluate_checkpoint, Checkpoint, ExperimentConfig};
use tras::trainer::{train, TrainMode};

fn main() -> tras::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(30);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);

    let variants: [(&str, fn(&mut ExperimentConfig)); 4] = [
        ("fixmatch (teacher)", |c| c.train.warmup_epochs = c.train.epochs),
        ("shared", |_| {}),
        ("tras-minus", |c| c.train.mode = TrainMode::TrasMinus),
        ("two-stage", |c| c.train.mode = TrainMode::TwoStage),
    ];
    for (name, edit) in variants {
        let (mut overall, mut minority) = (0.0, 0.0);
        for seed in 0..seeds {
            let mut config = ExperimentConfig::default().with_seed(seed);
            config.train.epochs = epochs;
            edit(&mut config);
            let dataset = config.dataset.build()?;
            let outcome = train(&dataset, &config.train)?;
            let m = evaluate_checkpoint(&Checkpoint::from_outcome(&config, &outcome), &dataset)?;
            let report = if name.starts_with("fixmatch") { m.teacher } else { m.student };
            overall += report.overall_accuracy / seeds as f64;
            minority += report.minority_accuracy / seeds as f64;
        }
        println!("{name:<19} overall {:>5.1}%  minority {:>5.1}%", 100.0 * overall, 100.0 * minority);
    }
    Ok(())
}
