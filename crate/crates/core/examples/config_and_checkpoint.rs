//! Parses a TOML config with command-line style overrides, runs it for two
//! seeds, then reloads a checkpoint and re-evaluates it.
//!
//! cargo run --release --example config_and_checkpoint -- [out_dir]

use std::path::PathBuf;

use tras::experiment::{evaluate_checkpoint, parse_config, run_experiment, Checkpoint, Overrides, CHECKPOINT_FILE};

const CONFIG: &str = r#"
[dataset]
feature_dim = 4
gamma = 50.0

[train]
A = 2.0
B = 2.0
epochs = 15
mode = "shared"

[eval]
minority = [5, 6, 7, 8, 9]
"#;

fn main() -> tras::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "config-demo".into()));
    std::fs::create_dir_all(&out)?;
    let path = out.join("experiment.toml");
    std::fs::write(&path, CONFIG)?;

    let mut overrides = Overrides::default();
    overrides.set("train.B", "1.0");
    overrides.set("output_dir", format!("{:?}", out.join("runs").display().to_string()));
    let config = parse_config(Some(&path), &overrides)?;
    println!("A = {}, B = {} (overridden), epochs = {}", config.train.a, config.train.b, config.train.epochs);

    let summary = run_experiment(&config, &[0, 1])?;
    let agg = summary.aggregate.expect("two seeds");
    println!(
        "overall {:.1}% ± {:.1}, minority {:.1}% ± {:.1}",
        100.0 * agg.overall_accuracy.mean,
        100.0 * agg.overall_accuracy.std,
        100.0 * agg.minority_accuracy.mean,
        100.0 * agg.minority_accuracy.std
    );

    let run = &summary.runs[0];
    let ck = Checkpoint::load(&run.dir.join(CHECKPOINT_FILE))?;
    let again = evaluate_checkpoint(&ck, &ck.config.dataset.build()?)?;
    assert_eq!(again.student.confusion, run.metrics.student.confusion);
    println!("checkpoint {} re-evaluates identically", run.dir.display());

    match parse_config(Some(&path), Overrides::default().set("train.threshold", "0")) {
        Err(e) => println!("invalid override rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
