//! Grid sweep over the transformation parameters A and B; writes sweep.csv
//! and one run directory per cell.
//!
//! cargo run --release --example sweep_ab -- [out_dir] [epochs]

use std::path::PathBuf;

use tras::experiment::{run_sweep, ExperimentConfig};

fn main() -> tras::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "sweep-ab".into()));
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);

    let mut config = ExperimentConfig::default();
    config.train.epochs = epochs;
    config.output_dir = Some(out.clone());
    let grid = [0.0, 2.0, 6.0];
    let rows = run_sweep(&config, &grid, &grid, &[0])?;
    println!("  A    B  overall  minority     GM  tail recall  balancedness");
    for r in &rows {
        println!(
            "{:>3} {:>4}  {:>6.1}%  {:>7.1}%  {:.3}  {:>11.3}  {:>12.4}",
            r.a,
            r.b,
            100.0 * r.overall_accuracy,
            100.0 * r.minority_accuracy,
            r.gm,
            r.tail_recall,
            r.balancedness
        );
    }
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}
