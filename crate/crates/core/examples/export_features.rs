//! Trains briefly, then writes penultimate-layer features of the test split
//! (the input to both heads) as CSV.
//!
//! cargo run --release --example export_features -- [out.csv]

use tras::experiment::ExperimentConfig;
use tras::model::{export_features, write_features_csv};
use tras::trainer::train;

fn main() -> tras::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "features.csv".into());
    let mut config = ExperimentConfig::default();
    config.train.epochs = 10;
    let dataset = config.dataset.build()?;
    let outcome = train(&dataset, &config.train)?;
    let params = outcome.eval_params(&config.train);

    let inputs: Vec<Vec<f64>> = dataset.test.iter().map(|e| e.x.clone()).collect();
    let features = export_features(params, &inputs)?;
    write_features_csv(out.as_ref(), params.feature_dim(), &features)?;
    let active = features[0].iter().filter(|&&v| v > 0.0).count();
    println!(
        "wrote {} rows of {} features to {out} ({} active units in the first row)",
        features.len(),
        params.feature_dim(),
        active
    );
    Ok(())
}
