//! Generates the long-tailed Gaussian-mixture benchmark and writes it as CSV
//! files with a manifest.
//!
//! cargo run --example synthetic_data -- [out_dir]

use std::path::PathBuf;

use tras::data::{
    longtail_counts, split_labeled_unlabeled, synth_gaussian_mixture, write_labeled_csv, write_unlabeled_csv,
    DatasetManifest, MixtureSpec,
};

fn main() -> tras::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic-data".into()));
    let (gamma, beta, seed) = (50.0, 0.2, 7);
    let totals = longtail_counts(1000, gamma, 10)?;
    let (labeled, unlabeled) = split_labeled_unlabeled(&totals, beta)?;
    println!("totals    {totals:?}");
    println!("labeled   {labeled:?}");
    println!("unlabeled {unlabeled:?}");

    let spec = MixtureSpec::random_means(10, 4, 1.0, 0.5, seed)?;
    let dataset = synth_gaussian_mixture(&spec, &labeled, &unlabeled, &[100; 10])?;

    std::fs::create_dir_all(&out)?;
    write_labeled_csv(&out.join("labeled.csv"), &dataset.labeled)?;
    write_unlabeled_csv(&out.join("unlabeled.csv"), &dataset.unlabeled)?;
    write_labeled_csv(&out.join("test.csv"), &dataset.test)?;
    let manifest = DatasetManifest::describe(&dataset, Some(gamma), Some(beta), Some(seed));
    manifest.write(&out.join("manifest.txt"))?;
    print!("{}", manifest.render());
    println!("wrote {}", out.display());
    Ok(())
}
