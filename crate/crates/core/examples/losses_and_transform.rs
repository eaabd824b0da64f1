//! Class prior, adjustment weights and the teacher logit transformation on a
//! head-biased batch.
//!
//! cargo run --example losses_and_transform

use tras::data::longtail_counts;
use tras::losses::{
    alpha_weights, argmax, ce_loss, da_ce_loss, shift_by_log_prior, softmax, transform_teacher_logits,
    AdjustmentSchedule, ClassPrior,
};
use tras::metrics::balancedness;

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn main() -> tras::Result<()> {
    let counts: Vec<u64> = longtail_counts(200, 50.0, 5)?.into_iter().map(|c| c as u64).collect();
    let prior = ClassPrior::from_counts(&counts, 0.0)?;
    println!("counts  {counts:?}");
    println!("prior   {}", fmt(prior.probs()));
    println!("alpha   {}", fmt(&alpha_weights(&prior)));

    let sched = AdjustmentSchedule::new(2.0, 2.0, &prior)?;
    let taus: Vec<f64> = (0..5).map(|y| sched.tau_of(y)).collect();
    println!("tau(y)  {}", fmt(&taus));

    // A teacher that leans toward the head classes.
    let batch: Vec<Vec<f64>> = [[0.2, -0.1, 0.0, 0.3, -0.2], [0.0, 0.4, -0.3, 0.1, 0.2], [-0.2, 0.0, 0.5, 0.0, 0.3]]
        .iter()
        .map(|n| shift_by_log_prior(n, &prior, 1.5))
        .collect();
    let raw: Vec<Vec<f64>> = batch.iter().map(|z| softmax(z)).collect();
    let transformed: Vec<Vec<f64>> = batch
        .iter()
        .map(|z| {
            let y = argmax(&shift_by_log_prior(z, &prior, -1.0));
            transform_teacher_logits(z, y, &prior, &sched)
        })
        .collect();
    for (r, t) in raw.iter().zip(&transformed) {
        println!("raw {}  ->  transformed {}", fmt(r), fmt(t));
    }
    println!(
        "balancedness raw {:.4}, transformed {:.4}",
        balancedness(&raw)?,
        balancedness(&transformed)?
    );

    let z = &batch[0];
    println!(
        "label 4: CE {:.4}, DA-CE {:.4} (the rare class needs a larger margin)",
        ce_loss(4, z),
        da_ce_loss(4, z, &prior, 1.0)
    );
    Ok(())
}
