//! Confusion matrix, per-class recall, minority accuracy, GM and per-group
//! pseudo-label quality on a hand-made prediction set.
//!
//! cargo run --example metrics_report

use tras::metrics::{accuracy_suite, confusion_matrix, geometric_mean, pseudo_label_quality, ClassGrouping, DEFAULT_GM_FLOOR};

fn main() -> tras::Result<()> {
    let truth = [0, 0, 0, 0, 1, 1, 1, 2, 2, 3];
    let pred = [0, 0, 0, 1, 1, 1, 0, 0, 2, 0];
    let mask = [true, true, false, true, true, true, true, true, false, true];
    let grouping = ClassGrouping {
        head: vec![0],
        torso: vec![1, 2],
        tail: vec![3],
        minority: vec![2, 3],
    };

    let conf = confusion_matrix(&truth, &pred, 4)?;
    print!("confusion (rows = true)\n{}", conf.to_csv());
    let acc = accuracy_suite(&conf, &grouping);
    println!("overall {:.1}%", 100.0 * acc.overall);
    println!("per-class recall {:?}", acc.per_class_recall);
    println!("minority accuracy {:.1}%", 100.0 * acc.minority_accuracy);
    println!("GM {:.4} (recall floor {DEFAULT_GM_FLOOR})", geometric_mean(&acc.per_class_recall, DEFAULT_GM_FLOOR));

    let q = pseudo_label_quality(&truth, &pred, &mask, &grouping)?;
    for (name, g) in [("head", q.head), ("torso", q.torso), ("tail", q.tail)] {
        let p = if g.precision_defined { format!("{:.2}", g.precision) } else { "n/a".into() };
        println!("{name:<5} precision {p:>4}  recall {:.2}", g.recall);
    }
    Ok(())
}
