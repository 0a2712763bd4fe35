//! Prints an ASCII reliability diagram for a quickly trained classifier:
//! per confidence bin, the sample count, mean confidence, empirical
//! accuracy, and the gap that the expected calibration error averages.
//!
//! Run with `cargo run --example reliability_diagram`.

use mte_lab::data::{make_gaussian_mixture, train_val_test_split, MixtureSpec};
use mte_lab::losses::LabelBatch;
use mte_lab::metrics::reliability_diagram;
use mte_lab::trainer::{predict, train_single, Method, PredictMode, TrainConfig};

fn main() -> mte_lab::Result<()> {
    let mut spec = MixtureSpec::default_overlapping(21);
    spec.samples_per_class = 1000;
    let full = make_gaussian_mixture(&spec)?;
    let (train, val, test) = train_val_test_split(&full, [0.6, 0.2, 0.2], 3)?;

    let mut cfg = TrainConfig::standard(Method::Ce, train.dim(), train.n_classes, 21);
    cfg.epochs = 30;
    let (ckpt, _) = train_single(&cfg, &train, &val)?;
    let pred = predict(&[ckpt], &test.features, &PredictMode::PrimaryOnly)?;
    let labels = LabelBatch::new(test.labels.clone(), test.n_classes)?;

    let m = 15;
    let stats = reliability_diagram(&pred.probs, &labels, m)?;
    println!("reliability diagram over {} test points, {m} bins", stats.n);
    println!(
        "{:>14} {:>7} {:>10} {:>9} {:>8}",
        "bin", "count", "mean conf", "accuracy", "gap"
    );
    for (b, bin) in stats.bins.iter().enumerate() {
        let lo = b as f64 / m as f64;
        let hi = (b + 1) as f64 / m as f64;
        if bin.count == 0 {
            println!("({lo:.3}, {hi:.3}] {:>7} {:>10} {:>9} {:>8}", 0, "-", "-", "-");
            continue;
        }
        let gap = bin.gap();
        let bar = "#".repeat((gap * 100.0).round() as usize);
        println!(
            "({lo:.3}, {hi:.3}] {:>7} {:>10.4} {:>9.4} {:>8.4}  {bar}",
            bin.count, bin.mean_confidence, bin.accuracy, gap
        );
    }
    println!("\nexpected calibration error: {:.4}", stats.ece());
    println!("(count-weighted mean of the gap column, same bins as above)");
    Ok(())
}
