//! Out-of-distribution detection with maximum softmax probability as the
//! score: in-distribution test points are positives, near and far OOD
//! samples negatives. Also scores misclassification detection, where the
//! positives are the model's own correct predictions.
//!
//! Run with `cargo run --example ood_detection`.

use mte_lab::data::{make_ood_splits, make_gaussian_mixture, train_val_test_split, MixtureSpec};
use mte_lab::metrics::detection_metrics;
use mte_lab::trainer::{predict, train_single, Method, PredictMode, TrainConfig};
use ndarray::Array2;

fn main() -> mte_lab::Result<()> {
    let mut spec = MixtureSpec::default_overlapping(13);
    spec.samples_per_class = 1000;
    let full = make_gaussian_mixture(&spec)?;
    let (train, val, _) = train_val_test_split(&full, [0.8, 0.2, 0.0], 5)?;

    let mut cfg = TrainConfig::standard(Method::Ce, train.dim(), train.n_classes, 13);
    cfg.epochs = 30;
    let (ckpt, _) = train_single(&cfg, &train, &val)?;

    let mut ood_spec = spec.clone();
    ood_spec.samples_per_class = 400;
    let splits = make_ood_splits(&ood_spec, 99)?;

    let conf = |x: &Array2<f64>| -> mte_lab::Result<Vec<f64>> {
        let pred = predict(std::slice::from_ref(&ckpt), x, &PredictMode::PrimaryOnly)?;
        Ok(pred.probs.confidence())
    };
    let in_conf = conf(&splits.in_dist.features)?;
    let near_conf = conf(&splits.near)?;
    let far_conf = conf(&splits.far)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean max-softmax confidence");
    println!("  in-distribution: {:.4}", mean(&in_conf));
    println!("  near OOD:        {:.4}", mean(&near_conf));
    println!("  far OOD:         {:.4}", mean(&far_conf));

    println!(
        "\n{:<18} {:>8} {:>8} {:>9} {:>8}",
        "task", "auroc", "aupr", "fpr@95", "d-error"
    );
    for (name, neg) in [("near-ood", &near_conf), ("far-ood", &far_conf)] {
        let r = detection_metrics(&in_conf, neg)?;
        println!(
            "{name:<18} {:>8.4} {:>8.4} {:>9.4} {:>8.4}",
            r.auroc, r.aupr, r.fpr95, r.d_error
        );
    }

    // Misclassification detection on the in-distribution split itself.
    let pred = predict(
        std::slice::from_ref(&ckpt),
        &splits.in_dist.features,
        &PredictMode::PrimaryOnly,
    )?;
    let classes = pred.probs.predicted_class();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, c) in in_conf.iter().enumerate() {
        if classes[i] == splits.in_dist.labels[i] {
            pos.push(*c);
        } else {
            neg.push(*c);
        }
    }
    let r = detection_metrics(&pos, &neg)?;
    println!(
        "{:<18} {:>8.4} {:>8.4} {:>9.4} {:>8.4}",
        "misclassification", r.auroc, r.aupr, r.fpr95, r.d_error
    );
    Ok(())
}
