//! Calibration under covariate shift: corrupts the test features at five
//! increasing severities and tracks accuracy and expected calibration
//! error for a plain cross-entropy model against a co-trained one.
//!
//! Run with `cargo run --example corruption_sweep`.

use mte_lab::data::{
    corrupt, make_gaussian_mixture, train_val_test_split, CorruptionKind, CorruptionSpec,
    MixtureSpec,
};
use mte_lab::losses::LabelBatch;
use mte_lab::metrics::{accuracy, ece};
use mte_lab::nn::ModelCheckpoint;
use mte_lab::trainer::{predict, train_mte, train_single, Method, PredictMode, TrainConfig};

fn main() -> mte_lab::Result<()> {
    let mut spec = MixtureSpec::default_overlapping(31);
    spec.samples_per_class = 1200;
    let full = make_gaussian_mixture(&spec)?;
    let (train, val, test) = train_val_test_split(&full, [0.6, 0.2, 0.2], 17)?;
    let labels = LabelBatch::new(test.labels.clone(), test.n_classes)?;

    let mut models: Vec<(String, ModelCheckpoint)> = Vec::new();
    for method in [Method::Ce, Method::Mte] {
        let mut cfg = TrainConfig::standard(method.clone(), train.dim(), train.n_classes, 31);
        cfg.epochs = 30;
        let ckpt = match method {
            Method::Mte => train_mte(&cfg, &train, &val)?.0,
            _ => train_single(&cfg, &train, &val)?.0,
        };
        models.push((format!("{method:?}").to_lowercase(), ckpt));
    }

    let kind = CorruptionKind::GaussianNoise;
    println!("gaussian noise sweep, noise scaled to the feature spread\n");
    println!(
        "{:>8}  {:>12} {:>9}  {:>12} {:>9}",
        "severity", "ce accuracy", "ce ece", "mte accuracy", "mte ece"
    );
    for severity in 0..=5u8 {
        let shifted = if severity == 0 {
            test.clone()
        } else {
            corrupt(&test, &CorruptionSpec { kind, severity }, 1000 + severity as u64)?
        };
        let mut cells = Vec::new();
        for (_, ckpt) in &models {
            let pred = predict(std::slice::from_ref(ckpt), &shifted.features, &PredictMode::PrimaryOnly)?;
            let acc = accuracy(&pred.probs, &labels);
            let (e, _) = ece(&pred.probs, &labels, 15)?;
            cells.push((acc, e));
        }
        let tag = if severity == 0 { "clean".into() } else { severity.to_string() };
        println!(
            "{tag:>8}  {:>12.4} {:>9.4}  {:>12.4} {:>9.4}",
            cells[0].0, cells[0].1, cells[1].0, cells[1].1
        );
    }
    println!("\nAccuracy degrades for both; the calibration gap widens much\nfaster for the plain model as the inputs drift.");
    Ok(())
}
