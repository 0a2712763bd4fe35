//! Shows that checkpoints and training are fully deterministic: the same
//! config reproduces parameters bit for bit, and a checkpoint survives a
//! save/load round trip exactly, including through the training history
//! CSV written next to it.
//!
//! Run with `cargo run --example checkpoint_roundtrip`.

use mte_lab::data::{make_gaussian_mixture, train_val_test_split, MixtureSpec};
use mte_lab::nn::{load_checkpoint, save_checkpoint};
use mte_lab::trainer::{save_history_csv, train_single, Method, TrainConfig};

fn main() -> mte_lab::Result<()> {
    let spec = MixtureSpec {
        n_classes: 2,
        dim: 2,
        means: vec![vec![-1.5, 0.0], vec![1.5, 0.0]],
        covariance_scale: vec![1.0, 1.0],
        samples_per_class: 300,
        label_noise_rate: 0.0,
        seed: 8,
    };
    let full = make_gaussian_mixture(&spec)?;
    let (train, val, _) = train_val_test_split(&full, [0.8, 0.2, 0.0], 2)?;

    let mut cfg = TrainConfig::standard(Method::Ce, train.dim(), train.n_classes, 8);
    cfg.epochs = 10;

    let (first, history) = train_single(&cfg, &train, &val)?;
    let (second, _) = train_single(&cfg, &train, &val)?;
    println!(
        "two trainings, same config: parameters identical = {}",
        first.params == second.params
    );

    let dir = std::env::temp_dir().join("mte-lab-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let ckpt_path = dir.join("model.json");
    save_checkpoint(&first, &ckpt_path)?;
    let loaded = load_checkpoint(&ckpt_path)?;
    println!(
        "save/load round trip: checkpoint identical = {}",
        loaded == first
    );
    println!(
        "  {} parameters, stopped after epoch {}",
        loaded.params.len(),
        loaded.train_meta.epoch
    );

    let csv_path = dir.join("history.csv");
    save_history_csv(&history, &csv_path)?;
    let text = std::fs::read_to_string(&csv_path)?;
    println!("\ntraining history ({}):", csv_path.display());
    for line in text.lines().take(4) {
        println!("  {line}");
    }
    println!("  ... {} epochs total", history.records.len());
    Ok(())
}
