//! Compares three ways to spend extra models: a deep ensemble averaged at
//! test time, mutual learning between two peers, and co-training where the
//! auxiliary is dropped at deployment. Reports the inference cost of each
//! as the number of forward passes per batch.
//!
//! Run with `cargo run --example ensembles`.

use mte_lab::data::{make_gaussian_mixture, train_val_test_split, MixtureSpec};
use mte_lab::losses::LabelBatch;
use mte_lab::metrics::{accuracy, ece};
use mte_lab::trainer::{
    mte_ensemble_weights, predict, train_deep_ensemble, train_dml, train_mte, Method, PredictMode,
    TrainConfig,
};

fn main() -> mte_lab::Result<()> {
    let mut spec = MixtureSpec::default_overlapping(47);
    spec.samples_per_class = 1000;
    let full = make_gaussian_mixture(&spec)?;
    let (train, val, test) = train_val_test_split(&full, [0.6, 0.2, 0.2], 29)?;
    let labels = LabelBatch::new(test.labels.clone(), test.n_classes)?;

    println!(
        "{:<26} {:>9} {:>8} {:>13}",
        "method", "accuracy", "ece", "evals/batch"
    );
    let show = |name: &str, ckpts: &[mte_lab::nn::ModelCheckpoint], mode: &PredictMode| -> mte_lab::Result<()> {
        let pred = predict(ckpts, &test.features, mode)?;
        let acc = accuracy(&pred.probs, &labels);
        let (e, _) = ece(&pred.probs, &labels, 15)?;
        println!("{name:<26} {acc:>9.4} {e:>8.4} {:>13}", pred.model_evals);
        Ok(())
    };

    // Deep ensemble: three independent trainings, averaged predictions.
    let mut cfg = TrainConfig::standard(Method::De, train.dim(), train.n_classes, 47);
    cfg.epochs = 25;
    cfg.n_aux = 3;
    let (members, _) = train_deep_ensemble(&cfg, &train, &val)?;
    show("deep ensemble (3 members)", &members, &PredictMode::Ensemble(None))?;
    show("  single member", &members[..1], &PredictMode::PrimaryOnly)?;

    // Mutual learning: two peers exchange KL terms during training, and
    // either one can be deployed alone.
    let mut cfg = TrainConfig::standard(Method::Dml, train.dim(), train.n_classes, 47);
    cfg.epochs = 25;
    let (peer_a, _peer_b, _) = train_dml(&cfg, &train, &val)?;
    show("mutual learning, peer 0", &[peer_a], &PredictMode::PrimaryOnly)?;

    // Co-training: the auxiliary shapes the primary during training. At
    // test time the primary runs alone, or blends with the auxiliary
    // through the beta-weighted mixture.
    let mut cfg = TrainConfig::standard(Method::Mte, train.dim(), train.n_classes, 47);
    cfg.epochs = 25;
    let (primary, auxes, _) = train_mte(&cfg, &train, &val)?;
    let mut stack = vec![primary];
    stack.extend(auxes);
    show("co-trained, primary only", &stack[..1], &PredictMode::PrimaryOnly)?;
    let weights = mte_ensemble_weights(0.3, stack.len() - 1)?;
    show(
        "co-trained, beta 0.3 blend",
        &stack,
        &PredictMode::Ensemble(Some(weights)),
    )?;
    Ok(())
}
