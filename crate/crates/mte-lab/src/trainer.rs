//! Training loops: co-trained primary/auxiliary pairs, single-model
//! baselines, mutual learning, and deep ensembles, plus inference over the
//! resulting checkpoints.
//!
//! Every loop is a deterministic function of `(config, seed)`: mini-batch
//! order comes from a ChaCha8 stream seeded only by the config seed, so two
//! methods sharing a seed see identical batches in identical order.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::autodiff::Tape;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{
    baseline_loss_node, dml_loss_node, ensemble_probs, mte_auxiliary_loss_node,
    mte_primary_loss_node, BaselineLossSpec, LabelBatch, ProbBatch,
};
use crate::metrics::{accuracy, ece};
use crate::nn::{
    build_forward, forward_logits, init_params, LrSchedule, ModelCheckpoint, ModelSpec, OptState,
};

/// Number of calibration bins used for the per-epoch validation ECE.
const HISTORY_ECE_BINS: usize = 15;

/// Which objective drives a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Method {
    Ce,
    Baseline { loss: BaselineLossSpec },
    Mte,
    Dml,
    De,
}

/// Whether auxiliaries learn from the primary's parameters after or before
/// the primary's own step on the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxUpdate {
    PostPrimary,
    SameSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// Weight of the KL regularizer (co-training and mutual learning).
    pub alpha: f64,
    /// Auxiliary count for co-training, or member count for ensembles.
    pub n_aux: usize,
    pub primary_spec: ModelSpec,
    pub aux_spec: Option<ModelSpec>,
    pub epochs: usize,
    pub batch_size: usize,
    pub primary_schedule: LrSchedule,
    pub aux_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub aux_update: AuxUpdate,
}

impl TrainConfig {
    /// Standard recipe: SGD momentum 0.9, weight decay 5e-4, primary rate
    /// 0.1 halved every 10 epochs after a 30-epoch warm period, constant
    /// auxiliary rate at one tenth of the primary's initial rate.
    pub fn standard(method: Method, input_dim: usize, n_classes: usize, seed: u64) -> Self {
        Self {
            method,
            alpha: 0.8,
            n_aux: 1,
            primary_spec: ModelSpec::new(vec![input_dim, 128, 128, n_classes], seed ^ 0x706d),
            aux_spec: Some(ModelSpec::new(vec![input_dim, 64, n_classes], seed ^ 0x6178)),
            epochs: 60,
            batch_size: 100,
            primary_schedule: LrSchedule {
                initial: 0.1,
                warm_epochs: 30,
                decay_interval: 10,
                decay_factor: 0.5,
            },
            aux_schedule: LrSchedule::constant(0.01),
            momentum: 0.9,
            weight_decay: 5e-4,
            seed,
            aux_update: AuxUpdate::PostPrimary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.primary_spec.validate()?;
        if let Some(aux) = &self.aux_spec {
            aux.validate()?;
            if aux.input_dim() != self.primary_spec.input_dim()
                || aux.n_classes() != self.primary_spec.n_classes()
            {
                return Err(Error::InvalidSpec(
                    "primary and auxiliary specs must share input dim and class count".into(),
                ));
            }
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidSpec(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch size must be positive".into()));
        }
        if self.n_aux == 0 {
            return Err(Error::InvalidSpec("n_aux must be at least 1".into()));
        }
        match self.method {
            Method::Mte | Method::Dml => {
                if self.aux_spec.is_none() {
                    return Err(Error::InvalidSpec(
                        "co-training and mutual learning require an auxiliary spec".into(),
                    ));
                }
            }
            Method::De => {
                if self.n_aux < 2 {
                    return Err(Error::InvalidSpec(
                        "a deep ensemble needs at least 2 members".into(),
                    ));
                }
            }
            Method::Ce => {}
            Method::Baseline { ref loss } => loss.validate()?,
        }
        Ok(())
    }
}

/// Per-model loss averages for one epoch. A `None` component means the
/// objective structurally lacks that term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossDecomposition {
    pub total: f64,
    pub ce: Option<f64>,
    pub kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub primary_loss: LossDecomposition,
    /// Mean auxiliary (or peer) objective, when the method has one.
    pub aux_loss: Option<LossDecomposition>,
    pub val_accuracy: f64,
    pub val_ece: f64,
    /// Wall-clock seconds; informational only and excluded from reports.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.val_accuracy)
    }
}

/// Writes the per-epoch history as `epoch,total,ce,kl,aux,val_acc,val_ece`.
pub fn save_history_csv(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,total_loss,ce_loss,kl_loss,aux_loss,val_acc,val_ece")?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for r in &history.records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.primary_loss.total,
            fmt(r.primary_loss.ce),
            fmt(r.primary_loss.kl),
            fmt(r.aux_loss.map(|a| a.total)),
            r.val_accuracy,
            r.val_ece
        )?;
    }
    Ok(())
}

fn check_datasets(cfg: &TrainConfig, train: &LabeledDataset, val: &LabeledDataset) -> Result<()> {
    cfg.validate()?;
    train.validate()?;
    val.validate()?;
    if train.dim() != cfg.primary_spec.input_dim()
        || train.n_classes != cfg.primary_spec.n_classes()
    {
        return Err(Error::InvalidSpec(
            "dataset shape does not match the model spec".into(),
        ));
    }
    if !val.is_empty() && (val.dim() != train.dim() || val.n_classes != train.n_classes) {
        return Err(Error::InvalidSpec(
            "train and validation sets must share shape and classes".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::InvalidSpec("training set is empty".into()));
    }
    Ok(())
}

/// Deterministic epoch batching: one shuffle of the index list per epoch,
/// then consecutive chunks (the final short chunk included).
struct Batcher {
    rng: ChaCha8Rng,
    indices: Vec<usize>,
    batch_size: usize,
}

impl Batcher {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            indices: (0..n).collect(),
            batch_size,
        }
    }

    fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        self.indices.shuffle(&mut self.rng);
        self.indices
            .chunks(self.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }
}

fn gather_batch(ds: &LabeledDataset, idx: &[usize]) -> (Array2<f64>, LabelBatch) {
    let mut features = Array2::zeros((idx.len(), ds.dim()));
    let mut labels = Vec::with_capacity(idx.len());
    for (r, i) in idx.iter().enumerate() {
        features.row_mut(r).assign(&ds.features.row(*i));
        labels.push(ds.labels[*i]);
    }
    (features, LabelBatch::new(labels, ds.n_classes).unwrap(), )
}

fn validation_stats(ckpt: &ModelCheckpoint, val: &LabeledDataset) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let logits = forward_logits(ckpt, &val.features)?;
    let probs = ProbBatch::from_logits(&logits);
    let labels = LabelBatch::new(val.labels.clone(), val.n_classes)?;
    let acc = accuracy(&probs, &labels);
    let (e, _) = ece(&probs, &labels, HISTORY_ECE_BINS)?;
    Ok((acc, e))
}

fn ensure_finite(loss: f64, epoch: usize, batch: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            batch,
            detail: format!("{what} loss became {loss}"),
        })
    }
}

/// Running mean of a loss decomposition over an epoch, weighted by batch
/// size.
#[derive(Default)]
struct LossAccum {
    total: f64,
    ce: f64,
    kl: f64,
    has_ce: bool,
    has_kl: bool,
    n: usize,
}

impl LossAccum {
    fn add(&mut self, weight: usize, total: f64, ce: Option<f64>, kl: Option<f64>) {
        let w = weight as f64;
        self.total += w * total;
        if let Some(c) = ce {
            self.ce += w * c;
            self.has_ce = true;
        }
        if let Some(k) = kl {
            self.kl += w * k;
            self.has_kl = true;
        }
        self.n += weight;
    }

    fn finish(&self) -> LossDecomposition {
        let n = self.n.max(1) as f64;
        LossDecomposition {
            total: self.total / n,
            ce: self.has_ce.then_some(self.ce / n),
            kl: self.has_kl.then_some(self.kl / n),
        }
    }
}

/// Standard SGD training of a single model on a cross-entropy-family loss.
pub fn train_single(
    cfg: &TrainConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    check_datasets(cfg, train, val)?;
    let loss_spec = match &cfg.method {
        Method::Ce => BaselineLossSpec::Ce,
        Method::Baseline { loss } => loss.clone(),
        other => {
            return Err(Error::InvalidArgument(format!(
                "train_single expects a single-model method, got {other:?}"
            )))
        }
    };
    let mut ckpt = init_params(&cfg.primary_spec)?;
    let mut opt = OptState::new(ckpt.params.len(), 0.0, cfg.momentum, cfg.weight_decay);
    let mut batcher = Batcher::new(train.len(), cfg.batch_size, cfg.seed);
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        opt.lr = cfg.primary_schedule.lr_at_epoch(epoch);
        let mut accum = LossAccum::default();
        for (bi, idx) in batcher.epoch_batches().into_iter().enumerate() {
            let (features, labels) = gather_batch(train, &idx);
            let mut tape = Tape::new();
            let x = tape.constant(features)?;
            let model = build_forward(&mut tape, &ckpt, x, true)?;
            let loss = baseline_loss_node(&mut tape, &loss_spec, model.log_probs, &labels)?;
            let loss_val = tape.scalar(loss);
            ensure_finite(loss_val, epoch, bi, "training")?;
            let grads = tape.backward(loss)?;
            let flat = model.flat_grads(&cfg.primary_spec, &grads);
            sgd_step_or_diverge(&mut ckpt.params, &flat, &mut opt, epoch, bi)?;
            let ce = matches!(loss_spec, BaselineLossSpec::Ce).then_some(loss_val);
            accum.add(idx.len(), loss_val, ce, None);
        }
        let (val_acc, val_ece) = validation_stats(&ckpt, val)?;
        ckpt.train_meta.epoch = epoch + 1;
        history.records.push(EpochRecord {
            epoch,
            primary_loss: accum.finish(),
            aux_loss: None,
            val_accuracy: val_acc,
            val_ece,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok((ckpt, history))
}

fn sgd_step_or_diverge(
    params: &mut [f64],
    grads: &[f64],
    opt: &mut OptState,
    epoch: usize,
    batch: usize,
) -> Result<()> {
    crate::nn::sgd_step(params, grads, opt).map_err(|e| match e {
        Error::InvalidArgument(detail) => Error::Divergence {
            epoch,
            batch,
            detail,
        },
        other => other,
    })
}

/// Co-training: per batch the primary takes one step on its regularized
/// objective with auxiliary outputs held fixed, then each auxiliary takes
/// one step toward the primary's (by default freshly updated) predictions.
pub fn train_mte(
    cfg: &TrainConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<(ModelCheckpoint, Vec<ModelCheckpoint>, TrainHistory)> {
    check_datasets(cfg, train, val)?;
    if cfg.method != Method::Mte {
        return Err(Error::InvalidArgument(format!(
            "train_mte expects the co-training method, got {:?}",
            cfg.method
        )));
    }
    let aux_base = cfg.aux_spec.clone().unwrap();
    let mut primary = init_params(&cfg.primary_spec)?;
    let mut auxiliaries: Vec<ModelCheckpoint> = (0..cfg.n_aux)
        .map(|i| {
            let mut spec = aux_base.clone();
            spec.init_seed = aux_base.init_seed.wrapping_add(i as u64);
            init_params(&spec)
        })
        .collect::<Result<_>>()?;
    let mut popt = OptState::new(primary.params.len(), 0.0, cfg.momentum, cfg.weight_decay);
    let mut aopts: Vec<OptState> = auxiliaries
        .iter()
        .map(|a| OptState::new(a.params.len(), 0.0, cfg.momentum, cfg.weight_decay))
        .collect();
    let mut batcher = Batcher::new(train.len(), cfg.batch_size, cfg.seed);
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        popt.lr = cfg.primary_schedule.lr_at_epoch(epoch);
        let aux_lr = cfg.aux_schedule.lr_at_epoch(epoch);
        for o in aopts.iter_mut() {
            o.lr = aux_lr;
        }
        let mut paccum = LossAccum::default();
        let mut aaccum = LossAccum::default();
        for (bi, idx) in batcher.epoch_batches().into_iter().enumerate() {
            let (features, labels) = gather_batch(train, &idx);

            let snapshot = match cfg.aux_update {
                AuxUpdate::SameSnapshot => Some(primary.clone()),
                AuxUpdate::PostPrimary => None,
            };

            let mut tape = Tape::new();
            let x = tape.constant(features.clone())?;
            let pmodel = build_forward(&mut tape, &primary, x, true)?;
            let aux_logps = auxiliaries
                .iter()
                .map(|a| Ok(build_forward(&mut tape, a, x, false)?.log_probs))
                .collect::<Result<Vec<_>>>()?;
            let loss =
                mte_primary_loss_node(&mut tape, pmodel.log_probs, &aux_logps, &labels, cfg.alpha)?;
            let total = tape.scalar(loss.total);
            ensure_finite(total, epoch, bi, "primary")?;
            let ce = tape.scalar(loss.ce);
            let kl = loss.kl.map(|k| tape.scalar(k));
            let grads = tape.backward(loss.total)?;
            let flat = pmodel.flat_grads(&cfg.primary_spec, &grads);
            sgd_step_or_diverge(&mut primary.params, &flat, &mut popt, epoch, bi)?;
            paccum.add(idx.len(), total, Some(ce), kl);

            let teacher = snapshot.as_ref().unwrap_or(&primary);
            for (aux, opt) in auxiliaries.iter_mut().zip(aopts.iter_mut()) {
                let mut tape = Tape::new();
                let x = tape.constant(features.clone())?;
                let f_logp = build_forward(&mut tape, teacher, x, false)?.log_probs;
                let amodel = build_forward(&mut tape, aux, x, true)?;
                let aloss = mte_auxiliary_loss_node(&mut tape, f_logp, amodel.log_probs)?;
                let aval = tape.scalar(aloss);
                ensure_finite(aval, epoch, bi, "auxiliary")?;
                let grads = tape.backward(aloss)?;
                let flat = amodel.flat_grads(&aux.spec, &grads);
                sgd_step_or_diverge(&mut aux.params, &flat, opt, epoch, bi)?;
                aaccum.add(idx.len(), aval, None, Some(aval));
            }
        }
        let (val_acc, val_ece) = validation_stats(&primary, val)?;
        primary.train_meta.epoch = epoch + 1;
        for a in auxiliaries.iter_mut() {
            a.train_meta.epoch = epoch + 1;
        }
        history.records.push(EpochRecord {
            epoch,
            primary_loss: paccum.finish(),
            aux_loss: Some(aaccum.finish()),
            val_accuracy: val_acc,
            val_ece,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok((primary, auxiliaries, history))
}

/// Mutual learning: both peers carry a cross-entropy term plus a KL pull
/// toward the other's predictions; updates alternate within each batch.
pub fn train_dml(
    cfg: &TrainConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<(ModelCheckpoint, ModelCheckpoint, TrainHistory)> {
    check_datasets(cfg, train, val)?;
    if cfg.method != Method::Dml {
        return Err(Error::InvalidArgument(format!(
            "train_dml expects the mutual-learning method, got {:?}",
            cfg.method
        )));
    }
    let peer_spec = cfg.aux_spec.clone().unwrap();
    let mut model_a = init_params(&cfg.primary_spec)?;
    let mut model_b = init_params(&peer_spec)?;
    let mut opt_a = OptState::new(model_a.params.len(), 0.0, cfg.momentum, cfg.weight_decay);
    let mut opt_b = OptState::new(model_b.params.len(), 0.0, cfg.momentum, cfg.weight_decay);
    let mut batcher = Batcher::new(train.len(), cfg.batch_size, cfg.seed);
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        opt_a.lr = cfg.primary_schedule.lr_at_epoch(epoch);
        opt_b.lr = cfg.aux_schedule.lr_at_epoch(epoch);
        let mut accum_a = LossAccum::default();
        let mut accum_b = LossAccum::default();
        for (bi, idx) in batcher.epoch_batches().into_iter().enumerate() {
            let (features, labels) = gather_batch(train, &idx);
            let step = |own: &mut ModelCheckpoint,
                            peer: &ModelCheckpoint,
                            opt: &mut OptState,
                            accum: &mut LossAccum|
             -> Result<()> {
                let mut tape = Tape::new();
                let x = tape.constant(features.clone())?;
                let own_model = build_forward(&mut tape, own, x, true)?;
                let peer_logp = build_forward(&mut tape, peer, x, false)?.log_probs;
                let loss = dml_loss_node(
                    &mut tape,
                    own_model.log_probs,
                    peer_logp,
                    &labels,
                    cfg.alpha,
                )?;
                let total = tape.scalar(loss.total);
                ensure_finite(total, epoch, bi, "mutual-learning")?;
                let ce = tape.scalar(loss.ce);
                let kl = loss.kl.map(|k| tape.scalar(k));
                let grads = tape.backward(loss.total)?;
                let flat = own_model.flat_grads(&own.spec, &grads);
                sgd_step_or_diverge(&mut own.params, &flat, opt, epoch, bi)?;
                accum.add(idx.len(), total, Some(ce), kl);
                Ok(())
            };
            step(&mut model_a, &model_b.clone(), &mut opt_a, &mut accum_a)?;
            step(&mut model_b, &model_a.clone(), &mut opt_b, &mut accum_b)?;
        }
        let (val_acc, val_ece) = validation_stats(&model_a, val)?;
        model_a.train_meta.epoch = epoch + 1;
        model_b.train_meta.epoch = epoch + 1;
        history.records.push(EpochRecord {
            epoch,
            primary_loss: accum_a.finish(),
            aux_loss: Some(accum_b.finish()),
            val_accuracy: val_acc,
            val_ece,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok((model_a, model_b, history))
}

/// Independent cross-entropy trainings with member seeds `seed + i`.
pub fn train_deep_ensemble(
    cfg: &TrainConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<(Vec<ModelCheckpoint>, Vec<TrainHistory>)> {
    check_datasets(cfg, train, val)?;
    if cfg.method != Method::De {
        return Err(Error::InvalidArgument(format!(
            "train_deep_ensemble expects the ensemble method, got {:?}",
            cfg.method
        )));
    }
    let mut ckpts = Vec::with_capacity(cfg.n_aux);
    let mut histories = Vec::with_capacity(cfg.n_aux);
    for i in 0..cfg.n_aux {
        let mut member_cfg = cfg.clone();
        member_cfg.method = Method::Ce;
        member_cfg.seed = cfg.seed.wrapping_add(i as u64);
        member_cfg.primary_spec.init_seed = cfg.primary_spec.init_seed.wrapping_add(i as u64);
        let (ckpt, history) = train_single(&member_cfg, train, val)?;
        ckpts.push(ckpt);
        histories.push(history);
    }
    Ok((ckpts, histories))
}

/// How `predict` combines checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictMode {
    /// Evaluate only the first checkpoint; the co-training deployment mode.
    PrimaryOnly,
    /// Weighted softmax mixture over all checkpoints; `None` is uniform.
    Ensemble(Option<Vec<f64>>),
}

/// Mixture weights realizing `h = (1 - beta) * f + beta * mean_i g_i` for a
/// primary followed by `n_aux` auxiliaries.
pub fn mte_ensemble_weights(beta: f64, n_aux: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!(
            "beta must lie in [0, 1], got {beta}"
        )));
    }
    if n_aux == 0 {
        return Err(Error::InvalidArgument("need at least one auxiliary".into()));
    }
    let mut w = vec![beta / n_aux as f64; n_aux + 1];
    w[0] = 1.0 - beta;
    Ok(w)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: ProbBatch,
    /// Number of model forward passes performed; the inference-cost
    /// instrument.
    pub model_evals: usize,
}

/// Runs inference over one or more checkpoints.
pub fn predict(
    ckpts: &[ModelCheckpoint],
    batch: &Array2<f64>,
    mode: &PredictMode,
) -> Result<Prediction> {
    if ckpts.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints given".into()));
    }
    let eval = |ckpt: &ModelCheckpoint| -> Result<ProbBatch> {
        Ok(ProbBatch::from_logits(&forward_logits(ckpt, batch)?))
    };
    match mode {
        PredictMode::PrimaryOnly => Ok(Prediction {
            probs: eval(&ckpts[0])?,
            model_evals: 1,
        }),
        PredictMode::Ensemble(weights) => {
            let weights = match weights {
                Some(w) => {
                    if w.len() != ckpts.len() {
                        return Err(Error::InvalidArgument(format!(
                            "{} weights for {} checkpoints",
                            w.len(),
                            ckpts.len()
                        )));
                    }
                    w.clone()
                }
                None => vec![1.0 / ckpts.len() as f64; ckpts.len()],
            };
            let total: f64 = weights.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "ensemble weights sum to {total}, expected 1"
                )));
            }
            // A one-hot weight vector degenerates to that single member;
            // return its output verbatim so the mixture is exact.
            if let Some(only) = weights.iter().position(|w| *w == 1.0) {
                if weights.iter().all(|w| *w == 0.0 || *w == 1.0) {
                    return Ok(Prediction {
                        probs: eval(&ckpts[only])?,
                        model_evals: 1,
                    });
                }
            }
            let members = ckpts.iter().map(eval).collect::<Result<Vec<_>>>()?;
            Ok(Prediction {
                model_evals: ckpts.len(),
                probs: ensemble_probs(&members, &weights)?,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_gaussian_mixture, train_val_test_split, MixtureSpec};

    fn blobs(seed: u64) -> (LabeledDataset, LabeledDataset) {
        let spec = MixtureSpec {
            n_classes: 2,
            dim: 2,
            means: vec![vec![-3.0, 0.0], vec![3.0, 0.0]],
            covariance_scale: vec![0.5, 0.5],
            samples_per_class: 200,
            label_noise_rate: 0.0,
            seed,
        };
        let ds = make_gaussian_mixture(&spec).unwrap();
        let (tr, val, _) = train_val_test_split(&ds, [0.8, 0.2, 0.0], seed).unwrap();
        (tr, val)
    }

    fn quick_cfg(method: Method, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::standard(method, 2, 2, seed);
        cfg.primary_spec = ModelSpec::new(vec![2, 16, 2], seed ^ 0x706d);
        cfg.aux_spec = Some(ModelSpec::new(vec![2, 8, 2], seed ^ 0x6178));
        cfg.epochs = 30;
        cfg.batch_size = 32;
        cfg.primary_schedule = LrSchedule {
            initial: 0.1,
            warm_epochs: 15,
            decay_interval: 5,
            decay_factor: 0.5,
        };
        cfg
    }

    fn eval_accuracy(ckpt: &ModelCheckpoint, ds: &LabeledDataset) -> f64 {
        let probs = ProbBatch::from_logits(&forward_logits(ckpt, &ds.features).unwrap());
        accuracy(
            &probs,
            &LabelBatch::new(ds.labels.clone(), ds.n_classes).unwrap(),
        )
    }

    #[test]
    fn single_ce_solves_separable_blobs() {
        let (tr, val) = blobs(5);
        let cfg = quick_cfg(Method::Ce, 5);
        let (ckpt, history) = train_single(&cfg, &tr, &val).unwrap();
        assert!(eval_accuracy(&ckpt, &val) >= 0.99);
        assert_eq!(history.records.len(), cfg.epochs);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (tr, val) = blobs(1);
        let mut cfg = quick_cfg(Method::Ce, 1);
        cfg.epochs = 0;
        let (ckpt, history) = train_single(&cfg, &tr, &val).unwrap();
        assert_eq!(ckpt.params, init_params(&cfg.primary_spec).unwrap().params);
        assert!(history.records.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, val) = blobs(2);
        let cfg = quick_cfg(Method::Ce, 2);
        let (a, ha) = train_single(&cfg, &tr, &val).unwrap();
        let (b, hb) = train_single(&cfg, &tr, &val).unwrap();
        assert_eq!(a.params, b.params);
        let strip = |h: TrainHistory| {
            h.records
                .into_iter()
                .map(|mut r| {
                    r.wall_time_s = 0.0;
                    r
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(ha), strip(hb));
    }

    #[test]
    fn mte_solves_separable_blobs() {
        let (tr, val) = blobs(6);
        let cfg = quick_cfg(Method::Mte, 6);
        let (primary, aux, _) = train_mte(&cfg, &tr, &val).unwrap();
        assert_eq!(aux.len(), 1);
        assert!(eval_accuracy(&primary, &val) >= 0.99);
    }

    #[test]
    fn mte_with_zero_alpha_matches_ce_bitwise() {
        let (tr, val) = blobs(3);
        let mut mte_cfg = quick_cfg(Method::Mte, 3);
        mte_cfg.alpha = 0.0;
        mte_cfg.epochs = 10;
        let mut ce_cfg = mte_cfg.clone();
        ce_cfg.method = Method::Ce;
        let (primary, _, _) = train_mte(&mte_cfg, &tr, &val).unwrap();
        let (ce, _) = train_single(&ce_cfg, &tr, &val).unwrap();
        let pb: Vec<u64> = primary.params.iter().map(|v| v.to_bits()).collect();
        let cb: Vec<u64> = ce.params.iter().map(|v| v.to_bits()).collect();
        assert_eq!(pb, cb);
    }

    #[test]
    fn mte_two_auxiliaries_two_checkpoints() {
        let (tr, val) = blobs(4);
        let mut cfg = quick_cfg(Method::Mte, 4);
        cfg.n_aux = 2;
        cfg.epochs = 3;
        let (_, aux, history) = train_mte(&cfg, &tr, &val).unwrap();
        assert_eq!(aux.len(), 2);
        assert_ne!(aux[0].params, aux[1].params);
        let rec = history.records.last().unwrap();
        assert!(rec.aux_loss.unwrap().ce.is_none());
        assert!(rec.aux_loss.unwrap().kl.is_some());
        assert!(rec.primary_loss.ce.is_some());
    }

    #[test]
    fn mte_same_snapshot_differs_from_post_primary() {
        let (tr, val) = blobs(9);
        let mut cfg = quick_cfg(Method::Mte, 9);
        cfg.epochs = 5;
        let (_, aux_post, _) = train_mte(&cfg, &tr, &val).unwrap();
        cfg.aux_update = AuxUpdate::SameSnapshot;
        let (_, aux_snap, _) = train_mte(&cfg, &tr, &val).unwrap();
        assert_ne!(aux_post[0].params, aux_snap[0].params);
    }

    #[test]
    fn dml_trains_both_models_with_ce_terms() {
        let (tr, val) = blobs(7);
        let mut cfg = quick_cfg(Method::Dml, 7);
        cfg.epochs = 30;
        let (a, b, history) = train_dml(&cfg, &tr, &val).unwrap();
        assert!(eval_accuracy(&a, &val) >= 0.99);
        assert!(eval_accuracy(&b, &val) >= 0.99);
        let rec = history.records.last().unwrap();
        assert!(rec.primary_loss.ce.is_some());
        assert!(rec.aux_loss.unwrap().ce.is_some());
    }

    #[test]
    fn dml_zero_alpha_matches_independent_ce_runs() {
        let (tr, val) = blobs(8);
        let mut cfg = quick_cfg(Method::Dml, 8);
        cfg.alpha = 0.0;
        cfg.epochs = 6;
        let (a, b, _) = train_dml(&cfg, &tr, &val).unwrap();

        let mut ce_a = cfg.clone();
        ce_a.method = Method::Ce;
        let (solo_a, _) = train_single(&ce_a, &tr, &val).unwrap();
        assert_eq!(a.params, solo_a.params);

        let mut ce_b = cfg.clone();
        ce_b.method = Method::Ce;
        ce_b.primary_spec = cfg.aux_spec.clone().unwrap();
        ce_b.primary_schedule = cfg.aux_schedule.clone();
        let (solo_b, _) = train_single(&ce_b, &tr, &val).unwrap();
        assert_eq!(b.params, solo_b.params);
    }

    #[test]
    fn deep_ensemble_members_differ_and_member_zero_matches_single() {
        let (tr, val) = blobs(10);
        let mut cfg = quick_cfg(Method::De, 10);
        cfg.n_aux = 3;
        cfg.epochs = 8;
        let (ckpts, histories) = train_deep_ensemble(&cfg, &tr, &val).unwrap();
        assert_eq!(ckpts.len(), 3);
        assert_eq!(histories.len(), 3);
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(ckpts[i].params, ckpts[j].params);
            }
        }
        let mut solo = cfg.clone();
        solo.method = Method::Ce;
        let (member0, _) = train_single(&solo, &tr, &val).unwrap();
        assert_eq!(ckpts[0].params, member0.params);

        let labels = LabelBatch::new(val.labels.clone(), val.n_classes).unwrap();
        let ens = predict(&ckpts, &val.features, &PredictMode::Ensemble(None)).unwrap();
        let best = ckpts
            .iter()
            .map(|c| eval_accuracy(c, &val))
            .fold(0.0f64, f64::max);
        assert!(accuracy(&ens.probs, &labels) >= best - 0.005);
    }

    #[test]
    fn predict_primary_only_is_one_forward() {
        let (tr, val) = blobs(11);
        let mut cfg = quick_cfg(Method::Mte, 11);
        cfg.n_aux = 3;
        cfg.epochs = 2;
        let (primary, aux, _) = train_mte(&cfg, &tr, &val).unwrap();
        let mut all = vec![primary];
        all.extend(aux);
        let pred = predict(&all, &val.features, &PredictMode::PrimaryOnly).unwrap();
        assert_eq!(pred.model_evals, 1);
    }

    #[test]
    fn ensemble_of_identical_checkpoints_is_the_member() {
        let (tr, val) = blobs(12);
        let mut cfg = quick_cfg(Method::Ce, 12);
        cfg.epochs = 3;
        let (ckpt, _) = train_single(&cfg, &tr, &val).unwrap();
        let solo = predict(
            std::slice::from_ref(&ckpt),
            &val.features,
            &PredictMode::PrimaryOnly,
        )
        .unwrap();
        let trio = predict(
            &[ckpt.clone(), ckpt.clone(), ckpt],
            &val.features,
            &PredictMode::Ensemble(None),
        )
        .unwrap();
        for (a, b) in solo.probs.probs().iter().zip(trio.probs.probs().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_ensemble_weights_reduce_to_members_bitwise() {
        let (tr, val) = blobs(13);
        let mut cfg = quick_cfg(Method::Mte, 13);
        cfg.epochs = 3;
        let (primary, aux, _) = train_mte(&cfg, &tr, &val).unwrap();
        let ckpts = vec![primary, aux.into_iter().next().unwrap()];
        for (beta, member) in [(0.0, 0usize), (1.0, 1usize)] {
            let w = mte_ensemble_weights(beta, 1).unwrap();
            let ens = predict(&ckpts, &val.features, &PredictMode::Ensemble(Some(w))).unwrap();
            let solo = predict(
                std::slice::from_ref(&ckpts[member]),
                &val.features,
                &PredictMode::PrimaryOnly,
            )
            .unwrap();
            let eb: Vec<u64> = ens.probs.probs().iter().map(|v| v.to_bits()).collect();
            let sb: Vec<u64> = solo.probs.probs().iter().map(|v| v.to_bits()).collect();
            assert_eq!(eb, sb);
        }
    }

    #[test]
    fn uniform_ensemble_is_row_mean_of_member_softmaxes() {
        let (tr, val) = blobs(14);
        let mut cfg = quick_cfg(Method::De, 14);
        cfg.n_aux = 3;
        cfg.epochs = 2;
        let (ckpts, _) = train_deep_ensemble(&cfg, &tr, &val).unwrap();
        let ens = predict(&ckpts, &val.features, &PredictMode::Ensemble(None)).unwrap();
        let members: Vec<ProbBatch> = ckpts
            .iter()
            .map(|c| ProbBatch::from_logits(&forward_logits(c, &val.features).unwrap()))
            .collect();
        for r in 0..val.len() {
            for k in 0..val.n_classes {
                let mean: f64 =
                    members.iter().map(|m| m.probs()[(r, k)]).sum::<f64>() / members.len() as f64;
                assert!((ens.probs.probs()[(r, k)] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_count_mismatch_rejected() {
        let (tr, val) = blobs(15);
        let mut cfg = quick_cfg(Method::Ce, 15);
        cfg.epochs = 1;
        let (ckpt, _) = train_single(&cfg, &tr, &val).unwrap();
        let bad = PredictMode::Ensemble(Some(vec![0.5, 0.5]));
        assert!(predict(std::slice::from_ref(&ckpt), &val.features, &bad).is_err());
    }

    #[test]
    fn divergent_run_reports_epoch_and_batch() {
        let (tr, val) = blobs(16);
        let mut cfg = quick_cfg(Method::Ce, 16);
        cfg.primary_schedule = LrSchedule::constant(1e12);
        cfg.epochs = 5;
        match train_single(&cfg, &tr, &val) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn focal_zero_gamma_matches_ce_trajectory() {
        let (tr, val) = blobs(17);
        let mut cfg = quick_cfg(
            Method::Baseline {
                loss: BaselineLossSpec::Focal { gamma: 0.0 },
            },
            17,
        );
        cfg.epochs = 6;
        let (focal, _) = train_single(&cfg, &tr, &val).unwrap();
        cfg.method = Method::Ce;
        let (ce, _) = train_single(&cfg, &tr, &val).unwrap();
        let fb: Vec<u64> = focal.params.iter().map(|v| v.to_bits()).collect();
        let cb: Vec<u64> = ce.params.iter().map(|v| v.to_bits()).collect();
        assert_eq!(fb, cb);
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let (tr, val) = blobs(18);
        let mut cfg = quick_cfg(Method::Ce, 18);
        cfg.epochs = 4;
        let (_, history) = train_single(&cfg, &tr, &val).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        save_history_csv(&history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("epoch,"));
    }

    #[test]
    fn config_validation_rejects_bad_setups() {
        let base = quick_cfg(Method::Mte, 0);
        let mut no_aux = base.clone();
        no_aux.aux_spec = None;
        assert!(no_aux.validate().is_err());

        let mut neg_alpha = base.clone();
        neg_alpha.alpha = -0.5;
        assert!(neg_alpha.validate().is_err());

        let mut small_de = base.clone();
        small_de.method = Method::De;
        small_de.n_aux = 1;
        assert!(small_de.validate().is_err());

        let mut mismatched = base;
        mismatched.aux_spec = Some(ModelSpec::new(vec![3, 8, 2], 0));
        assert!(mismatched.validate().is_err());
    }
}
