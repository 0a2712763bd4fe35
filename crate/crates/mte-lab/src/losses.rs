//! Training objectives: cross-entropy, KL divergence, the co-training
//! primary/auxiliary losses (single and multi-auxiliary), the ensemble
//! combiner, the mutual-learning baseline, and regularized-CE baselines.
//!
//! Losses come in two forms: tape builders (`*_node`) that record the
//! objective on an autodiff [`Tape`] for training, and plain numeric
//! functions used by the evaluation suite and as oracles. Detachment is
//! part of the loss contract: the primary loss detaches the auxiliary
//! outputs internally and vice versa, so gradient flow is partitioned by
//! construction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-9;

/// Per-sample predicted probability rows with derived per-row confidence
/// (max entry) and predicted class (argmax, lowest index on ties).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch {
    probs: Array2<f64>,
}

impl ProbBatch {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (i, row) in probs.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "probability row {i} sums to {sum}, expected 1"
                )));
            }
            if row.iter().any(|p| !(0.0..=1.0 + ROW_SUM_TOL).contains(p)) {
                return Err(Error::InvalidArgument(format!(
                    "probability row {i} has entries outside [0, 1]"
                )));
            }
        }
        Ok(Self { probs })
    }

    /// Row-wise softmax of a logits matrix, log-sum-exp stabilized.
    pub fn from_logits(logits: &Array2<f64>) -> Self {
        let mut probs = logits.clone();
        for mut row in probs.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|z| (z - lse).exp());
        }
        Self { probs }
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn n_classes(&self) -> usize {
        self.probs.ncols()
    }

    /// Per-row maximum probability.
    pub fn confidence(&self) -> Vec<f64> {
        self.probs
            .rows()
            .into_iter()
            .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// Per-row argmax, lowest index on ties.
    pub fn predicted_class(&self) -> Vec<usize> {
        self.probs
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (k, v) in r.iter().enumerate() {
                    if *v > r[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Ground-truth class indices with a one-hot view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabelBatch {
    pub fn new(labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|l| **l >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self { labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn one_hot(&self) -> Array2<f64> {
        let mut t = Array2::zeros((self.labels.len(), self.n_classes));
        for (i, l) in self.labels.iter().enumerate() {
            t[(i, *l)] = 1.0;
        }
        t
    }
}

/// Selector for the single-model regularized-CE baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaselineLossSpec {
    Ce,
    Focal { gamma: f64 },
    LabelSmoothing { epsilon: f64 },
    EntropyReg { weight: f64 },
}

impl BaselineLossSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            BaselineLossSpec::Ce => Ok(()),
            BaselineLossSpec::Focal { gamma } if *gamma >= 0.0 => Ok(()),
            BaselineLossSpec::LabelSmoothing { epsilon } if (0.0..1.0).contains(epsilon) => Ok(()),
            BaselineLossSpec::EntropyReg { weight } if *weight >= 0.0 => Ok(()),
            other => Err(Error::InvalidSpec(format!(
                "invalid baseline loss parameter: {other:?}"
            ))),
        }
    }
}

fn validate_log_probs(tape: &Tape, logp: NodeId) -> Result<()> {
    for (i, row) in tape.value(logp).rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        if lse.abs() > ROW_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "row {i} of node {} is not a log-probability row (logsumexp = {lse})",
                logp.index()
            )));
        }
    }
    Ok(())
}

/// Mean cross-entropy of log-probabilities against hard labels, recorded
/// on the tape: `mean_b(-logp[b, y_b])`.
pub fn cross_entropy_node(tape: &mut Tape, logp: NodeId, labels: &LabelBatch) -> Result<NodeId> {
    let (b, k) = tape.value(logp).dim();
    if b != labels.len() || k != labels.n_classes {
        return Err(Error::InvalidArgument(format!(
            "log-prob shape ({b}, {k}) does not match {} labels over {} classes",
            labels.len(),
            labels.n_classes
        )));
    }
    validate_log_probs(tape, logp)?;
    let one_hot = tape.constant(labels.one_hot())?;
    let picked = tape.mul(one_hot, logp)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Mean KL divergence where both sides are given in log space:
/// `mean_b sum_k exp(p_log) * (p_log - logq)`. Gradients flow through
/// both arguments unless the caller detaches one.
pub fn kl_node(tape: &mut Tape, p_log: NodeId, logq: NodeId) -> Result<NodeId> {
    let (bp, kp) = tape.value(p_log).dim();
    let (bq, kq) = tape.value(logq).dim();
    if (bp, kp) != (bq, kq) {
        return Err(Error::InvalidArgument(format!(
            "KL shapes differ: ({bp}, {kp}) vs ({bq}, {kq})"
        )));
    }
    let p = tape.exp(p_log)?;
    let diff = tape.sub(p_log, logq)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / bp as f64)
}

/// Mean KL divergence with the left side given as strictly positive
/// probabilities (e.g. an ensemble mixture node).
pub fn kl_from_probs_node(tape: &mut Tape, p: NodeId, logq: NodeId) -> Result<NodeId> {
    let (bp, kp) = tape.value(p).dim();
    if (bp, kp) != tape.value(logq).dim() {
        return Err(Error::InvalidArgument("KL shapes differ".into()));
    }
    let p_log = tape.log(p)?;
    let diff = tape.sub(p_log, logq)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / bp as f64)
}

/// Nodes making up the primary co-training objective.
pub struct PrimaryLoss {
    pub total: NodeId,
    pub ce: NodeId,
    /// Mean KL regularizer over auxiliaries; absent when `alpha` is zero,
    /// in which case the objective is exactly the cross-entropy loss.
    pub kl: Option<NodeId>,
}

/// Primary-model objective: `CE(f, labels) + alpha * mean_i KL(g_i || f)`.
///
/// Each auxiliary's log-probabilities are detached internally, so the
/// gradient flows only to the primary model's parameters.
pub fn mte_primary_loss_node(
    tape: &mut Tape,
    f_logp: NodeId,
    aux_logp: &[NodeId],
    labels: &LabelBatch,
    alpha: f64,
) -> Result<PrimaryLoss> {
    if aux_logp.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one auxiliary output is required".into(),
        ));
    }
    if alpha < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "alpha must be nonnegative, got {alpha}"
        )));
    }
    let ce = cross_entropy_node(tape, f_logp, labels)?;
    if alpha == 0.0 {
        return Ok(PrimaryLoss {
            total: ce,
            ce,
            kl: None,
        });
    }
    let mut kl_sum = None;
    for g in aux_logp {
        let g_detached = tape.detach(*g)?;
        let term = kl_node(tape, g_detached, f_logp)?;
        kl_sum = Some(match kl_sum {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let kl_mean = tape.scale(kl_sum.unwrap(), 1.0 / aux_logp.len() as f64)?;
    let scaled = tape.scale(kl_mean, alpha)?;
    let total = tape.add(ce, scaled)?;
    Ok(PrimaryLoss {
        total,
        ce,
        kl: Some(kl_mean),
    })
}

/// Auxiliary-model objective: `KL(f || g)` with the primary output
/// detached. There is deliberately no cross-entropy term; the primary's
/// predictions are the only supervision signal.
pub fn mte_auxiliary_loss_node(tape: &mut Tape, f_logp: NodeId, g_logp: NodeId) -> Result<NodeId> {
    let f_detached = tape.detach(f_logp)?;
    kl_node(tape, f_detached, g_logp)
}

/// Nodes making up one side of the mutual-learning baseline objective.
pub struct DmlLoss {
    pub total: NodeId,
    pub ce: NodeId,
    pub kl: Option<NodeId>,
}

/// Mutual-learning objective for one model: `CE(own, labels) +
/// alpha * KL(peer || own)` with the peer detached. Unlike the
/// co-training auxiliary, both peers keep a cross-entropy term.
pub fn dml_loss_node(
    tape: &mut Tape,
    own_logp: NodeId,
    peer_logp: NodeId,
    labels: &LabelBatch,
    alpha: f64,
) -> Result<DmlLoss> {
    if alpha < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "alpha must be nonnegative, got {alpha}"
        )));
    }
    let ce = cross_entropy_node(tape, own_logp, labels)?;
    if alpha == 0.0 {
        return Ok(DmlLoss {
            total: ce,
            ce,
            kl: None,
        });
    }
    let peer_detached = tape.detach(peer_logp)?;
    let kl = kl_node(tape, peer_detached, own_logp)?;
    let scaled = tape.scale(kl, alpha)?;
    let total = tape.add(ce, scaled)?;
    Ok(DmlLoss {
        total,
        ce,
        kl: Some(kl),
    })
}

/// One of the regularized-CE baseline objectives, recorded on the tape.
pub fn baseline_loss_node(
    tape: &mut Tape,
    spec: &BaselineLossSpec,
    logp: NodeId,
    labels: &LabelBatch,
) -> Result<NodeId> {
    spec.validate()?;
    let (b, k) = tape.value(logp).dim();
    match *spec {
        BaselineLossSpec::Ce => cross_entropy_node(tape, logp, labels),
        // The zero-parameter cases delegate so they are the CE loss
        // bit-for-bit, not just up to rounding.
        BaselineLossSpec::Focal { gamma } if gamma == 0.0 => {
            cross_entropy_node(tape, logp, labels)
        }
        BaselineLossSpec::LabelSmoothing { epsilon } if epsilon == 0.0 => {
            cross_entropy_node(tape, logp, labels)
        }
        BaselineLossSpec::EntropyReg { weight } if weight == 0.0 => {
            cross_entropy_node(tape, logp, labels)
        }
        BaselineLossSpec::Focal { gamma } => {
            validate_log_probs(tape, logp)?;
            if b != labels.len() || k != labels.n_classes {
                return Err(Error::InvalidArgument("focal loss shape mismatch".into()));
            }
            // mean_b -(1 - p_y)^gamma * log p_y
            let one_hot = tape.constant(labels.one_hot())?;
            let ones_col = tape.constant(Array2::ones((k, 1)))?;
            let p = tape.exp(logp)?;
            let py_terms = tape.mul(one_hot, p)?;
            let py = tape.matmul(py_terms, ones_col)?; // B x 1
            let logpy_terms = tape.mul(one_hot, logp)?;
            let logpy = tape.matmul(logpy_terms, ones_col)?; // B x 1
            let ones_b = tape.constant(Array2::ones((b, 1)))?;
            let gap = tape.sub(ones_b, py)?;
            let weight = tape.pow_const(gap, gamma)?;
            let neg_logpy = tape.scale(logpy, -1.0)?;
            let per_sample = tape.mul(weight, neg_logpy)?;
            let total = tape.sum(per_sample)?;
            tape.scale(total, 1.0 / b as f64)
        }
        BaselineLossSpec::LabelSmoothing { epsilon } => {
            validate_log_probs(tape, logp)?;
            let target = labels.one_hot() * (1.0 - epsilon) + epsilon / k as f64;
            let target = tape.constant(target)?;
            let terms = tape.mul(target, logp)?;
            let total = tape.sum(terms)?;
            tape.scale(total, -1.0 / b as f64)
        }
        BaselineLossSpec::EntropyReg { weight } => {
            // CE - weight * H(p) = CE + weight * mean_b sum_k p log p
            let ce = cross_entropy_node(tape, logp, labels)?;
            let p = tape.exp(logp)?;
            let plogp = tape.mul(p, logp)?;
            let total = tape.sum(plogp)?;
            let penalty = tape.scale(total, weight / b as f64)?;
            tape.add(ce, penalty)
        }
    }
}

/// Element-wise convex combination of probability batches (the ensemble
/// prediction). Weights must be nonnegative and sum to 1 within 1e-9.
pub fn ensemble_probs(members: &[ProbBatch], weights: &[f64]) -> Result<ProbBatch> {
    if members.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    if members.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} members but {} weights",
            members.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::InvalidArgument("negative ensemble weight".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::InvalidArgument(format!(
            "ensemble weights sum to {sum}, expected 1"
        )));
    }
    let dim = members[0].probs().dim();
    let mut acc = Array2::zeros(dim);
    for (m, w) in members.iter().zip(weights) {
        if m.probs().dim() != dim {
            return Err(Error::InvalidArgument("ensemble member shape mismatch".into()));
        }
        acc += &(m.probs() * *w);
    }
    // Renormalize away accumulation error so the output passes the
    // row-stochastic invariant.
    for mut row in acc.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    ProbBatch::new(acc)
}

/// Numeric mean cross-entropy over a batch of log-probability rows.
pub fn cross_entropy_mean(logp: &Array2<f64>, labels: &LabelBatch) -> Result<f64> {
    if logp.nrows() != labels.len() || logp.ncols() != labels.n_classes {
        return Err(Error::InvalidArgument("cross-entropy shape mismatch".into()));
    }
    let total: f64 = labels
        .labels
        .iter()
        .enumerate()
        .map(|(i, y)| -logp[(i, *y)])
        .sum();
    Ok(total / labels.len() as f64)
}

/// Numeric mean KL divergence; terms with `p = 0` contribute zero.
pub fn kl_divergence_mean(p: &ProbBatch, logq: &Array2<f64>) -> Result<f64> {
    if p.probs().dim() != logq.dim() {
        return Err(Error::InvalidArgument("KL shape mismatch".into()));
    }
    let mut total = 0.0;
    for (prow, qrow) in p.probs().rows().into_iter().zip(logq.rows()) {
        for (pk, lq) in prow.iter().zip(qrow.iter()) {
            if *pk > 0.0 {
                total += pk * (pk.ln() - lq);
            }
        }
    }
    Ok(total / p.len() as f64)
}

/// Row-wise natural log with probabilities clamped to `[1e-12, 1]`, for
/// feeding probability matrices into losses that expect log space.
pub fn clamped_log(probs: &Array2<f64>) -> Array2<f64> {
    probs.mapv(|p| p.clamp(1e-12, 1.0).ln())
}

pub fn mean_axis0_probs(members: &[ProbBatch]) -> Result<ProbBatch> {
    let weights = vec![1.0 / members.len() as f64; members.len()];
    ensemble_probs(members, &weights)
}
