//! Calibration metrics (ECE, classwise-ECE), diagram data (reliability
//! bins, confidence histograms), and score-based detection metrics
//! (FPR-95%, D-error, AUROC, AUPR) with a pairwise-counting AUROC oracle.
//!
//! Binning rule: `[0, 1]` is split into `M` equal-width bins; bin `i`
//! (1-based) covers `((i-1)/M, i/M]` and the first bin additionally
//! includes 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LabelBatch, ProbBatch};

/// Default bin count for calibration metrics.
pub const DEFAULT_BINS: usize = 15;

/// Per-bin aggregate of a confidence-binned sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub count: usize,
    /// Fraction of samples in the bin predicted correctly (0 when empty).
    pub accuracy: f64,
    /// Mean confidence of samples in the bin (0 when empty).
    pub mean_confidence: f64,
}

impl Bin {
    pub fn gap(&self) -> f64 {
        (self.accuracy - self.mean_confidence).abs()
    }
}

/// Confidence-binned statistics backing ECE and reliability diagrams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub m: usize,
    pub n: usize,
    pub bins: Vec<Bin>,
}

impl BinStats {
    /// `sum_i (|B_i| / N) * |A_i - C_i|`; the single source of the ECE
    /// value, so recomputing from diagram data is exact by construction.
    pub fn ece(&self) -> f64 {
        self.bins
            .iter()
            .map(|b| (b.count as f64 / self.n as f64) * b.gap())
            .sum()
    }
}

/// Per-class, per-bin statistics backing classwise-ECE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClasswiseBinStats {
    pub m: usize,
    pub n: usize,
    pub n_classes: usize,
    /// `bins[k][i]`: samples whose class-`k` probability falls in bin `i`;
    /// `accuracy` is the fraction whose true label is `k`.
    pub bins: Vec<Vec<Bin>>,
}

impl ClasswiseBinStats {
    pub fn classwise_ece(&self) -> f64 {
        let nk = (self.n * self.n_classes) as f64;
        self.bins
            .iter()
            .flatten()
            .map(|b| (b.count as f64 / nk) * b.gap())
            .sum()
    }
}

/// Confidence histogram data plus the dashed-line annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    pub m: usize,
    pub counts: Vec<usize>,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Score-based detection summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// False-positive rate at the first operating point with TPR >= 0.95
    /// (threshold sweep, no interpolation).
    pub fpr95: f64,
    /// Balanced detection error at that operating point:
    /// `0.5 * (1 - 0.95) + 0.5 * fpr95`.
    pub d_error: f64,
    pub auroc: f64,
    pub aupr: f64,
}

/// Index of the bin containing `v`, with exact boundary handling.
fn bin_index(v: f64, m: usize) -> usize {
    let mut idx = ((v * m as f64).ceil() as isize - 1).clamp(0, m as isize - 1) as usize;
    // Float rounding can land ceil() one bin off at exact boundaries.
    while idx > 0 && v <= idx as f64 / m as f64 {
        idx -= 1;
    }
    while idx + 1 < m && v > (idx + 1) as f64 / m as f64 {
        idx += 1;
    }
    idx
}

fn check_inputs(probs: &ProbBatch, labels: &LabelBatch, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidArgument("bin count must be >= 1".into()));
    }
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if probs.len() != labels.len() || probs.n_classes() != labels.n_classes {
        return Err(Error::InvalidArgument(format!(
            "probs ({} x {}) do not match labels ({} over {} classes)",
            probs.len(),
            probs.n_classes(),
            labels.len(),
            labels.n_classes
        )));
    }
    Ok(())
}

/// Confidence-binned statistics over top-class confidences (the
/// reliability-diagram data; `gap` per bin is the red-bar height).
pub fn reliability_diagram(
    probs: &ProbBatch,
    labels: &LabelBatch,
    m: usize,
) -> Result<BinStats> {
    check_inputs(probs, labels, m)?;
    let conf = probs.confidence();
    let pred = probs.predicted_class();
    let mut counts = vec![0usize; m];
    let mut correct = vec![0usize; m];
    let mut conf_sum = vec![0.0f64; m];
    for i in 0..probs.len() {
        let b = bin_index(conf[i], m);
        counts[b] += 1;
        conf_sum[b] += conf[i];
        if pred[i] == labels.labels[i] {
            correct[b] += 1;
        }
    }
    let bins = (0..m)
        .map(|b| Bin {
            count: counts[b],
            accuracy: if counts[b] > 0 {
                correct[b] as f64 / counts[b] as f64
            } else {
                0.0
            },
            mean_confidence: if counts[b] > 0 {
                conf_sum[b] / counts[b] as f64
            } else {
                0.0
            },
        })
        .collect();
    Ok(BinStats {
        m,
        n: probs.len(),
        bins,
    })
}

/// Expected calibration error with its bin statistics.
pub fn ece(probs: &ProbBatch, labels: &LabelBatch, m: usize) -> Result<(f64, BinStats)> {
    let stats = reliability_diagram(probs, labels, m)?;
    let value = stats.ece();
    Ok((value, stats))
}

/// Classwise expected calibration error over every class's predicted
/// probability, averaged over classes.
pub fn classwise_ece(
    probs: &ProbBatch,
    labels: &LabelBatch,
    m: usize,
) -> Result<(f64, ClasswiseBinStats)> {
    check_inputs(probs, labels, m)?;
    let k = probs.n_classes();
    let n = probs.len();
    let mut bins = vec![
        vec![
            Bin {
                count: 0,
                accuracy: 0.0,
                mean_confidence: 0.0
            };
            m
        ];
        k
    ];
    for class in 0..k {
        let mut counts = vec![0usize; m];
        let mut hits = vec![0usize; m];
        let mut psum = vec![0.0f64; m];
        for i in 0..n {
            let p = probs.probs()[(i, class)];
            let b = bin_index(p, m);
            counts[b] += 1;
            psum[b] += p;
            if labels.labels[i] == class {
                hits[b] += 1;
            }
        }
        for b in 0..m {
            bins[class][b] = Bin {
                count: counts[b],
                accuracy: if counts[b] > 0 {
                    hits[b] as f64 / counts[b] as f64
                } else {
                    0.0
                },
                mean_confidence: if counts[b] > 0 {
                    psum[b] / counts[b] as f64
                } else {
                    0.0
                },
            };
        }
    }
    let stats = ClasswiseBinStats {
        m,
        n,
        n_classes: k,
        bins,
    };
    let value = stats.classwise_ece();
    Ok((value, stats))
}

/// Histogram of top-class confidences plus mean confidence and overall
/// accuracy (the dashed-line annotations of a confidence histogram).
pub fn confidence_histogram(
    probs: &ProbBatch,
    labels: &LabelBatch,
    m: usize,
) -> Result<ConfidenceHistogram> {
    check_inputs(probs, labels, m)?;
    let conf = probs.confidence();
    let pred = probs.predicted_class();
    let mut counts = vec![0usize; m];
    for c in &conf {
        counts[bin_index(*c, m)] += 1;
    }
    let n = probs.len() as f64;
    let correct = pred
        .iter()
        .zip(&labels.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(ConfidenceHistogram {
        m,
        counts,
        mean_confidence: conf.iter().sum::<f64>() / n,
        accuracy: correct as f64 / n,
    })
}

/// Fraction of predictions matching the labels.
pub fn accuracy(probs: &ProbBatch, labels: &LabelBatch) -> f64 {
    let pred = probs.predicted_class();
    let hits = pred
        .iter()
        .zip(&labels.labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Threshold-sweep detection metrics for positive vs negative score sets.
///
/// The sweep visits every unique score descending, classifying `score >=
/// threshold` as positive. AUROC is the trapezoid area over the resulting
/// ROC; AUPR is step-wise precision-recall integration; FPR-95 is read at
/// the first operating point whose TPR reaches 0.95, without
/// interpolation.
pub fn detection_metrics(pos: &[f64], neg: &[f64]) -> Result<DetectionReport> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument(
            "detection needs nonempty positive and negative score sets".into(),
        ));
    }
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).cloned().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let mut pos_sorted = pos.to_vec();
    let mut neg_sorted = neg.to_vec();
    pos_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    neg_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let count_ge = |sorted: &[f64], t: f64| -> usize {
        sorted.len() - sorted.partition_point(|x| *x < t)
    };

    let np = pos.len() as f64;
    let nn = neg.len() as f64;

    let mut roc = vec![(0.0f64, 0.0f64)];
    let mut fpr95 = None;
    let mut aupr = 0.0;
    let mut prev_recall = 0.0;
    for t in &thresholds {
        let tp = count_ge(&pos_sorted, *t) as f64;
        let fp = count_ge(&neg_sorted, *t) as f64;
        let tpr = tp / np;
        let fpr = fp / nn;
        roc.push((fpr, tpr));
        if fpr95.is_none() && tpr >= 0.95 {
            fpr95 = Some(fpr);
        }
        let precision = tp / (tp + fp);
        aupr += (tpr - prev_recall) * precision;
        prev_recall = tpr;
    }
    roc.push((1.0, 1.0));

    let mut auroc = 0.0;
    for w in roc.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        auroc += (x1 - x0) * (y0 + y1) / 2.0;
    }

    let fpr95 = fpr95.unwrap_or(1.0);
    Ok(DetectionReport {
        fpr95,
        d_error: 0.5 * (1.0 - 0.95) + 0.5 * fpr95,
        auroc,
        aupr,
    })
}

/// Pairwise-counting AUROC oracle:
/// `(#{p > n} + 0.5 * #{p = n}) / (|pos| * |neg|)`.
pub fn auroc_bruteforce(pos: &[f64], neg: &[f64]) -> f64 {
    let mut score = 0.0;
    for p in pos {
        for n in neg {
            if p > n {
                score += 1.0;
            } else if p == n {
                score += 0.5;
            }
        }
    }
    score / (pos.len() * neg.len()) as f64
}
