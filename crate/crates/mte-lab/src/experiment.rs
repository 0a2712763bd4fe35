//! Config-driven experiment pipeline: train the configured methods on one
//! dataset, evaluate calibration and detection, optionally sweep corruption
//! severities and regularizer strengths, and write a JSON report plus
//! derived CSV tables.
//!
//! Reports are pure functions of `(config, seed)`; rerunning a config
//! produces byte-identical files. Every CSV is re-derivable from
//! `report.json`, which is the single source of truth.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{
    corrupt, load_csv, make_gaussian_mixture, make_ood_splits, train_val_test_split,
    CorruptionKind, CorruptionSpec, LabeledDataset, MixtureSpec, SplitTag,
};
use crate::error::{Error, Result};
use crate::losses::{BaselineLossSpec, LabelBatch, ProbBatch};
use crate::metrics::{
    accuracy, classwise_ece, confidence_histogram, detection_metrics, ece, reliability_diagram,
};
use crate::nn::{LrSchedule, ModelCheckpoint, ModelSpec};
use crate::trainer::{
    predict, train_deep_ensemble, train_dml, train_mte, train_single, AuxUpdate, Method,
    PredictMode, TrainConfig,
};

pub const REPORT_FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

/// Mixture parameters as written in config files. The generator seed is
/// derived from the experiment's global seed, not stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    pub covariance_scale: Vec<f64>,
    pub samples_per_class: usize,
    #[serde(default)]
    pub label_noise_rate: f64,
}

impl MixtureConfig {
    pub fn to_spec(&self, seed: u64) -> MixtureSpec {
        MixtureSpec {
            n_classes: self.n_classes,
            dim: self.dim,
            means: self.means.clone(),
            covariance_scale: self.covariance_scale.clone(),
            samples_per_class: self.samples_per_class,
            label_noise_rate: self.label_noise_rate,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Synthetic mixture source; exactly one of `mixture` and `csv_path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<MixtureConfig>,
    /// CSV file source (`f0..f{D-1},label` header).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<String>,
    /// Train/val/test fractions, summing to 1.
    pub split_fractions: [f64; 3],
}

fn default_epochs() -> usize {
    60
}
fn default_batch_size() -> usize {
    100
}
fn default_alpha() -> f64 {
    0.8
}
fn default_n_aux() -> usize {
    1
}
fn default_primary_hidden() -> Vec<usize> {
    vec![128, 128]
}
fn default_aux_hidden() -> Vec<usize> {
    vec![64]
}
fn default_primary_lr() -> f64 {
    0.1
}
fn default_aux_lr() -> f64 {
    0.01
}
fn default_warm_epochs() -> usize {
    30
}
fn default_decay_interval() -> usize {
    10
}
fn default_decay_factor() -> f64 {
    0.5
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_aux_update() -> AuxUpdate {
    AuxUpdate::PostPrimary
}

const METHOD_KINDS: &[&str] = &[
    "ce",
    "focal",
    "label-smoothing",
    "entropy-reg",
    "mte",
    "dml",
    "de",
];

/// One trained method. Hyper-parameters irrelevant to the chosen `kind`
/// are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    /// Row label in the report; defaults to `kind`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_n_aux")]
    pub n_aux: usize,
    /// Focal exponent.
    #[serde(default)]
    pub gamma: f64,
    /// Label-smoothing mass.
    #[serde(default)]
    pub epsilon: f64,
    /// Entropy-regularizer weight.
    #[serde(default)]
    pub weight: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_primary_hidden")]
    pub primary_hidden: Vec<usize>,
    #[serde(default = "default_aux_hidden")]
    pub aux_hidden: Vec<usize>,
    #[serde(default = "default_primary_lr")]
    pub primary_lr: f64,
    #[serde(default = "default_aux_lr")]
    pub aux_lr: f64,
    #[serde(default = "default_warm_epochs")]
    pub warm_epochs: usize,
    #[serde(default = "default_decay_interval")]
    pub decay_interval: usize,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_aux_update")]
    pub aux_update: AuxUpdate,
}

impl MethodSection {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.clone())
    }

    fn to_train_config(&self, input_dim: usize, n_classes: usize, seed: u64) -> Result<TrainConfig> {
        let method = match self.kind.as_str() {
            "ce" => Method::Ce,
            "focal" => Method::Baseline {
                loss: BaselineLossSpec::Focal { gamma: self.gamma },
            },
            "label-smoothing" => Method::Baseline {
                loss: BaselineLossSpec::LabelSmoothing {
                    epsilon: self.epsilon,
                },
            },
            "entropy-reg" => Method::Baseline {
                loss: BaselineLossSpec::EntropyReg {
                    weight: self.weight,
                },
            },
            "mte" => Method::Mte,
            "dml" => Method::Dml,
            "de" => Method::De,
            other => {
                return Err(Error::Config(suggest_unknown(
                    &format!("method kind {other:?} is not recognized"),
                    other,
                    METHOD_KINDS,
                )))
            }
        };
        let mut primary_widths = vec![input_dim];
        primary_widths.extend(&self.primary_hidden);
        primary_widths.push(n_classes);
        let mut aux_widths = vec![input_dim];
        aux_widths.extend(&self.aux_hidden);
        aux_widths.push(n_classes);
        Ok(TrainConfig {
            method,
            alpha: self.alpha,
            n_aux: self.n_aux,
            primary_spec: ModelSpec::new(primary_widths, seed ^ 0x706d),
            aux_spec: Some(ModelSpec::new(aux_widths, seed ^ 0x6178)),
            epochs: self.epochs,
            batch_size: self.batch_size,
            primary_schedule: LrSchedule {
                initial: self.primary_lr,
                warm_epochs: self.warm_epochs,
                decay_interval: self.decay_interval,
                decay_factor: self.decay_factor,
            },
            aux_schedule: LrSchedule::constant(self.aux_lr),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
            aux_update: self.aux_update,
        })
    }
}

fn default_bins() -> usize {
    15
}
fn default_detection() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Calibration bin count M.
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Run misclassification and (for mixtures) OOD detection.
    #[serde(default = "default_detection")]
    pub detection: bool,
    /// Evaluate calibration under severities 1..=5 of `corruption_kind`.
    #[serde(default)]
    pub corruption_sweep: bool,
    #[serde(default = "default_corruption_kind")]
    pub corruption_kind: CorruptionKind,
    /// Retrain co-training methods at each listed strength.
    #[serde(default)]
    pub alpha_sweep: Vec<f64>,
}

fn default_corruption_kind() -> CorruptionKind {
    CorruptionKind::GaussianNoise
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            bins: default_bins(),
            detection: default_detection(),
            corruption_sweep: false,
            corruption_kind: default_corruption_kind(),
            alpha_sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub dataset: DatasetSection,
    pub methods: Vec<MethodSection>,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Semantic checks beyond the serde schema. Returns every problem
    /// found, each naming the offending field.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let ds = &self.dataset;
        match (&ds.mixture, &ds.csv_path) {
            (None, None) => {
                errs.push("dataset: one of `mixture` or `csv_path` is required".into())
            }
            (Some(_), Some(_)) => {
                errs.push("dataset: `mixture` and `csv_path` are mutually exclusive".into())
            }
            _ => {}
        }
        if let Some(m) = &ds.mixture {
            if let Err(e) = m.to_spec(0).validate() {
                errs.push(format!("dataset.mixture: {e}"));
            }
        }
        let fsum: f64 = ds.split_fractions.iter().sum();
        if ds.split_fractions.iter().any(|f| *f < 0.0) || (fsum - 1.0).abs() > 1e-6 {
            errs.push(format!(
                "dataset.split_fractions: must be nonnegative and sum to 1, got {:?}",
                ds.split_fractions
            ));
        }
        if self.methods.is_empty() {
            errs.push("methods: at least one method is required".into());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if !METHOD_KINDS.contains(&m.kind.as_str()) {
                errs.push(format!(
                    "methods[{i}].kind: {}",
                    suggest_unknown(
                        &format!("{:?} is not a known method", m.kind),
                        &m.kind,
                        METHOD_KINDS
                    )
                ));
            }
            if m.alpha < 0.0 {
                errs.push(format!(
                    "methods[{i}].alpha: must be nonnegative, got {}",
                    m.alpha
                ));
            }
            if m.kind == "de" && m.n_aux < 2 {
                errs.push(format!(
                    "methods[{i}].n_aux: a deep ensemble needs at least 2 members, got {}",
                    m.n_aux
                ));
            }
            if m.epochs == 0 || m.batch_size == 0 {
                errs.push(format!(
                    "methods[{i}]: epochs and batch_size must be positive"
                ));
            }
        }
        if self.eval.bins == 0 {
            errs.push("eval.bins: must be at least 1".into());
        }
        for (i, a) in self.eval.alpha_sweep.iter().enumerate() {
            if *a < 0.0 {
                errs.push(format!(
                    "eval.alpha_sweep[{i}]: must be nonnegative, got {a}"
                ));
            }
        }
        errs
    }
}

// ---------------------------------------------------------------------------
// Config parsing with unknown-key suggestions
// ---------------------------------------------------------------------------

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn nearest<'a>(word: &str, candidates: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    candidates
        .into_iter()
        .map(|c| (levenshtein(word, c), c))
        .min()
        .filter(|(d, _)| *d <= 3)
        .map(|(_, c)| c)
}

fn suggest_unknown(message: &str, word: &str, candidates: &[&str]) -> String {
    match nearest(word, candidates.iter().copied()) {
        Some(c) => format!("{message}; did you mean `{c}`?"),
        None => message.to_string(),
    }
}

/// Serde reports unknown fields as ``unknown field `x`, expected one of
/// `a`, `b`...``; pull out the tokens and append a nearest-key hint.
fn decorate_serde_error(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    let tokens: Vec<&str> = msg
        .split('`')
        .enumerate()
        .filter_map(|(i, s)| (i % 2 == 1).then_some(s))
        .collect();
    if msg.contains("unknown field") && tokens.len() >= 2 {
        if let Some(best) = nearest(tokens[0], tokens[1..].iter().copied()) {
            return format!("{msg}; did you mean `{best}`?");
        }
    }
    msg
}

/// Parses and fully validates a config file. Problems come back as the
/// `Err` payload of `Ok`: an empty list means the config is valid.
pub fn validate_config(path: &Path) -> Result<(Option<ExperimentConfig>, Vec<String>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => return Ok((None, vec![decorate_serde_error(&e)])),
    };
    let problems = cfg.problems();
    Ok((Some(cfg), problems))
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let (cfg, problems) = validate_config(path)?;
    match (cfg, problems.as_slice()) {
        (Some(c), []) => Ok(c),
        (_, probs) => Err(Error::Config(probs.join("; "))),
    }
}

// ---------------------------------------------------------------------------
// Report model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub bin: usize,
    pub count: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub task: String,
    pub fpr95: f64,
    pub d_error: f64,
    pub auroc: f64,
    pub aupr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRow {
    pub severity: u8,
    pub accuracy: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub accuracy: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub kind: String,
    pub accuracy: f64,
    pub ece: f64,
    pub classwise_ece: f64,
    pub reliability: Vec<ReliabilityRow>,
    pub confidence_hist: Vec<HistogramRow>,
    #[serde(default)]
    pub detection: Vec<DetectionRow>,
    #[serde(default)]
    pub corruption: Vec<CorruptionRow>,
    #[serde(default)]
    pub alpha_sweep: Vec<AlphaRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub seed: u64,
    pub config_digest: String,
    pub dataset_digest: String,
    pub bins: usize,
    pub methods: Vec<MethodReport>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn dataset_digest(ds: &LabeledDataset) -> String {
    let mut bytes = Vec::with_capacity(ds.len() * (ds.dim() * 8 + 8));
    for v in ds.features.iter() {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    for l in &ds.labels {
        bytes.extend_from_slice(&(*l as u64).to_le_bytes());
    }
    sha256_hex(&bytes)
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct EvalInputs<'a> {
    test: &'a LabeledDataset,
    labels: LabelBatch,
    bins: usize,
}

fn evaluate(probs: &ProbBatch, inputs: &EvalInputs) -> Result<(f64, f64, f64, Vec<ReliabilityRow>, Vec<HistogramRow>)> {
    let acc = accuracy(probs, &inputs.labels);
    let (e, _) = ece(probs, &inputs.labels, inputs.bins)?;
    let (cw, _) = classwise_ece(probs, &inputs.labels, inputs.bins)?;
    let stats = reliability_diagram(probs, &inputs.labels, inputs.bins)?;
    let reliability = stats
        .bins
        .iter()
        .enumerate()
        .map(|(i, b)| ReliabilityRow {
            bin: i + 1,
            count: b.count,
            accuracy: b.accuracy,
            mean_confidence: b.mean_confidence,
            gap: b.gap(),
        })
        .collect();
    let hist = confidence_histogram(probs, &inputs.labels, inputs.bins)?;
    let confidence_hist = hist
        .counts
        .iter()
        .enumerate()
        .map(|(i, c)| HistogramRow { bin: i + 1, count: *c })
        .collect();
    Ok((acc, e, cw, reliability, confidence_hist))
}

/// Trains one configured method and returns the checkpoints to evaluate
/// plus the prediction mode matching the method's deployment convention.
fn train_method(
    section: &MethodSection,
    cfg: &TrainConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<(Vec<ModelCheckpoint>, PredictMode)> {
    match section.kind.as_str() {
        "mte" => {
            let (primary, aux, _) = train_mte(cfg, train, val)?;
            let mut ckpts = vec![primary];
            ckpts.extend(aux);
            Ok((ckpts, PredictMode::PrimaryOnly))
        }
        "dml" => {
            let (a, b, _) = train_dml(cfg, train, val)?;
            Ok((vec![a, b], PredictMode::PrimaryOnly))
        }
        "de" => {
            let (ckpts, _) = train_deep_ensemble(cfg, train, val)?;
            Ok((ckpts, PredictMode::Ensemble(None)))
        }
        _ => {
            let (ckpt, _) = train_single(cfg, train, val)?;
            Ok((vec![ckpt], PredictMode::PrimaryOnly))
        }
    }
}

fn run_method(
    section: &MethodSection,
    config: &ExperimentConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
    test: &LabeledDataset,
    mixture_spec: Option<&MixtureSpec>,
) -> Result<MethodReport> {
    let seed = config.seed;
    let cfg = section.to_train_config(train.dim(), train.n_classes, seed)?;
    cfg.validate()?;
    let (ckpts, mode) = train_method(section, &cfg, train, val)?;
    let pred = predict(&ckpts, &test.features, &mode)?;
    let inputs = EvalInputs {
        test,
        labels: LabelBatch::new(test.labels.clone(), test.n_classes)?,
        bins: config.eval.bins,
    };
    let (acc, e, cw, reliability, confidence_hist) = evaluate(&pred.probs, &inputs)?;

    let mut detection = Vec::new();
    if config.eval.detection {
        let conf = pred.probs.confidence();
        let predicted = pred.probs.predicted_class();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (i, c) in conf.iter().enumerate() {
            if predicted[i] == test.labels[i] {
                pos.push(*c);
            } else {
                neg.push(*c);
            }
        }
        if !pos.is_empty() && !neg.is_empty() {
            let rep = detection_metrics(&pos, &neg)?;
            detection.push(DetectionRow {
                task: "misclassification".into(),
                fpr95: rep.fpr95,
                d_error: rep.d_error,
                auroc: rep.auroc,
                aupr: rep.aupr,
            });
        }
        if let Some(spec) = mixture_spec {
            let splits = make_ood_splits(spec, seed ^ 0x6f6f64)?;
            for (task, ood) in [("near-ood", &splits.near), ("far-ood", &splits.far)] {
                let ood_pred = predict(&ckpts, ood, &mode)?;
                let rep = detection_metrics(&conf, &ood_pred.probs.confidence())?;
                detection.push(DetectionRow {
                    task: task.into(),
                    fpr95: rep.fpr95,
                    d_error: rep.d_error,
                    auroc: rep.auroc,
                    aupr: rep.aupr,
                });
            }
        }
    }

    let mut corruption = Vec::new();
    if config.eval.corruption_sweep {
        for severity in 1..=5u8 {
            let spec = CorruptionSpec {
                kind: config.eval.corruption_kind,
                severity,
            };
            let corrupted = corrupt(test, &spec, seed ^ u64::from(severity))?;
            let cpred = predict(&ckpts, &corrupted.features, &mode)?;
            let cacc = accuracy(&cpred.probs, &inputs.labels);
            let (cece, _) = ece(&cpred.probs, &inputs.labels, config.eval.bins)?;
            corruption.push(CorruptionRow {
                severity,
                accuracy: cacc,
                ece: cece,
            });
        }
    }

    let mut alpha_sweep = Vec::new();
    if matches!(section.kind.as_str(), "mte" | "dml") {
        for alpha in &config.eval.alpha_sweep {
            let mut sweep_cfg = cfg.clone();
            sweep_cfg.alpha = *alpha;
            let (ckpts, mode) = train_method(section, &sweep_cfg, train, val)?;
            let spred = predict(&ckpts, &test.features, &mode)?;
            let sacc = accuracy(&spred.probs, &inputs.labels);
            let (sece, _) = ece(&spred.probs, &inputs.labels, config.eval.bins)?;
            alpha_sweep.push(AlphaRow {
                alpha: *alpha,
                accuracy: sacc,
                ece: sece,
            });
        }
    }

    let _ = inputs.test;
    Ok(MethodReport {
        name: section.label(),
        kind: section.kind.clone(),
        accuracy: acc,
        ece: e,
        classwise_ece: cw,
        reliability,
        confidence_hist,
        detection,
        corruption,
        alpha_sweep,
    })
}

/// Materializes the configured dataset and splits it.
fn prepare_data(
    config: &ExperimentConfig,
    config_dir: &Path,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset, String, Option<MixtureSpec>)> {
    let (full, mixture_spec) = if let Some(m) = &config.dataset.mixture {
        let spec = m.to_spec(config.seed ^ 0x64617461);
        (make_gaussian_mixture(&spec)?, Some(spec))
    } else {
        let raw = config.dataset.csv_path.as_ref().unwrap();
        let path = PathBuf::from(raw);
        let path = if path.is_relative() {
            config_dir.join(path)
        } else {
            path
        };
        let (ds, _) = load_csv(&path)?;
        (ds, None)
    };
    let digest = dataset_digest(&full);
    let (train, val, mut test) =
        train_val_test_split(&full, config.dataset.split_fractions, config.seed ^ 0x73706c)?;
    test.split_tag = SplitTag::Test;
    Ok((train, val, test, digest, mixture_spec))
}

/// Runs the full pipeline and assembles the in-memory report.
pub fn build_report(config: &ExperimentConfig, config_dir: &Path) -> Result<RunReport> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let (train, val, test, digest, mixture_spec) = prepare_data(config, config_dir)?;
    let canonical = serde_json::to_vec(config)?;
    let mut methods = Vec::new();
    for section in &config.methods {
        methods.push(run_method(
            section,
            config,
            &train,
            &val,
            &test,
            mixture_spec.as_ref(),
        )?);
    }
    Ok(RunReport {
        format_version: REPORT_FORMAT_VERSION,
        seed: config.seed,
        config_digest: sha256_hex(&canonical),
        dataset_digest: digest,
        bins: config.eval.bins,
        methods,
    })
}

// ---------------------------------------------------------------------------
// File output
// ---------------------------------------------------------------------------

/// Writes `content` next to the target and renames it into place, so a
/// crash never leaves a half-written file under the final name.
fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(content)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_join(cells: &[String]) -> String {
    cells.join(",")
}

/// Renders every CSV table from the report alone.
pub fn write_report_files(report: &RunReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(report)?;
    write_atomic(&out_dir.join("report.json"), json.as_bytes())?;

    let mut metrics = String::from("method,kind,accuracy,ece,classwise_ece\n");
    for m in &report.methods {
        metrics.push_str(&csv_join(&[
            m.name.clone(),
            m.kind.clone(),
            m.accuracy.to_string(),
            m.ece.to_string(),
            m.classwise_ece.to_string(),
        ]));
        metrics.push('\n');
    }
    write_atomic(&out_dir.join("metrics.csv"), metrics.as_bytes())?;

    let mut rel = String::from("method,bin,count,accuracy,mean_confidence,gap\n");
    let mut hist = String::from("method,bin,count\n");
    for m in &report.methods {
        for r in &m.reliability {
            rel.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.name, r.bin, r.count, r.accuracy, r.mean_confidence, r.gap
            ));
        }
        for r in &m.confidence_hist {
            hist.push_str(&format!("{},{},{}\n", m.name, r.bin, r.count));
        }
    }
    write_atomic(&out_dir.join("reliability.csv"), rel.as_bytes())?;
    write_atomic(&out_dir.join("confidence_hist.csv"), hist.as_bytes())?;

    if report.methods.iter().any(|m| !m.detection.is_empty()) {
        let mut det = String::from("method,task,fpr95,d_error,auroc,aupr\n");
        for m in &report.methods {
            for d in &m.detection {
                det.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    m.name, d.task, d.fpr95, d.d_error, d.auroc, d.aupr
                ));
            }
        }
        write_atomic(&out_dir.join("detection.csv"), det.as_bytes())?;
    }

    if report.methods.iter().any(|m| !m.corruption.is_empty()) {
        let mut cor = String::from("method,severity,accuracy,ece\n");
        for m in &report.methods {
            for c in &m.corruption {
                cor.push_str(&format!(
                    "{},{},{},{}\n",
                    m.name, c.severity, c.accuracy, c.ece
                ));
            }
        }
        write_atomic(&out_dir.join("corruption_sweep.csv"), cor.as_bytes())?;
    }

    if report.methods.iter().any(|m| !m.alpha_sweep.is_empty()) {
        let mut sweep = String::from("method,alpha,accuracy,ece\n");
        for m in &report.methods {
            for a in &m.alpha_sweep {
                sweep.push_str(&format!("{},{},{},{}\n", m.name, a.alpha, a.accuracy, a.ece));
            }
        }
        write_atomic(&out_dir.join("alpha_sweep.csv"), sweep.as_bytes())?;
    }
    Ok(())
}

/// Loads a config, applies overrides, runs the pipeline, and writes the
/// report files. Returns the report and the output directory used.
pub fn run_experiment(
    config_path: &Path,
    seed_override: Option<u64>,
    out_override: Option<&Path>,
) -> Result<(RunReport, PathBuf)> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    let config_dir = config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let out_dir = match out_override {
        Some(p) => p.to_path_buf(),
        None => match &config.output_dir {
            Some(d) => {
                let p = PathBuf::from(d);
                if p.is_relative() {
                    config_dir.join(p)
                } else {
                    p
                }
            }
            None => PathBuf::from("mte-lab-out"),
        },
    };
    let report = build_report(&config, &config_dir)?;
    write_report_files(&report, &out_dir)?;
    Ok((report, out_dir))
}

/// Merges reports into one scatter-ready CSV, one row per method per
/// report. All reports must describe the same dataset.
pub fn compare_reports(report_paths: &[PathBuf], out_path: &Path) -> Result<()> {
    if report_paths.len() < 2 {
        return Err(Error::InvalidArgument(
            "compare needs at least two reports".into(),
        ));
    }
    let mut reports = Vec::new();
    for p in report_paths {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        let report: RunReport = serde_json::from_str(&text)?;
        reports.push((p.clone(), report));
    }
    let first_digest = &reports[0].1.dataset_digest;
    for (p, r) in &reports {
        if &r.dataset_digest != first_digest {
            return Err(Error::InvalidArgument(format!(
                "dataset digest of {} does not match the first report",
                p.display()
            )));
        }
    }
    let tasks = ["misclassification", "near-ood", "far-ood"];
    let mut out = String::from("report,seed,method,kind,accuracy,ece,classwise_ece");
    for t in tasks {
        let key = t.replace('-', "_");
        out.push_str(&format!(",{key}_auroc,{key}_fpr95"));
    }
    out.push('\n');
    for (p, r) in &reports {
        for m in &r.methods {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                p.display(),
                r.seed,
                m.name,
                m.kind,
                m.accuracy,
                m.ece,
                m.classwise_ece
            ));
            for t in tasks {
                match m.detection.iter().find(|d| d.task == t) {
                    Some(d) => out.push_str(&format!(",{},{}", d.auroc, d.fpr95)),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
    }
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_atomic(out_path, out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            output_dir: None,
            dataset: DatasetSection {
                mixture: Some(MixtureConfig {
                    n_classes: 2,
                    dim: 2,
                    means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
                    covariance_scale: vec![1.0, 1.0],
                    samples_per_class: 120,
                    label_noise_rate: 0.0,
                }),
                csv_path: None,
                split_fractions: [0.6, 0.2, 0.2],
            },
            methods: vec![
                MethodSection {
                    name: None,
                    kind: "ce".into(),
                    alpha: 0.0,
                    n_aux: 1,
                    gamma: 0.0,
                    epsilon: 0.0,
                    weight: 0.0,
                    epochs: 5,
                    batch_size: 30,
                    primary_hidden: vec![16],
                    aux_hidden: vec![8],
                    primary_lr: 0.1,
                    aux_lr: 0.01,
                    warm_epochs: 5,
                    decay_interval: 1,
                    decay_factor: 0.5,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    aux_update: AuxUpdate::PostPrimary,
                },
                MethodSection {
                    name: Some("mte-1".into()),
                    kind: "mte".into(),
                    alpha: 0.8,
                    n_aux: 1,
                    gamma: 0.0,
                    epsilon: 0.0,
                    weight: 0.0,
                    epochs: 5,
                    batch_size: 30,
                    primary_hidden: vec![16],
                    aux_hidden: vec![8],
                    primary_lr: 0.1,
                    aux_lr: 0.01,
                    warm_epochs: 5,
                    decay_interval: 1,
                    decay_factor: 0.5,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    aux_update: AuxUpdate::PostPrimary,
                },
            ],
            eval: EvalSection {
                bins: 10,
                detection: true,
                corruption_sweep: true,
                corruption_kind: CorruptionKind::GaussianNoise,
                alpha_sweep: vec![],
            },
        }
    }

    fn write_config(cfg: &ExperimentConfig, dir: &Path) -> PathBuf {
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
        path
    }

    #[test]
    fn report_is_deterministic_and_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(&tiny_config(7), dir.path());
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        run_experiment(&path, None, Some(&out_a)).unwrap();
        run_experiment(&path, None, Some(&out_b)).unwrap();
        for name in [
            "report.json",
            "metrics.csv",
            "reliability.csv",
            "confidence_hist.csv",
            "detection.csv",
            "corruption_sweep.csv",
        ] {
            let a = std::fs::read(out_a.join(name)).unwrap();
            let b = std::fs::read(out_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between reruns");
            assert!(!a.is_empty());
        }
    }

    #[test]
    fn seed_override_changes_the_report() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(&tiny_config(7), dir.path());
        let (r1, _) = run_experiment(&path, None, Some(&dir.path().join("x"))).unwrap();
        let (r2, _) = run_experiment(&path, Some(99), Some(&dir.path().join("y"))).unwrap();
        assert_eq!(r2.seed, 99);
        assert_ne!(r1.dataset_digest, r2.dataset_digest);
    }

    #[test]
    fn report_contains_both_method_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(&tiny_config(3), dir.path());
        let (report, _) = run_experiment(&path, None, Some(&dir.path().join("out"))).unwrap();
        assert_eq!(report.methods.len(), 2);
        assert_eq!(report.methods[0].kind, "ce");
        assert_eq!(report.methods[1].name, "mte-1");
        for m in &report.methods {
            assert!((0.0..=1.0).contains(&m.accuracy));
            assert!((0.0..=1.0).contains(&m.ece));
            assert!((0.0..=1.0).contains(&m.classwise_ece));
            assert_eq!(m.corruption.len(), 5);
            assert!(m.detection.iter().any(|d| d.task == "far-ood"));
        }
    }

    #[test]
    fn missing_config_file_is_a_config_error() {
        let err = run_experiment(Path::new("/nonexistent/cfg.json"), None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn unknown_key_gets_a_suggestion() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(1);
        let mut value = serde_json::to_value(&cfg).unwrap();
        let m = value["methods"][1].as_object_mut().unwrap();
        let alpha = m.remove("alpha").unwrap();
        m.insert("alpa".into(), alpha);
        let path = dir.path().join("bad.json");
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        let (parsed, problems) = validate_config(&path).unwrap();
        assert!(parsed.is_none());
        assert_eq!(problems.len(), 1);
        assert!(problems[0].contains("alpa"), "{}", problems[0]);
        assert!(problems[0].contains("did you mean `alpha`?"), "{}", problems[0]);
    }

    #[test]
    fn negative_alpha_names_the_field() {
        let mut cfg = tiny_config(1);
        cfg.methods[1].alpha = -1.0;
        let problems = cfg.problems();
        assert!(problems.iter().any(|p| p.contains("methods[1].alpha")));
    }

    #[test]
    fn valid_config_has_no_problems() {
        assert!(tiny_config(1).problems().is_empty());
    }

    #[test]
    fn compare_merges_rows_and_checks_digests() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(&tiny_config(5), dir.path());
        let out = dir.path().join("out");
        run_experiment(&path, None, Some(&out)).unwrap();
        let report_path = out.join("report.json");
        let merged = dir.path().join("cmp.csv");
        compare_reports(&[report_path.clone(), report_path.clone()], &merged).unwrap();
        let text = std::fs::read_to_string(&merged).unwrap();
        // Header plus two methods per report, twice.
        assert_eq!(text.lines().count(), 1 + 4);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], lines[3]);
        assert_eq!(lines[2], lines[4]);

        // A report over a different dataset must be rejected.
        let other_out = dir.path().join("other");
        run_experiment(&path, Some(1234), Some(&other_out)).unwrap();
        let err = compare_reports(
            &[report_path, other_out.join("report.json")],
            &dir.path().join("cmp2.csv"),
        );
        assert!(err.is_err());
    }

    #[test]
    fn csv_dataset_round_trips_through_the_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let spec = MixtureSpec {
            n_classes: 2,
            dim: 2,
            means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            covariance_scale: vec![0.8, 0.8],
            samples_per_class: 100,
            label_noise_rate: 0.0,
            seed: 9,
        };
        let ds = make_gaussian_mixture(&spec).unwrap();
        let csv_path = dir.path().join("data.csv");
        crate::data::save_csv(&ds, &csv_path).unwrap();
        let mut cfg = tiny_config(2);
        cfg.dataset.mixture = None;
        cfg.dataset.csv_path = Some("data.csv".into());
        cfg.methods.truncate(1);
        let path = write_config(&cfg, dir.path());
        let (report, _) = run_experiment(&path, None, Some(&dir.path().join("out"))).unwrap();
        assert_eq!(report.methods.len(), 1);
        // No mixture spec, so only misclassification detection applies.
        assert!(report.methods[0]
            .detection
            .iter()
            .all(|d| d.task == "misclassification"));
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein("alpa", "alpha"), 1);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(nearest("alpa", ["alpha", "gamma"]), Some("alpha"));
        assert_eq!(nearest("zzzzzzz", ["alpha", "gamma"]), None);
    }
}
