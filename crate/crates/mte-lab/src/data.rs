//! Synthetic dataset generation with controllable class overlap,
//! corruption sweeps at five severities, near/far OOD splits, and CSV
//! ingestion for external data.
//!
//! All generators are deterministic functions of `(spec, seed)`: draws go
//! through the counter-based ChaCha8 stream cipher, so results reproduce
//! across platforms.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Which partition a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Feature matrix plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split_tag: SplitTag,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.labels.len() {
            return Err(Error::InvalidSpec("feature/label count mismatch".into()));
        }
        if let Some(bad) = self.labels.iter().find(|l| **l >= self.n_classes) {
            return Err(Error::InvalidSpec(format!(
                "label {bad} out of range for {} classes",
                self.n_classes
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite feature value".into()));
        }
        Ok(())
    }

    /// Mean of the per-feature standard deviations; the scale reference
    /// for corruption severities.
    pub fn feature_std(&self) -> f64 {
        let n = self.features.nrows() as f64;
        let mut total = 0.0;
        for col in self.features.axis_iter(Axis(1)) {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            total += var.sqrt();
        }
        total / self.features.ncols() as f64
    }
}

/// Isotropic Gaussian mixture: one component per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub n_classes: usize,
    pub dim: usize,
    /// Component means, `n_classes` rows of `dim` entries.
    pub means: Vec<Vec<f64>>,
    /// Per-class standard deviation of the isotropic component.
    pub covariance_scale: Vec<f64>,
    pub samples_per_class: usize,
    /// Probability of flipping a label to a uniformly random other class.
    pub label_noise_rate: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidSpec("mixture needs at least 2 classes".into()));
        }
        if self.means.len() != self.n_classes || self.covariance_scale.len() != self.n_classes {
            return Err(Error::InvalidSpec(
                "means and covariance scales must have one entry per class".into(),
            ));
        }
        if self.means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::InvalidSpec("mean dimension mismatch".into()));
        }
        for i in 0..self.means.len() {
            for j in i + 1..self.means.len() {
                if self.means[i] == self.means[j] {
                    return Err(Error::InvalidSpec(format!(
                        "means of classes {i} and {j} coincide"
                    )));
                }
            }
        }
        if self.covariance_scale.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidSpec("covariance scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(Error::InvalidSpec("label noise rate must be in [0, 1)".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidSpec("samples_per_class must be positive".into()));
        }
        Ok(())
    }

    /// The default experiment dataset: three overlapping components whose
    /// means form a triangle in the first two coordinates, with eight
    /// additional pure-noise dimensions. The noise dimensions give the
    /// network room to overfit, so a plain cross-entropy model ends up
    /// visibly overconfident while the task's Bayes accuracy stays fixed.
    pub fn default_overlapping(seed: u64) -> Self {
        let dim = 10;
        let mut means = vec![vec![0.0; dim]; 3];
        means[1][0] = 2.0;
        means[2][0] = 1.0;
        means[2][1] = 1.7;
        Self {
            n_classes: 3,
            dim,
            means,
            covariance_scale: vec![1.0, 1.0, 1.0],
            samples_per_class: 3000,
            label_noise_rate: 0.0,
            seed,
        }
    }
}

/// Draws the mixture. Samples are class-major: block `k` holds class `k`'s
/// draws (before label noise).
pub fn make_gaussian_mixture(spec: &MixtureSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_classes * spec.samples_per_class;
    let mut features = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for class in 0..spec.n_classes {
        for _ in 0..spec.samples_per_class {
            for d in 0..spec.dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                features[(row, d)] = spec.means[class][d] + spec.covariance_scale[class] * z;
            }
            labels.push(class);
            row += 1;
        }
    }
    if spec.label_noise_rate > 0.0 {
        for label in labels.iter_mut() {
            if rng.random_range(0.0..1.0) < spec.label_noise_rate {
                let offset = rng.random_range(1..spec.n_classes);
                *label = (*label + offset) % spec.n_classes;
            }
        }
    }
    Ok(LabeledDataset {
        features,
        labels,
        n_classes: spec.n_classes,
        split_tag: SplitTag::Train,
    })
}

/// Stratified, deterministic partition into train/val/test.
///
/// Fractions must be nonnegative and sum to 1; per class, val and test
/// take the floor of their share and train absorbs the remainder, so
/// proportions are preserved within one sample per class.
pub fn train_val_test_split(
    ds: &LabeledDataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    if fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::InvalidArgument("split fractions must be nonnegative".into()));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "split fractions sum to {sum}, expected 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, l) in ds.labels.iter().enumerate() {
        per_class[*l].push(i);
    }
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for indices in per_class.iter_mut() {
        indices.shuffle(&mut rng);
        let n = indices.len();
        let n_val = (fractions[1] * n as f64).floor() as usize;
        let n_test = (fractions[2] * n as f64).floor() as usize;
        let n_train = n - n_val - n_test;
        for (slot, count) in [(0, n_train), (1, n_val), (2, n_test)] {
            if fractions[slot] > 0.0 && count == 0 {
                return Err(Error::InvalidArgument(format!(
                    "a class with {n} samples is too small to stratify into fraction {}",
                    fractions[slot]
                )));
            }
        }
        parts[0].extend(&indices[..n_train]);
        parts[1].extend(&indices[n_train..n_train + n_val]);
        parts[2].extend(&indices[n_train + n_val..]);
    }
    let take = |idx: &[usize], tag: SplitTag| -> LabeledDataset {
        let mut features = Array2::zeros((idx.len(), ds.dim()));
        let mut labels = Vec::with_capacity(idx.len());
        for (r, i) in idx.iter().enumerate() {
            features.row_mut(r).assign(&ds.features.row(*i));
            labels.push(ds.labels[*i]);
        }
        LabeledDataset {
            features,
            labels,
            n_classes: ds.n_classes,
            split_tag: tag,
        }
    };
    Ok((
        take(&parts[0], SplitTag::Train),
        take(&parts[1], SplitTag::Val),
        take(&parts[2], SplitTag::Test),
    ))
}

/// Corruption families applied to features only; labels never change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    UniformNoise,
    FeatureMask,
    FeatureScale,
}

/// Severity parameters per level 1..=5, strictly increasing. Noise levels
/// are multiples of the dataset's feature scale; mask levels are the
/// fraction of coordinates zeroed; scale levels are global multipliers.
pub const GAUSSIAN_NOISE_SIGMA: [f64; 5] = [0.1, 0.2, 0.4, 0.8, 1.6];
pub const UNIFORM_NOISE_AMPLITUDE: [f64; 5] = [0.2, 0.4, 0.8, 1.6, 3.2];
pub const FEATURE_MASK_FRACTION: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const FEATURE_SCALE_FACTOR: [f64; 5] = [1.25, 1.5, 2.0, 3.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1 (lightest) through 5 (heaviest).
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::InvalidSpec(format!(
                "corruption severity {} outside 1..=5",
                self.severity
            )));
        }
        Ok(())
    }
}

/// Perturbs the features per the corruption table; size and labels are
/// untouched.
pub fn corrupt(ds: &LabeledDataset, spec: &CorruptionSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level = (spec.severity - 1) as usize;
    let scale = ds.feature_std();
    let mut features = ds.features.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = GAUSSIAN_NOISE_SIGMA[level] * scale;
            for v in features.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
        }
        CorruptionKind::UniformNoise => {
            let amp = UNIFORM_NOISE_AMPLITUDE[level] * scale;
            for v in features.iter_mut() {
                *v += rng.random_range(-amp..amp);
            }
        }
        CorruptionKind::FeatureMask => {
            let d = ds.dim();
            let n_masked = ((FEATURE_MASK_FRACTION[level] * d as f64).ceil() as usize).min(d);
            let mut coords: Vec<usize> = (0..d).collect();
            for mut row in features.rows_mut() {
                coords.shuffle(&mut rng);
                for c in &coords[..n_masked] {
                    row[*c] = 0.0;
                }
            }
        }
        CorruptionKind::FeatureScale => {
            let factor = FEATURE_SCALE_FACTOR[level];
            features.mapv_inplace(|v| v * factor);
        }
    }
    Ok(LabeledDataset {
        features,
        labels: ds.labels.clone(),
        n_classes: ds.n_classes,
        split_tag: ds.split_tag,
    })
}

/// In-distribution test data plus near and far OOD feature sets.
#[derive(Debug, Clone)]
pub struct OodSplits {
    pub in_dist: LabeledDataset,
    /// Held-out components interleaved among the training means.
    pub near: Array2<f64>,
    /// Components displaced far outside the training support.
    pub far: Array2<f64>,
}

/// Builds the detection splits for a mixture. Near-OOD components sit at
/// midpoints between consecutive training means (domain-similar); far-OOD
/// components are the training means displaced by a large constant offset.
/// OOD samples carry no labels and must never reach training.
pub fn make_ood_splits(spec: &MixtureSpec, seed: u64) -> Result<OodSplits> {
    spec.validate()?;
    let mut in_spec = spec.clone();
    in_spec.seed = seed;
    let mut in_dist = make_gaussian_mixture(&in_spec)?;
    in_dist.split_tag = SplitTag::Test;

    let k = spec.n_classes;
    let near_means: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let a = &spec.means[i];
            let b = &spec.means[(i + 1) % k];
            a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect()
        })
        .collect();

    // Far components are pushed out from the centroid along the inter-class
    // midpoint directions. Those rays track the extended decision
    // boundaries, where a trained classifier stays unconfident, so maximum
    // softmax probability remains a usable detection score; a plain radial
    // displacement would land in a single class's saturated half-space and
    // look maximally confident.
    let centroid: Vec<f64> = (0..spec.dim)
        .map(|d| spec.means.iter().map(|m| m[d]).sum::<f64>() / k as f64)
        .collect();
    const FAR_FACTOR: f64 = 6.0;
    let far_means: Vec<Vec<f64>> = near_means
        .iter()
        .map(|m| {
            m.iter()
                .zip(&centroid)
                .map(|(x, c)| c + FAR_FACTOR * (x - c))
                .collect()
        })
        .collect();

    let avg_scale =
        spec.covariance_scale.iter().sum::<f64>() / spec.covariance_scale.len() as f64;
    let draw = |means: &[Vec<f64>], scale: f64, seed: u64| -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = means.len() * spec.samples_per_class;
        let mut out = Array2::zeros((n, spec.dim));
        let mut row = 0;
        for mean in means {
            for _ in 0..spec.samples_per_class {
                for d in 0..spec.dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    out[(row, d)] = mean[d] + scale * z;
                }
                row += 1;
            }
        }
        out
    };
    let near = draw(&near_means, avg_scale, seed.wrapping_add(1));
    // Keep the far components tight so the samples stay on the boundary
    // rays rather than spilling into the adjacent saturated regions.
    let far = draw(&far_means, 0.25 * avg_scale, seed.wrapping_add(2));
    Ok(OodSplits { in_dist, near, far })
}

/// Writes `f0..f{D-1},label` rows with round-trip-exact decimal floats.
pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..ds.dim())
        .map(|d| format!("f{d}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (row, label) in ds.features.rows().into_iter().zip(&ds.labels) {
        let mut cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        cells.push(label.to_string());
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Parses a `f0..f{D-1},label[,ood]` file. The class count is inferred as
/// `max label + 1`; rows flagged `ood = 1` are excluded from the labeled
/// data and returned separately.
pub fn load_csv(path: &Path) -> Result<(LabeledDataset, Option<Array2<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::CsvFormat {
            line: 1,
            detail: "empty file".into(),
        })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_ood = cols.last() == Some(&"ood");
    let n_features = cols.len() - 1 - usize::from(has_ood);
    for (d, col) in cols[..n_features].iter().enumerate() {
        if *col != format!("f{d}") {
            return Err(Error::CsvFormat {
                line: 1,
                detail: format!("expected header column f{d}, found {col:?}"),
            });
        }
    }
    if cols.get(n_features) != Some(&"label") {
        return Err(Error::CsvFormat {
            line: 1,
            detail: "missing label column".into(),
        });
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut ood_rows = Vec::new();
    let mut n_rows = 0;
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != cols.len() {
            return Err(Error::CsvFormat {
                line: line_no,
                detail: format!("expected {} cells, found {}", cols.len(), cells.len()),
            });
        }
        let mut row = Vec::with_capacity(n_features);
        for cell in &cells[..n_features] {
            let v: f64 = cell.parse().map_err(|_| Error::CsvFormat {
                line: line_no,
                detail: format!("non-numeric feature cell {cell:?}"),
            })?;
            row.push(v);
        }
        let is_ood = if has_ood {
            match cells[cols.len() - 1] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::CsvFormat {
                        line: line_no,
                        detail: format!("ood cell must be 0 or 1, found {other:?}"),
                    })
                }
            }
        } else {
            false
        };
        if is_ood {
            ood_rows.push(row);
        } else {
            let label: usize = cells[n_features].parse().map_err(|_| Error::CsvFormat {
                line: line_no,
                detail: format!("non-integer label {:?}", cells[n_features]),
            })?;
            labels.push(label);
            features.push(row);
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::CsvFormat {
            line: 1,
            detail: "no data rows".into(),
        });
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let flat: Vec<f64> = features.iter().flatten().cloned().collect();
    let ds = LabeledDataset {
        features: Array2::from_shape_vec((labels.len(), n_features), flat)
            .map_err(|e| Error::InvalidSpec(e.to_string()))?,
        labels,
        n_classes,
        split_tag: SplitTag::Train,
    };
    ds.validate()?;
    let ood = if ood_rows.is_empty() {
        None
    } else {
        let flat: Vec<f64> = ood_rows.iter().flatten().cloned().collect();
        Some(
            Array2::from_shape_vec((ood_rows.len(), n_features), flat)
                .map_err(|e| Error::InvalidSpec(e.to_string()))?,
        )
    };
    Ok((ds, ood))
}
