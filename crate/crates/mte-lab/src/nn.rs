//! Small feed-forward classifiers and the SGD-with-momentum optimizer.
//!
//! The primary and auxiliary backbones are plain ReLU MLPs described by a
//! [`ModelSpec`]; parameters live in a flat array inside a versioned
//! [`ModelCheckpoint`] so persistence is a trivial JSON round trip.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Architecture of an MLP classifier: input dim, hidden widths, class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[input_dim, hidden..., n_classes]`; at least two entries.
    pub layer_widths: Vec<usize>,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(layer_widths: Vec<usize>, init_seed: u64) -> Self {
        Self {
            layer_widths,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidSpec(
                "model needs at least input and output widths".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidSpec("zero-width layer".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Total parameter count: sum of `w_i * w_{i+1} + w_{i+1}` per layer.
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Training provenance carried inside a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub config_digest: String,
    pub epoch: usize,
}

/// A model spec plus its flat parameter array.
///
/// Layout per layer: weight matrix `w_in x w_out` row-major, then the bias
/// row of length `w_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub train_meta: TrainMeta,
}

/// Fan-in-scaled uniform initialization: weights in `±sqrt(6 / fan_in)`,
/// biases zero, deterministic given the spec's init seed.
pub fn init_params(spec: &ModelSpec) -> Result<ModelCheckpoint> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut params = Vec::with_capacity(spec.param_count());
    for w in spec.layer_widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            params.push(rng.random_range(-bound..bound));
        }
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Ok(ModelCheckpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        spec: spec.clone(),
        params,
        train_meta: TrainMeta::default(),
    })
}

/// Views of one layer's weights and bias within a flat parameter slice.
fn layer_slices<'a>(spec: &ModelSpec, params: &'a [f64]) -> Vec<(&'a [f64], &'a [f64])> {
    let mut out = Vec::with_capacity(spec.n_layers());
    let mut off = 0;
    for w in spec.layer_widths.windows(2) {
        let nw = w[0] * w[1];
        out.push((&params[off..off + nw], &params[off + nw..off + nw + w[1]]));
        off += nw + w[1];
    }
    out
}

/// Plain forward pass producing the logits matrix (B x K).
pub fn forward_logits(ckpt: &ModelCheckpoint, batch: &Array2<f64>) -> Result<Array2<f64>> {
    let spec = &ckpt.spec;
    if batch.ncols() != spec.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "batch has {} features, model expects {}",
            batch.ncols(),
            spec.input_dim()
        )));
    }
    if ckpt.params.len() != spec.param_count() {
        return Err(Error::InvalidSpec(format!(
            "checkpoint holds {} parameters, spec requires {}",
            ckpt.params.len(),
            spec.param_count()
        )));
    }
    let mut h = batch.clone();
    let layers = layer_slices(spec, &ckpt.params);
    let n_layers = layers.len();
    for (li, (wflat, bflat)) in layers.into_iter().enumerate() {
        let (w_in, w_out) = (spec.layer_widths[li], spec.layer_widths[li + 1]);
        let w = Array2::from_shape_vec((w_in, w_out), wflat.to_vec()).unwrap();
        let b = Array2::from_shape_vec((1, w_out), bflat.to_vec()).unwrap();
        h = h.dot(&w) + &b;
        if li + 1 < n_layers {
            h.mapv_inplace(|x| x.max(0.0));
        }
    }
    Ok(h)
}

/// A model's forward pass recorded on an autodiff tape.
pub struct GraphModel {
    /// One `(weight, bias)` node pair per layer, in layer order.
    /// Empty when the model was recorded as constants.
    pub param_nodes: Vec<(NodeId, NodeId)>,
    pub logits: NodeId,
    pub log_probs: NodeId,
}

impl GraphModel {
    /// Collects backward results into a flat gradient array matching the
    /// checkpoint parameter layout.
    pub fn flat_grads(&self, spec: &ModelSpec, grads: &Gradients) -> Vec<f64> {
        let mut flat = Vec::with_capacity(spec.param_count());
        for (w, b) in &self.param_nodes {
            flat.extend(grads.wrt(*w).iter().cloned());
            flat.extend(grads.wrt(*b).iter().cloned());
        }
        flat
    }
}

/// Records the forward pass on `tape`. With `trainable` the weights become
/// parameter nodes; otherwise they are constants (gradient-free).
pub fn build_forward(
    tape: &mut Tape,
    ckpt: &ModelCheckpoint,
    batch: NodeId,
    trainable: bool,
) -> Result<GraphModel> {
    let spec = &ckpt.spec;
    spec.validate()?;
    if ckpt.params.len() != spec.param_count() {
        return Err(Error::InvalidSpec(format!(
            "checkpoint holds {} parameters, spec requires {}",
            ckpt.params.len(),
            spec.param_count()
        )));
    }
    let mut param_nodes = Vec::new();
    let mut h = batch;
    let n_layers = spec.n_layers();
    let layers = layer_slices(spec, &ckpt.params);
    for (li, (wflat, bflat)) in layers.into_iter().enumerate() {
        let (w_in, w_out) = (spec.layer_widths[li], spec.layer_widths[li + 1]);
        let w = Array2::from_shape_vec((w_in, w_out), wflat.to_vec()).unwrap();
        let b = Array2::from_shape_vec((1, w_out), bflat.to_vec()).unwrap();
        let (wn, bn) = if trainable {
            (tape.parameter(w)?, tape.parameter(b)?)
        } else {
            (tape.constant(w)?, tape.constant(b)?)
        };
        if trainable {
            param_nodes.push((wn, bn));
        }
        let prod = tape.matmul(h, wn)?;
        h = tape.add_row(prod, bn)?;
        if li + 1 < n_layers {
            h = tape.relu(h)?;
        }
    }
    let log_probs = tape.log_softmax(h)?;
    Ok(GraphModel {
        param_nodes,
        logits: h,
        log_probs,
    })
}

/// Momentum buffers plus the hyper-parameters of the update rule.
#[derive(Debug, Clone)]
pub struct OptState {
    pub velocity: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptState {
    pub fn new(n_params: usize, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: vec![0.0; n_params],
            lr,
            momentum,
            weight_decay,
        }
    }
}

/// One SGD-with-momentum step, weight decay coupled into the gradient:
/// `v <- momentum * v + (grad + wd * param); param <- param - lr * v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], opt: &mut OptState) -> Result<()> {
    if params.len() != grads.len() || params.len() != opt.velocity.len() {
        return Err(Error::InvalidArgument(format!(
            "sgd_step length mismatch: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            opt.velocity.len()
        )));
    }
    if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite gradient at coordinate {pos}"
        )));
    }
    for i in 0..params.len() {
        let g = grads[i] + opt.weight_decay * params[i];
        opt.velocity[i] = opt.momentum * opt.velocity[i] + g;
        params[i] -= opt.lr * opt.velocity[i];
    }
    Ok(())
}

/// Piecewise-constant learning-rate schedule: the initial rate is held for
/// `warm_epochs`, then multiplied by `decay_factor` every `decay_interval`
/// epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub warm_epochs: usize,
    pub decay_interval: usize,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            warm_epochs: 0,
            decay_interval: 1,
            decay_factor: 1.0,
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.warm_epochs || self.decay_interval == 0 {
            self.initial
        } else {
            let decays = (epoch - self.warm_epochs) / self.decay_interval + 1;
            self.initial * self.decay_factor.powi(decays as i32)
        }
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(ckpt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let json = std::fs::read_to_string(path)?;
    let ckpt: ModelCheckpoint = serde_json::from_str(&json)?;
    if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::InvalidSpec(format!(
            "unsupported checkpoint format version {}",
            ckpt.format_version
        )));
    }
    ckpt.spec.validate()?;
    if ckpt.params.len() != ckpt.spec.param_count() {
        return Err(Error::InvalidSpec(format!(
            "checkpoint holds {} parameters, spec requires {}",
            ckpt.params.len(),
            ckpt.spec.param_count()
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn param_count_small_spec() {
        let spec = ModelSpec::new(vec![2, 3], 0);
        assert_eq!(spec.param_count(), 9);
        assert_eq!(init_params(&spec).unwrap().params.len(), 9);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::new(vec![4, 8, 3], 42);
        assert_eq!(init_params(&spec).unwrap(), init_params(&spec).unwrap());
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let spec = ModelSpec::new(vec![2, 4, 3], 7);
        let ckpt = init_params(&spec).unwrap();
        let layers = layer_slices(&spec, &ckpt.params);
        let bounds = [(6.0f64 / 2.0).sqrt(), (6.0f64 / 4.0).sqrt()];
        for ((w, b), bound) in layers.into_iter().zip(bounds) {
            assert!(w.iter().all(|v| v.abs() < bound));
            assert!(b.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn zero_width_layer_rejected() {
        assert!(init_params(&ModelSpec::new(vec![2, 0, 3], 0)).is_err());
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let spec = ModelSpec::new(vec![2, 4], 0);
        let mut ckpt = init_params(&spec).unwrap();
        ckpt.params.iter_mut().for_each(|p| *p = 0.0);
        let logits = forward_logits(&ckpt, &array![[1.0, -2.0]]).unwrap();
        assert!(logits.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_batch_row_independent() {
        let spec = ModelSpec::new(vec![3, 5, 2], 9);
        let ckpt = init_params(&spec).unwrap();
        let row = array![[0.3, -0.1, 0.8]];
        let single = forward_logits(&ckpt, &row).unwrap();
        let dup = forward_logits(&ckpt, &array![[0.3, -0.1, 0.8], [0.3, -0.1, 0.8]]).unwrap();
        for col in 0..2 {
            assert_eq!(single[(0, col)], dup[(0, col)]);
            assert_eq!(single[(0, col)], dup[(1, col)]);
        }
    }

    /// Straight-line scalar reference evaluation, independent of ndarray.
    fn reference_forward(spec: &ModelSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        let mut off = 0;
        for (li, widths) in spec.layer_widths.windows(2).enumerate() {
            let (w_in, w_out) = (widths[0], widths[1]);
            let mut next = vec![0.0; w_out];
            for j in 0..w_out {
                let mut acc = 0.0;
                for (i, hv) in h.iter().enumerate() {
                    acc += hv * params[off + i * w_out + j];
                }
                acc += params[off + w_in * w_out + j];
                next[j] = if li + 1 < spec.n_layers() {
                    acc.max(0.0)
                } else {
                    acc
                };
            }
            h = next;
            off += w_in * w_out + w_out;
        }
        h
    }

    #[test]
    fn forward_matches_scalar_reference() {
        let spec = ModelSpec::new(vec![3, 6, 4], 13);
        let ckpt = init_params(&spec).unwrap();
        let input = [0.4, -1.2, 2.0];
        let want = reference_forward(&spec, &ckpt.params, &input);
        let got = forward_logits(&ckpt, &array![[0.4, -1.2, 2.0]]).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let spec = ModelSpec::new(vec![2, 5, 3], 21);
        let ckpt = init_params(&spec).unwrap();
        let batch = array![[0.1, -0.5], [1.2, 0.3]];
        let plain = forward_logits(&ckpt, &batch).unwrap();
        let mut tape = Tape::new();
        let b = tape.constant(batch).unwrap();
        let gm = build_forward(&mut tape, &ckpt, b, true).unwrap();
        for (a, b) in tape.value(gm.logits).iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_zero_grad_is_identity() {
        let mut params = vec![1.0, -2.0];
        let mut opt = OptState::new(2, 0.1, 0.9, 0.0);
        sgd_step(&mut params, &[0.0, 0.0], &mut opt).unwrap();
        assert_eq!(params, vec![1.0, -2.0]);
    }

    #[test]
    fn sgd_plain_step() {
        let mut params = vec![1.0];
        let mut opt = OptState::new(1, 0.1, 0.0, 0.0);
        sgd_step(&mut params, &[1.0], &mut opt).unwrap();
        assert!((params[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_only() {
        let mut params = vec![1.0];
        let mut opt = OptState::new(1, 0.1, 0.0, 0.0005);
        sgd_step(&mut params, &[0.0], &mut opt).unwrap();
        assert!((params[0] - 0.99995).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_grads() {
        let mut params = vec![1.0];
        let mut opt = OptState::new(1, 0.1, 0.9, 0.0);
        assert!(sgd_step(&mut params, &[f64::NAN], &mut opt).is_err());
    }

    #[test]
    fn lr_schedule_examples() {
        let s = LrSchedule {
            initial: 0.1,
            warm_epochs: 10,
            decay_interval: 5,
            decay_factor: 0.5,
        };
        assert_eq!(s.lr_at_epoch(0), 0.1);
        assert_eq!(s.lr_at_epoch(9), 0.1);
        assert!((s.lr_at_epoch(21) - 0.0125).abs() < 1e-15);
        let c = LrSchedule::constant(0.01);
        assert_eq!(c.lr_at_epoch(0), 0.01);
        assert_eq!(c.lr_at_epoch(100), 0.01);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let spec = ModelSpec::new(vec![3, 7, 2], 5);
        let ckpt = init_params(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.params.len(), loaded.params.len());
        for (a, b) in ckpt.params.iter().zip(&loaded.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(ckpt, loaded);
    }
}
