//! Verifies the reverse-mode tape against central finite differences on a
//! real two-layer network, and demonstrates the stop-gradient identity
//! that makes co-training equivalent to aligning the deployed mixture.
//!
//! Run with `cargo run --example gradient_check`.

use mte_lab::autodiff::{check_gradients_fd, Tape};
use mte_lab::losses::{cross_entropy_node, kl_from_probs_node, kl_node, LabelBatch};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mte_lab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (batch, d, hidden, k) = (6, 4, 5, 3);
    let w1: Array2<f64> = Array2::from_shape_fn((d, hidden), |_| rng.random_range(-0.8..0.8));
    let w2: Array2<f64> = Array2::from_shape_fn((hidden, k), |_| rng.random_range(-0.8..0.8));
    let x: Array2<f64> = Array2::from_shape_fn((batch, d), |_| rng.random_range(-1.0..1.0));
    let labels = LabelBatch::new(vec![0, 1, 2, 0, 1, 2], k)?;

    let forward = |params: &[Array2<f64>]| -> mte_lab::Result<f64> {
        let mut t = Tape::new();
        let w1n = t.parameter(params[0].clone())?;
        let w2n = t.parameter(params[1].clone())?;
        let xn = t.constant(x.clone())?;
        let h = t.matmul(xn, w1n)?;
        let h = t.relu(h)?;
        let z = t.matmul(h, w2n)?;
        let logp = t.log_softmax(z)?;
        let loss = cross_entropy_node(&mut t, logp, &labels)?;
        Ok(t.scalar(loss))
    };

    // Analytic gradients from one backward pass.
    let mut t = Tape::new();
    let w1n = t.parameter(w1.clone())?;
    let w2n = t.parameter(w2.clone())?;
    let xn = t.constant(x.clone())?;
    let h = t.matmul(xn, w1n)?;
    let h = t.relu(h)?;
    let z = t.matmul(h, w2n)?;
    let logp = t.log_softmax(z)?;
    let loss = cross_entropy_node(&mut t, logp, &labels)?;
    let grads = t.backward(loss)?;
    let analytic = vec![grads.wrt(w1n).clone(), grads.wrt(w2n).clone()];

    let worst = check_gradients_fd(&[w1.clone(), w2.clone()], &analytic, 1e-6, forward)?;
    println!("cross-entropy through a relu MLP");
    println!("  worst relative gradient error vs finite differences: {worst:.3e}");

    // Stop-gradient identity: with the primary's share of the mixture
    // frozen, the gradient of KL(mixture || primary) equals beta times the
    // gradient of KL(auxiliary || primary).
    let beta = 0.3;
    let zg: Array2<f64> = Array2::from_shape_fn((batch, k), |_| rng.random_range(-1.5..1.5));
    let mut t = Tape::new();
    let w1n = t.parameter(w1.clone())?;
    let w2n = t.parameter(w2.clone())?;
    let xn = t.constant(x)?;
    let h = t.matmul(xn, w1n)?;
    let h = t.relu(h)?;
    let z = t.matmul(h, w2n)?;
    let f_logp = t.log_softmax(z)?;
    let zgn = t.constant(zg)?;
    let g_logp = t.log_softmax(zgn)?;

    let f_probs = t.exp(f_logp)?;
    let f_frozen = t.detach(f_probs)?;
    let f_part = t.scale(f_frozen, 1.0 - beta)?;
    let g_probs = t.exp(g_logp)?;
    let g_part = t.scale(g_probs, beta)?;
    let mix = t.add(f_part, g_part)?;

    let lhs = kl_from_probs_node(&mut t, mix, f_logp)?;
    let rhs = kl_node(&mut t, g_logp, f_logp)?;
    let lhs_grads = t.backward(lhs)?;
    let rhs_grads = t.backward(rhs)?;
    let mut worst = 0.0f64;
    for id in [w1n, w2n] {
        for (l, r) in lhs_grads.wrt(id).iter().zip(rhs_grads.wrt(id)) {
            let want = beta * r;
            worst = worst.max((l - want).abs() / want.abs().max(1e-12));
        }
    }
    println!("stop-gradient mixture identity at beta = {beta}");
    println!("  worst relative deviation from beta * grad KL(g || f): {worst:.3e}");
    Ok(())
}
