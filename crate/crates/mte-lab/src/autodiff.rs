//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The tape is define-by-run: values are computed eagerly as nodes are
//! created, and `backward` walks the recorded graph in reverse. A
//! `detach` node is value-transparent but gradient-opaque, which is the
//! stop-gradient primitive the co-training losses are built on.
//!
//! Scalars are represented as 1x1 matrices.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Parameter,
    /// Element-wise sum of two equally shaped matrices.
    Add(NodeId, NodeId),
    /// B x K matrix plus a 1 x K row, broadcast over rows (bias add).
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Element-wise (Hadamard) product.
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// Row-wise fused log-softmax (log-sum-exp stabilized).
    LogSoftmax(NodeId),
    /// Element-wise power with a fixed exponent.
    PowConst(NodeId, f64),
    /// Multiplication by a fixed scalar.
    Scale(NodeId, f64),
    /// Sum of all entries, producing a 1x1 scalar.
    Sum(NodeId),
    /// Identity on values, opaque to gradients.
    Detach,
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Array2<f64>,
}

/// A define-by-run computation tape.
///
/// Nodes are stored in creation order, which is also a topological order,
/// so `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

/// Gradients produced by [`Tape::backward`].
///
/// Every parameter id has an entry (zero if the seed does not depend on
/// it); intermediate nodes have entries only when they were reached.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a parameter node. Panics if `id` was not
    /// registered as a parameter on the tape that produced `self`.
    pub fn wrt(&self, id: NodeId) -> &Array2<f64> {
        self.grads[id.0]
            .as_ref()
            .expect("parameter gradient missing; was backward run on this tape?")
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node (computed eagerly at creation).
    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node as a plain scalar.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[(0, 0)]
    }

    pub fn parameter_ids(&self) -> &[NodeId] {
        &self.params
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    fn check_finite(&self, value: &Array2<f64>, node: usize) -> Result<()> {
        if value.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { node })
        }
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Result<NodeId> {
        self.check_finite(&value, self.nodes.len())?;
        Ok(self.push(Op::Constant, value))
    }

    pub fn scalar_constant(&mut self, value: f64) -> Result<NodeId> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// A trainable input; `backward` always reports a gradient for it.
    pub fn parameter(&mut self, value: Array2<f64>) -> Result<NodeId> {
        self.check_finite(&value, self.nodes.len())?;
        let id = self.push(Op::Parameter, value);
        self.params.push(id);
        Ok(id)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).dim(), self.value(b).dim());
        if sa != sb {
            return Err(Error::Shape {
                node: self.nodes.len(),
                detail: format!("operands {:?} vs {:?}", sa, sb),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(Op::Add(a, b), v))
    }

    /// `a` (B x K) plus a bias row `b` (1 x K), broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).dim(), self.value(b).dim());
        if sb.0 != 1 || sa.1 != sb.1 {
            return Err(Error::Shape {
                node: self.nodes.len(),
                detail: format!("cannot broadcast row {:?} over {:?}", sb, sa),
            });
        }
        let v = self.value(a) + self.value(b);
        Ok(self.push(Op::AddRow(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).dim(), self.value(b).dim());
        if sa.1 != sb.0 {
            return Err(Error::Shape {
                node: self.nodes.len(),
                detail: format!("matmul {:?} x {:?}", sa, sb),
            });
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).mapv(|x| x.max(0.0));
        Ok(self.push(Op::Relu(a), v))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).mapv(f64::exp);
        Ok(self.push(Op::Exp(a), v))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).mapv(f64::ln);
        Ok(self.push(Op::Log(a), v))
    }

    /// Row-wise log-softmax, stabilized via log-sum-exp.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|z| z - lse);
        }
        Ok(self.push(Op::LogSoftmax(a), v))
    }

    pub fn pow_const(&mut self, a: NodeId, exponent: f64) -> Result<NodeId> {
        let v = if exponent == 0.0 {
            Array2::ones(self.value(a).dim())
        } else {
            self.value(a).mapv(|x| x.powf(exponent))
        };
        Ok(self.push(Op::PowConst(a, exponent), v))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).mapv(|x| x * factor);
        Ok(self.push(Op::Scale(a, factor), v))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        Ok(self.push(Op::Sum(a), Array2::from_elem((1, 1), s)))
    }

    /// New node with the same value; gradients do not flow through it.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).clone();
        Ok(self.push(Op::Detach, v))
    }

    /// Reverse sweep from a scalar seed node. Returns a gradient for every
    /// parameter id (zero where the seed does not depend on the parameter).
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        if self.value(seed).dim() != (1, 1) {
            return Err(Error::SeedNotScalar { node: seed.0 });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant | Op::Parameter | Op::Detach => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let row = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, row);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * self.value(*b));
                    accumulate(&mut grads, *b, &g * self.value(*a));
                }
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, &g * &self.nodes[i].value);
                }
                Op::Log(a) => {
                    accumulate(&mut grads, *a, &g / self.value(*a));
                }
                Op::LogSoftmax(a) => {
                    // dz = g - softmax(z) * rowsum(g)
                    let probs = self.nodes[i].value.mapv(f64::exp);
                    let row_sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *a, &g - &(&probs * &row_sums));
                }
                Op::PowConst(a, c) => {
                    if *c != 0.0 {
                        let d = self.value(*a).mapv(|x| c * x.powf(c - 1.0));
                        accumulate(&mut grads, *a, &g * &d);
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.mapv(|x| x * c));
                }
                Op::Sum(a) => {
                    let val = g[(0, 0)];
                    accumulate(&mut grads, *a, Array2::from_elem(self.value(*a).dim(), val));
                }
            }
            // Grads on intermediate nodes are kept only while needed; put the
            // seed's upstream back so callers can still inspect reached nodes.
            grads[i] = Some(g);
        }

        for pid in &self.params {
            if grads[pid.0].is_none() {
                grads[pid.0] = Some(Array2::zeros(self.value(*pid).dim()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
    match &mut grads[id.0] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

/// Central finite-difference check of analytic gradients.
///
/// `loss` re-evaluates the objective at perturbed parameter settings;
/// `analytic` holds the gradients to verify, one matrix per parameter.
/// The per-coordinate step is `step * max(1, |x|)`. Returns the maximum
/// over all coordinates of `|analytic - fd| / max(1, |analytic|)`.
pub fn check_gradients_fd<F>(
    params: &[Array2<f64>],
    analytic: &[Array2<f64>],
    step: f64,
    mut loss: F,
) -> Result<f64>
where
    F: FnMut(&[Array2<f64>]) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::InvalidArgument(
            "parameter and gradient counts differ".into(),
        ));
    }
    let mut worst = 0.0f64;
    let mut work: Vec<Array2<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        if p.dim() != analytic[pi].dim() {
            return Err(Error::InvalidArgument(format!(
                "gradient {} shape {:?} does not match parameter shape {:?}",
                pi,
                analytic[pi].dim(),
                p.dim()
            )));
        }
        for idx in 0..p.len() {
            let (r, c) = (idx / p.ncols(), idx % p.ncols());
            let x = p[(r, c)];
            let h = step * x.abs().max(1.0);

            work[pi][(r, c)] = x + h;
            let up = loss(&work)?;
            work[pi][(r, c)] = x - h;
            let down = loss(&work)?;
            work[pi][(r, c)] = x;

            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite { node: pi });
            }
            let fd = (up - down) / (2.0 * h);
            let a = analytic[pi][(r, c)];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar(tape: &mut Tape, v: f64) -> NodeId {
        tape.scalar_constant(v).unwrap()
    }

    #[test]
    fn product_value_and_gradients() {
        let mut t = Tape::new();
        let x = t.parameter(array![[2.0]]).unwrap();
        let y = t.parameter(array![[3.0]]).unwrap();
        let p = t.mul(x, y).unwrap();
        assert_eq!(t.scalar(p), 6.0);
        let g = t.backward(p).unwrap();
        assert_eq!(g.wrt(x)[(0, 0)], 3.0);
        assert_eq!(g.wrt(y)[(0, 0)], 2.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let z = t.constant(array![[0.0, 0.0, 0.0]]).unwrap();
        let lp = t.log_softmax(z).unwrap();
        let p = t.exp(lp).unwrap();
        for v in t.value(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_log_integers() {
        // logits [ln 1, ln 2, ln 3] -> probabilities [1/6, 2/6, 3/6]
        let mut t = Tape::new();
        let z = t
            .constant(array![[0.0, 2.0f64.ln(), 3.0f64.ln()]])
            .unwrap();
        let lp = t.log_softmax(z).unwrap();
        let p = t.exp(lp).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (got, want) in t.value(p).iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn detach_is_value_transparent() {
        let mut t = Tape::new();
        let x = t.constant(array![[0.2, 0.8]]).unwrap();
        let d = t.detach(x).unwrap();
        assert_eq!(t.value(d), t.value(x));
    }

    #[test]
    fn detach_blocks_gradient() {
        // f(u, x) = u * x with u = detach(x), x = 2 -> df/dx = u = 2
        let mut t = Tape::new();
        let x = t.parameter(array![[2.0]]).unwrap();
        let u = t.detach(x).unwrap();
        let f = t.mul(u, x).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(x)[(0, 0)], 2.0);
    }

    #[test]
    fn gradient_through_pure_detach_chain_is_zero() {
        let mut t = Tape::new();
        let x = t.parameter(array![[1.5]]).unwrap();
        let d = t.detach(x).unwrap();
        let y = t.mul(d, d).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x)[(0, 0)], 0.0);
    }

    #[test]
    fn seed_must_be_scalar() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0]]).unwrap();
        assert!(matches!(t.backward(x), Err(Error::SeedNotScalar { .. })));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0]]).unwrap();
        let b = t.constant(array![[1.0], [2.0]]).unwrap();
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(t.mul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut t = Tape::new();
        assert!(matches!(
            t.constant(array![[f64::NAN]]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn fd_quadratic() {
        // f(x) = x^2 at x = 3: analytic 6
        let params = [array![[3.0]]];
        let analytic = [array![[6.0]]];
        let worst = check_gradients_fd(&params, &analytic, 1e-5, |p| {
            Ok(p[0][(0, 0)] * p[0][(0, 0)])
        })
        .unwrap();
        assert!(worst <= 1e-6, "discrepancy {worst}");
    }

    #[test]
    fn fd_linear_is_exact() {
        let params = [array![[4.0]]];
        let analytic = [array![[3.0]]];
        let worst =
            check_gradients_fd(&params, &analytic, 1e-5, |p| Ok(3.0 * p[0][(0, 0)])).unwrap();
        assert!(worst <= 1e-10, "discrepancy {worst}");
    }

    #[test]
    fn matmul_and_relu_match_fd() {
        let w = array![[0.3, -0.7], [1.1, 0.4]];
        let x = array![[0.5, -0.2], [0.9, 1.3]];
        let build = |w: &Array2<f64>| -> Result<(Tape, NodeId, NodeId)> {
            let mut t = Tape::new();
            let wp = t.parameter(w.clone())?;
            let xc = t.constant(x.clone())?;
            let h = t.matmul(xc, wp)?;
            let r = t.relu(h)?;
            let s = t.sum(r)?;
            Ok((t, wp, s))
        };
        let (t, wp, s) = build(&w).unwrap();
        let grads = t.backward(s).unwrap();
        let analytic = [grads.wrt(wp).clone()];
        let worst = check_gradients_fd(&[w.clone()], &analytic, 1e-6, |p| {
            let (t, _, s) = build(&p[0])?;
            Ok(t.scalar(s))
        })
        .unwrap();
        assert!(worst <= 1e-7, "discrepancy {worst}");
    }

    #[test]
    fn softmax_jacobian_rows_sum_to_zero() {
        // d(sum_k softmax_k)/dz_i must vanish for every i.
        let mut t = Tape::new();
        let z = t.parameter(array![[0.3, -1.2, 2.5, 0.0]]).unwrap();
        let lp = t.log_softmax(z).unwrap();
        let p = t.exp(lp).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        for v in g.wrt(z) {
            assert!(v.abs() <= 1e-12, "row sum {v}");
        }
    }

    #[test]
    fn zero_scale_still_reports_parameter_gradient() {
        let mut t = Tape::new();
        let x = t.parameter(array![[1.0]]).unwrap();
        let c = scalar(&mut t, 5.0);
        let y = t.mul(x, c).unwrap();
        let _ = y;
        let unused = t.parameter(array![[7.0]]).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(unused)[(0, 0)], 0.0);
    }
}
