//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records a fixed computation graph built from a small set of
//! primitives (matrix multiply, elementwise add/multiply, sigmoid, rectifier,
//! row normalization, reduce-sum, natural log, binary cross-entropy). Leaves
//! are bound by name at [`Tape::forward`] time, so the same tape can be
//! re-evaluated every optimization step without rebuilding it. All entropies
//! and losses are in nats.

use ndarray::Array2;
use std::collections::HashMap;
use thiserror::Error;

/// Dense row-major matrix of `f64`. Scalars are 1x1 matrices.
pub type Matrix = Array2<f64>;

/// Leaf bindings for a forward pass, keyed by leaf name.
pub type LeafValues = HashMap<String, Matrix>;

const ROW_NORM_EPS: f64 = 1e-8;
const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("leaf '{0}' not bound")]
    UnboundLeaf(String),
    #[error("leaf '{name}' bound with shape {got:?}, tape declares {want:?}")]
    LeafShape {
        name: String,
        want: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward requires a scalar output, tape output has shape {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error("no gradient recorded for leaf '{0}'")]
    UnknownLeaf(String),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf(String),
    Constant(Matrix),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Transpose(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    RowNormalize(NodeId),
    ReduceSum(NodeId),
    Ln(NodeId),
    Bce { target: f64, prediction: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Transpose(_) => "transpose",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::RowNormalize(_) => "row_normalize",
            Op::ReduceSum(_) => "reduce_sum",
            Op::Ln(_) => "ln",
            Op::Bce { .. } => "bce",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: (usize, usize),
}

/// A recorded computation. Nodes are append-only and parents always precede
/// children, so forward evaluation is a single in-order sweep. The node pushed
/// last is the tape output.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: (usize, usize)) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    /// Declares a named differentiable input of the given shape.
    pub fn leaf(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Leaf(name.to_string()), (rows, cols))
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        let shape = (value.nrows(), value.ncols());
        self.push(Op::Constant(value), shape)
    }

    /// 1x1 constant.
    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Matrix::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul inner dimensions {ac} vs {br}");
        self.push(Op::MatMul(a, b), (ar, bc))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add operand shapes differ");
        let shape = self.shape(a);
        self.push(Op::Add(a, b), shape)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul operand shapes differ");
        let shape = self.shape(a);
        self.push(Op::Mul(a, b), shape)
    }

    /// Multiplies every entry by a fixed constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let (r, c) = self.shape(a);
        let k = self.constant(Matrix::from_elem((r, c), factor));
        self.mul(a, k)
    }

    /// `a - b`, via `a + (-1) * b`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Transpose(a), (c, r))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a);
        self.push(Op::Sigmoid(a), shape)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a);
        self.push(Op::Relu(a), shape)
    }

    /// Divides each row by its sum plus a small stabilizer.
    pub fn row_normalize(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a);
        self.push(Op::RowNormalize(a), shape)
    }

    /// Sums all entries into a 1x1 scalar.
    pub fn reduce_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ReduceSum(a), (1, 1))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a);
        self.push(Op::Ln(a), shape)
    }

    /// Binary cross-entropy of a scalar prediction against a fixed target,
    /// in nats. The prediction is clamped to `[1e-7, 1 - 1e-7]` before the
    /// logs; outside the clamp range the gradient is zero.
    pub fn bce(&mut self, target: f64, prediction: NodeId) -> NodeId {
        assert_eq!(
            self.shape(prediction),
            (1, 1),
            "bce expects a scalar prediction"
        );
        self.push(Op::Bce { target, prediction }, (1, 1))
    }

    /// `min(a, ceiling)` built as `ceiling - relu(ceiling - a)`.
    pub fn cap(&mut self, a: NodeId, ceiling: f64) -> NodeId {
        let (r, c) = self.shape(a);
        let cap = self.constant(Matrix::from_elem((r, c), ceiling));
        let diff = self.sub(cap, a);
        let rect = self.relu(diff);
        self.sub(cap, rect)
    }

    /// Evaluates every node in order, returning the cached values.
    pub fn forward(&self, leaves: &LeafValues) -> Result<Evaluation<'_>, TapeError> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Leaf(name) => {
                    let bound = leaves
                        .get(name)
                        .ok_or_else(|| TapeError::UnboundLeaf(name.clone()))?;
                    let got = (bound.nrows(), bound.ncols());
                    if got != node.shape {
                        return Err(TapeError::LeafShape {
                            name: name.clone(),
                            want: node.shape,
                            got,
                        });
                    }
                    bound.clone()
                }
                Op::Constant(v) => v.clone(),
                Op::MatMul(a, b) => values[a.0].dot(&values[b.0]),
                Op::Add(a, b) => &values[a.0] + &values[b.0],
                Op::Mul(a, b) => &values[a.0] * &values[b.0],
                Op::Transpose(a) => values[a.0].t().to_owned(),
                Op::Sigmoid(a) => values[a.0].mapv(sigmoid),
                Op::Relu(a) => values[a.0].mapv(|x| if x > 0.0 { x } else { 0.0 }),
                Op::RowNormalize(a) => {
                    let x = &values[a.0];
                    let mut y = x.clone();
                    for mut row in y.rows_mut() {
                        let denom = row.sum() + ROW_NORM_EPS;
                        row.mapv_inplace(|v| v / denom);
                    }
                    y
                }
                Op::ReduceSum(a) => Matrix::from_elem((1, 1), values[a.0].sum()),
                Op::Ln(a) => values[a.0].mapv(f64::ln),
                Op::Bce { target, prediction } => {
                    let p = values[prediction.0][(0, 0)].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    let loss = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
                    Matrix::from_elem((1, 1), loss)
                }
            };
            if value.iter().any(|v| !v.is_finite()) {
                return Err(TapeError::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            values.push(value);
        }
        Ok(Evaluation { tape: self, values })
    }
}

/// Gradients of a scalar tape output with respect to requested leaves.
#[derive(Debug, Clone)]
pub struct Gradients(HashMap<String, Matrix>);

impl Gradients {
    pub fn get(&self, leaf: &str) -> Result<&Matrix, TapeError> {
        self.0
            .get(leaf)
            .ok_or_else(|| TapeError::UnknownLeaf(leaf.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }
}

/// Forward results for one binding of the leaves. Holds every intermediate
/// value so backward passes can be re-run without touching the forward state.
#[derive(Debug)]
pub struct Evaluation<'t> {
    tape: &'t Tape,
    values: Vec<Matrix>,
}

impl Evaluation<'_> {
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    /// Value of the node pushed last.
    pub fn output(&self) -> &Matrix {
        self.values.last().expect("empty tape")
    }

    pub fn output_scalar(&self) -> f64 {
        let out = self.output();
        assert_eq!((out.nrows(), out.ncols()), (1, 1), "output is not scalar");
        out[(0, 0)]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!((v.nrows(), v.ncols()), (1, 1), "node is not scalar");
        v[(0, 0)]
    }

    /// Reverse sweep from the scalar output, accumulating exact adjoints.
    pub fn backward(&self, wrt: &[&str]) -> Result<Gradients, TapeError> {
        let nodes = &self.tape.nodes;
        let out_shape = nodes.last().map(|n| n.shape).unwrap_or((0, 0));
        if out_shape != (1, 1) {
            return Err(TapeError::NonScalarOutput(out_shape));
        }

        let mut adjoints: Vec<Option<Matrix>> = vec![None; nodes.len()];
        adjoints[nodes.len() - 1] = Some(Matrix::from_elem((1, 1), 1.0));

        for idx in (0..nodes.len()).rev() {
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            match &nodes[idx].op {
                Op::Leaf(_) | Op::Constant(_) => {
                    adjoints[idx] = Some(grad);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = grad.dot(&self.values[b.0].t());
                    let db = self.values[a.0].t().dot(&grad);
                    accumulate(&mut adjoints, *a, da);
                    accumulate(&mut adjoints, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, grad.clone());
                    accumulate(&mut adjoints, *b, grad);
                }
                Op::Mul(a, b) => {
                    let da = &grad * &self.values[b.0];
                    let db = &grad * &self.values[a.0];
                    accumulate(&mut adjoints, *a, da);
                    accumulate(&mut adjoints, *b, db);
                }
                Op::Sigmoid(a) => {
                    let s = &self.values[idx];
                    let da = &grad * &(s * &s.mapv(|v| 1.0 - v));
                    accumulate(&mut adjoints, *a, da);
                }
                Op::Relu(a) => {
                    // subgradient at 0 is 0
                    let mask = self.values[a.0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut adjoints, *a, &grad * &mask);
                }
                Op::RowNormalize(a) => {
                    let x = &self.values[a.0];
                    let mut da = grad.clone();
                    for (mut drow, (xrow, grow)) in da
                        .rows_mut()
                        .into_iter()
                        .zip(x.rows().into_iter().zip(grad.rows()))
                    {
                        let inv = 1.0 / (xrow.sum() + ROW_NORM_EPS);
                        let dot: f64 = grow.iter().zip(xrow.iter()).map(|(g, v)| g * v).sum();
                        for (d, g) in drow.iter_mut().zip(grow.iter()) {
                            *d = inv * (g - inv * dot);
                        }
                    }
                    accumulate(&mut adjoints, *a, da);
                }
                Op::ReduceSum(a) => {
                    let shape = nodes[a.0].shape;
                    let da = Matrix::from_elem(shape, grad[(0, 0)]);
                    accumulate(&mut adjoints, *a, da);
                }
                Op::Ln(a) => {
                    let da = &grad / &self.values[a.0];
                    accumulate(&mut adjoints, *a, da);
                }
                Op::Bce { target, prediction } => {
                    let p = self.values[prediction.0][(0, 0)];
                    let d = if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                        0.0
                    } else {
                        -target / p + (1.0 - target) / (1.0 - p)
                    };
                    let da = Matrix::from_elem((1, 1), grad[(0, 0)] * d);
                    accumulate(&mut adjoints, *prediction, da);
                }
            }
        }

        // leaves sharing a name are one parameter; their adjoints add up
        let mut out: HashMap<String, Matrix> = HashMap::new();
        for (idx, node) in nodes.iter().enumerate() {
            if let Op::Leaf(name) = &node.op {
                if wrt.contains(&name.as_str()) {
                    let g = adjoints[idx]
                        .clone()
                        .unwrap_or_else(|| Matrix::zeros(node.shape));
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(TapeError::NonFinite {
                            node: idx,
                            op: "backward",
                        });
                    }
                    match out.get_mut(name) {
                        Some(existing) => *existing += &g,
                        None => {
                            out.insert(name.clone(), g);
                        }
                    }
                }
            }
        }
        for name in wrt {
            if !out.contains_key(*name) {
                return Err(TapeError::UnknownLeaf(name.to_string()));
            }
        }
        Ok(Gradients(out))
    }
}

fn accumulate(adjoints: &mut [Option<Matrix>], id: NodeId, grad: Matrix) {
    match &mut adjoints[id.0] {
        Some(existing) => *existing += &grad,
        slot @ None => *slot = Some(grad),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Compares reverse-mode gradients for `leaf` against central finite
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)` componentwise and returns the
/// largest relative error, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(
    tape: &Tape,
    leaves: &LeafValues,
    leaf: &str,
    eps: f64,
) -> Result<f64, TapeError> {
    assert!(eps > 0.0, "epsilon must be positive");
    let eval = tape.forward(leaves)?;
    let grads = eval.backward(&[leaf])?;
    let analytic = grads.get(leaf)?.clone();

    let base = leaves
        .get(leaf)
        .ok_or_else(|| TapeError::UnboundLeaf(leaf.to_string()))?
        .clone();
    let mut perturbed = leaves.clone();
    let mut max_rel = 0.0f64;
    for r in 0..base.nrows() {
        for c in 0..base.ncols() {
            let mut plus = base.clone();
            plus[(r, c)] += eps;
            perturbed.insert(leaf.to_string(), plus);
            let f_plus = tape.forward(&perturbed)?.output_scalar();

            let mut minus = base.clone();
            minus[(r, c)] -= eps;
            perturbed.insert(leaf.to_string(), minus);
            let f_minus = tape.forward(&perturbed)?.output_scalar();

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[(r, c)];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn bind(entries: &[(&str, Matrix)]) -> LeafValues {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", 1, 1);
        tape.sigmoid(x);
        let leaves = bind(&[("x", Matrix::zeros((1, 1)))]);
        let eval = tape.forward(&leaves).unwrap();
        assert_eq!(eval.output_scalar(), 0.5);
    }

    #[test]
    fn reduce_sum_of_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", 2, 2);
        tape.reduce_sum(x);
        let leaves = bind(&[("x", Matrix::from_elem((2, 2), 1.0))]);
        assert_eq!(tape.forward(&leaves).unwrap().output_scalar(), 4.0);
    }

    #[test]
    fn bce_half_is_ln_two() {
        let mut tape = Tape::new();
        let p = tape.leaf("p", 1, 1);
        tape.bce(1.0, p);
        let leaves = bind(&[("p", Matrix::from_elem((1, 1), 0.5))]);
        let loss = tape.forward(&leaves).unwrap().output_scalar();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", 1, 1);
        tape.sigmoid(x);
        let leaves = bind(&[("x", Matrix::zeros((1, 1)))]);
        let eval = tape.forward(&leaves).unwrap();
        let g = eval.backward(&["x"]).unwrap();
        assert!((g.get("x").unwrap()[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn reduce_sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", 3, 2);
        tape.reduce_sum(x);
        let leaves = bind(&[("x", Matrix::from_elem((3, 2), 0.3))]);
        let eval = tape.forward(&leaves).unwrap();
        let g = eval.backward(&["x"]).unwrap();
        assert!(g.get("x").unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bce_gradient_at_half_target_one() {
        let mut tape = Tape::new();
        let p = tape.leaf("p", 1, 1);
        tape.bce(1.0, p);
        let leaves = bind(&[("p", Matrix::from_elem((1, 1), 0.5))]);
        let eval = tape.forward(&leaves).unwrap();
        let g = eval.backward(&["p"]).unwrap();
        assert!((g.get("p").unwrap()[(0, 0)] - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn linear_tape_matches_finite_differences_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", 2, 3);
        tape.reduce_sum(x);
        let leaves = bind(&[("x", Matrix::from_elem((2, 3), 0.7))]);
        let err = grad_check(&tape, &leaves, "x", 1e-4).unwrap();
        assert!(err < 1e-10, "linear map error {err}");
    }

    #[test]
    fn relu_away_from_kink_passes_grad_check() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", 2, 2);
        let r = tape.relu(x);
        tape.reduce_sum(r);
        let vals = Matrix::from_shape_vec((2, 2), vec![1.5, -1.2, 0.8, -0.3]).unwrap();
        let leaves = bind(&[("x", vals)]);
        let err = grad_check(&tape, &leaves, "x", 1e-4).unwrap();
        assert!(err < 1e-4, "relu error {err}");
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", 1, 1);
        tape.relu(x);
        let leaves = bind(&[("x", Matrix::zeros((1, 1)))]);
        let eval = tape.forward(&leaves).unwrap();
        let g = eval.backward(&["x"]).unwrap();
        assert_eq!(g.get("x").unwrap()[(0, 0)], 0.0);
    }

    // a composite exercising every primitive on the same tape
    fn composite_tape(rows: usize, cols: usize) -> Tape {
        let mut tape = Tape::new();
        let x = tape.leaf("x", rows, cols);
        let y = tape.leaf("y", cols, rows);
        let prod = tape.matmul(x, y);
        let gated = tape.relu(prod);
        let shifted = tape.scale(gated, 0.5);
        let mixed = tape.add(shifted, prod);
        let squashed = tape.sigmoid(mixed);
        let normed = tape.row_normalize(squashed);
        let hada = tape.mul(normed, squashed);
        let safe = tape.scale(hada, 0.9); // keep ln argument in (0, 1)
        let offset = tape.constant(Matrix::from_elem((rows, rows), 0.05));
        let pos = tape.add(safe, offset);
        let logged = tape.ln(pos);
        let total = tape.reduce_sum(logged);
        let squeezed = tape.sigmoid(total);
        tape.bce(1.0, squeezed);
        tape
    }

    #[test]
    fn composite_grad_check_under_tolerance() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..5 {
            let tape = composite_tape(3, 4);
            let x = Matrix::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
            let y = Matrix::from_shape_fn((4, 3), |_| rng.random_range(-2.0..2.0));
            let leaves = bind(&[("x", x), ("y", y)]);
            for leaf in ["x", "y"] {
                let err = grad_check(&tape, &leaves, leaf, 1e-4).unwrap();
                assert!(err < 1e-4, "composite {leaf} error {err}");
            }
        }
    }

    #[test]
    fn gradient_is_linear_in_tape_composition() {
        // grad of a*f + b*g equals a*grad(f) + b*grad(g)
        let (a, b) = (1.7, -0.6);
        let build_f = |tape: &mut Tape, x: NodeId| {
            let s = tape.sigmoid(x);
            tape.reduce_sum(s)
        };
        let build_g = |tape: &mut Tape, x: NodeId| {
            let r = tape.relu(x);
            let m = tape.mul(r, r);
            tape.reduce_sum(m)
        };

        let vals = Matrix::from_shape_vec((2, 2), vec![0.4, -1.1, 2.2, 0.9]).unwrap();
        let leaves = bind(&[("x", vals)]);

        let mut tf = Tape::new();
        let x = tf.leaf("x", 2, 2);
        build_f(&mut tf, x);
        let gf = tf
            .forward(&leaves)
            .unwrap()
            .backward(&["x"])
            .unwrap()
            .get("x")
            .unwrap()
            .clone();

        let mut tg = Tape::new();
        let x = tg.leaf("x", 2, 2);
        build_g(&mut tg, x);
        let gg = tg
            .forward(&leaves)
            .unwrap()
            .backward(&["x"])
            .unwrap()
            .get("x")
            .unwrap()
            .clone();

        let mut tc = Tape::new();
        let x = tc.leaf("x", 2, 2);
        let f = build_f(&mut tc, x);
        let g = build_g(&mut tc, x);
        let fa = tc.scale(f, a);
        let gb = tc.scale(g, b);
        tc.add(fa, gb);
        let gc = tc
            .forward(&leaves)
            .unwrap()
            .backward(&["x"])
            .unwrap()
            .get("x")
            .unwrap()
            .clone();

        let expect = &gf * a + &gg * b;
        for (got, want) in gc.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_does_not_mutate_forward_state() {
        let tape = composite_tape(2, 3);
        let mut rng = StdRng::seed_from_u64(3);
        let x = Matrix::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        let y = Matrix::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
        let leaves = bind(&[("x", x), ("y", y)]);
        let eval = tape.forward(&leaves).unwrap();
        let g1 = eval.backward(&["x"]).unwrap();
        let g2 = eval.backward(&["x"]).unwrap();
        assert_eq!(g1.get("x").unwrap(), g2.get("x").unwrap());
    }

    #[test]
    fn unbound_leaf_is_reported() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", 1, 1);
        tape.sigmoid(x);
        let err = tape.forward(&LeafValues::new()).unwrap_err();
        assert!(matches!(err, TapeError::UnboundLeaf(name) if name == "x"));
    }

    #[test]
    fn nan_is_reported_with_node() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", 1, 1);
        tape.ln(x); // ln of a negative input is NaN
        let leaves = bind(&[("x", Matrix::from_elem((1, 1), -1.0))]);
        let err = tape.forward(&leaves).unwrap_err();
        assert!(matches!(err, TapeError::NonFinite { op: "ln", .. }));
    }

    #[test]
    fn backward_rejects_matrix_output() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", 2, 2);
        tape.sigmoid(x);
        let leaves = bind(&[("x", Matrix::zeros((2, 2)))]);
        let eval = tape.forward(&leaves).unwrap();
        assert!(matches!(
            eval.backward(&["x"]),
            Err(TapeError::NonScalarOutput((2, 2)))
        ));
    }

    #[test]
    fn cap_clamps_value_and_gradient() {
        // below the ceiling: identity with unit gradient
        let mut tape = Tape::new();
        let x = tape.leaf("x", 1, 1);
        tape.cap(x, 5.0);
        let leaves = bind(&[("x", Matrix::from_elem((1, 1), 2.0))]);
        let eval = tape.forward(&leaves).unwrap();
        assert!((eval.output_scalar() - 2.0).abs() < 1e-12);
        let g = eval.backward(&["x"]).unwrap();
        assert!((g.get("x").unwrap()[(0, 0)] - 1.0).abs() < 1e-12);

        // above the ceiling: value pinned, gradient zero
        let leaves = bind(&[("x", Matrix::from_elem((1, 1), 9.0))]);
        let eval = tape.forward(&leaves).unwrap();
        assert!((eval.output_scalar() - 5.0).abs() < 1e-12);
        let g = eval.backward(&["x"]).unwrap();
        assert_eq!(g.get("x").unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn every_primitive_passes_randomized_grad_check() {
        let mut rng = StdRng::seed_from_u64(11);
        for trial in 0..20 {
            // matmul + add + mul
            let mut tape = Tape::new();
            let x = tape.leaf("x", 2, 3);
            let y = tape.leaf("y", 3, 2);
            let mm = tape.matmul(x, y);
            let c = tape.constant(Matrix::from_elem((2, 2), 0.3));
            let sum = tape.add(mm, c);
            let sq = tape.mul(sum, sum);
            tape.reduce_sum(sq);
            let leaves = bind(&[
                ("x", Matrix::from_shape_fn((2, 3), |_| rng.random_range(-2.0..2.0))),
                ("y", Matrix::from_shape_fn((3, 2), |_| rng.random_range(-2.0..2.0))),
            ]);
            for leaf in ["x", "y"] {
                let err = grad_check(&tape, &leaves, leaf, 1e-4).unwrap();
                assert!(err < 1e-4, "trial {trial} {leaf} err {err}");
            }

            // sigmoid + row_normalize (strictly positive rows)
            let mut tape = Tape::new();
            let x = tape.leaf("x", 3, 3);
            let s = tape.sigmoid(x);
            let n = tape.row_normalize(s);
            let m = tape.mul(n, n);
            tape.reduce_sum(m);
            let leaves = bind(&[(
                "x",
                Matrix::from_shape_fn((3, 3), |_| rng.random_range(-2.0..2.0)),
            )]);
            let err = grad_check(&tape, &leaves, "x", 1e-4).unwrap();
            assert!(err < 1e-4, "trial {trial} rownorm err {err}");

            // relu away from the kink, ln on positives, bce
            let mut tape = Tape::new();
            let x = tape.leaf("x", 2, 2);
            let r = tape.relu(x);
            let one = tape.constant(Matrix::from_elem((2, 2), 1.0));
            let shifted = tape.add(r, one);
            let l = tape.ln(shifted);
            let total = tape.reduce_sum(l);
            let p = tape.sigmoid(total);
            tape.bce(1.0, p);
            let vals = Matrix::from_shape_fn((2, 2), |_| {
                let mut v: f64 = rng.random_range(-2.0..2.0);
                while v.abs() < 1e-3 {
                    v = rng.random_range(-2.0..2.0);
                }
                v
            });
            let leaves = bind(&[("x", vals)]);
            let err = grad_check(&tape, &leaves, "x", 1e-4).unwrap();
            assert!(err < 1e-4, "trial {trial} relu/ln/bce err {err}");
        }
    }
}
