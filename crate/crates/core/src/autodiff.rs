//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in creation order. Because a node can
//! only reference nodes created before it, creation order is a topological
//! order and [`Tape::backward`] simply walks the tape in reverse.
//!
//! Only the operations the model needs are provided. Sparse matrices enter as
//! constant left factors ([`Tape::spmm`]); they are never differentiated.
//! The gradient penalty needs a second-order path through the critic, which
//! is handled by building the critic's analytic input gradient out of
//! ordinary tape operations ([`critic_input_gradient`]).

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

pub type DenseMatrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Entrywise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// First derivative at pre-activation `z`. Relu uses 0 at the kink.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu | Activation::Identity => 0.0,
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Lower clamp applied to logarithm arguments.
/// An entry is dropped when a uniform 32-bit draw falls below this value.
pub fn drop_threshold(p: f64) -> u64 {
    (p * 4_294_967_296.0).round() as u64
}

pub const LOG_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    ActDerivative(Var, Activation),
    Dropout(Var, DenseMatrix),
    Transpose(Var),
    RowNorm(Var),
    Square(Var),
    Log(Var),
    Softmax(Var),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
}

struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, with zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> DenseMatrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

fn shape_of(m: &DenseMatrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn accumulate(slot: &mut Option<DenseMatrix>, g: DenseMatrix) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
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

    fn push(&mut self, value: DenseMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape_of(&self.nodes[v.0].value)
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn row_vector_for(&self, op: &str, x: Var, row: Var) -> Result<()> {
        let (_, cols) = self.shape(x);
        if self.shape(row) != (1, cols) {
            return Err(Error::Shape(format!(
                "{op}: row vector {:?} for matrix {:?}",
                self.shape(row),
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {m}x{k} times {k2}x{n}")));
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `s · d` for a constant sparse `s`.
    pub fn spmm(&mut self, s: &Arc<CsrMatrix>, d: Var) -> Result<Var> {
        let value = s.mul_dense(&self.value(d).view())?;
        let rg = self.needs(d);
        Ok(self.push(value, Op::SpMM(Arc::clone(s), d), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Entrywise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a `1×m` row to every row of an `n×m` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_vector_for("add_row", x, row)?;
        let value = self.value(x) + self.value(row);
        let rg = self.needs(x) || self.needs(row);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    /// Multiplies every row of an `n×m` matrix entrywise by a `1×m` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_vector_for("mul_row", x, row)?;
        let value = self.value(x) * self.value(row);
        let rg = self.needs(x) || self.needs(row);
        Ok(self.push(value, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        let rg = self.needs(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) + c;
        let rg = self.needs(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let value = self.value(x).mapv(|z| act.apply(z));
        let rg = self.needs(x);
        self.push(value, Op::Act(x, act), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Entrywise first derivative `a'(x)`, itself differentiable.
    pub fn activation_derivative(&mut self, x: Var, act: Activation) -> Var {
        let value = self.value(x).mapv(|z| act.derivative(z));
        let rg = self.needs(x) && !matches!(act, Activation::Relu | Activation::Identity);
        self.push(value, Op::ActDerivative(x, act), rg)
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when not training or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let cut = drop_threshold(p);
        let mask = Array2::from_shape_simple_fn(self.shape(x), || {
            if u64::from(rng.next_u32()) < cut {
                0.0
            } else {
                keep
            }
        });
        let value = self.value(x) * &mask;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Dropout(x, mask), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        let rg = self.needs(x);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Euclidean norm of each row, as an `n×1` column.
    pub fn row_norms(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        let rg = self.needs(x);
        self.push(value, Op::RowNorm(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        let rg = self.needs(x);
        self.push(value, Op::Square(x), rg)
    }

    /// `ln(max(x, 1e-12))`; zero gradient where the clamp is active.
    pub fn log_clamped(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(LOG_FLOOR).ln());
        let rg = self.needs(x);
        self.push(value, Op::Log(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row.mapv_inplace(|v| v / total);
        }
        let rg = self.needs(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let n = self.shape(x).0;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("row {bad} selected from {n} rows")));
        }
        let value = self.value(x).select(Axis(0), rows);
        let rg = self.needs(x);
        Ok(self.push(value, Op::SelectRows(x, rows.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.needs(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean over all entries. An empty matrix is a contract error.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let len = self.value(x).len();
        if len == 0 {
            return Err(Error::Contract("mean of an empty matrix".into()));
        }
        let value = Array2::from_elem((1, 1), self.value(x).sum() / len as f64);
        let rg = self.needs(x);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Array2::from_elem((1, 1), v.iter().map(|a| a * a).sum());
        let rg = self.needs(x);
        self.push(value, Op::SumSquares(x), rg)
    }

    /// Propagates `d root / d node` to every node that requires a gradient.
    ///
    /// Buffers are fresh on every call, and contributions from fan-out add.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward from non-scalar root of shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; root.0 + 1];
        let shapes = self.nodes.iter().map(|n| shape_of(&n.value)).collect();
        if self.needs(root) {
            grads[root.0] = Some(Array2::ones((1, 1)));
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) {
        let mut send = |v: Var, contribution: DenseMatrix| {
            if self.needs(v) {
                accumulate(&mut grads[v.0], contribution);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    send(*a, g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    send(*b, self.value(*a).t().dot(g));
                }
            }
            Op::SpMM(s, d) => {
                if self.needs(*d) {
                    let back = s
                        .transpose_mul_dense(&g.view())
                        .expect("shapes checked in forward");
                    send(*d, back);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    send(*a, g * self.value(*b));
                }
                if self.needs(*b) {
                    send(*b, g * self.value(*a));
                }
            }
            Op::AddRow(x, row) => {
                send(*x, g.clone());
                if self.needs(*row) {
                    send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(x, row) => {
                if self.needs(*x) {
                    send(*x, g * self.value(*row));
                }
                if self.needs(*row) {
                    let prod = g * self.value(*x);
                    send(*row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(x, c) => send(*x, g * *c),
            Op::AddScalar(x) => send(*x, g.clone()),
            Op::Act(x, act) => {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(self.value(*x))
                    .for_each(|o, &z| *o *= act.derivative(z));
                send(*x, out);
            }
            Op::ActDerivative(x, act) => {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(self.value(*x))
                    .for_each(|o, &z| *o *= act.second_derivative(z));
                send(*x, out);
            }
            Op::Dropout(x, mask) => send(*x, g * mask),
            Op::Transpose(x) => send(*x, g.t().to_owned()),
            Op::RowNorm(x) => {
                let mut out = self.value(*x).clone();
                for (mut row, (&norm, &gi)) in out
                    .rows_mut()
                    .into_iter()
                    .zip(node.value.iter().zip(g.iter()))
                {
                    let factor = if norm > 0.0 { gi / norm } else { 0.0 };
                    row.mapv_inplace(|v| v * factor);
                }
                send(*x, out);
            }
            Op::Square(x) => send(*x, g * self.value(*x) * 2.0),
            Op::Log(x) => {
                let mut out = g.clone();
                Zip::from(&mut out).and(self.value(*x)).for_each(|o, &v| {
                    *o = if v > LOG_FLOOR { *o / v } else { 0.0 };
                });
                send(*x, out);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut out = g * y;
                for (mut row, yrow) in out.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row)
                        .and(&yrow)
                        .for_each(|o, &yv| *o -= yv * dot);
                }
                send(*x, out);
            }
            Op::SelectRows(x, rows) => {
                let mut out = Array2::zeros(self.shape(*x));
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = out.row_mut(r);
                    dst += &g.row(k);
                }
                send(*x, out);
            }
            Op::Sum(x) => send(*x, Array2::from_elem(self.shape(*x), g[[0, 0]])),
            Op::Mean(x) => {
                let len = self.value(*x).len() as f64;
                send(*x, Array2::from_elem(self.shape(*x), g[[0, 0]] / len));
            }
            Op::SumSquares(x) => send(*x, self.value(*x) * (2.0 * g[[0, 0]])),
        }
    }
}

/// Critic weights as tape nodes: hidden `w1` (`d×k`), `b1` (`1×k`), output
/// `w2` (`k×1`). The output bias does not affect input gradients.
#[derive(Debug, Clone, Copy)]
pub struct CriticVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub activation: Activation,
}

/// Per-row input gradient of the one-hidden-layer critic
/// `f(h) = a(h·W1 + b1)·w2 + b2`, namely `(a'(h·W1 + b1) ⊙ w2ᵀ)·W1ᵀ`.
///
/// The expression is recorded on the tape, so differentiating anything built
/// from it reaches the critic weights through the second-order path.
pub fn critic_input_gradient(tape: &mut Tape, critic: &CriticVars, h: Var) -> Result<Var> {
    let (_, d) = tape.shape(h);
    let (d1, k) = tape.shape(critic.w1);
    if d != d1 {
        return Err(Error::Shape(format!(
            "critic expects width {d1}, representation has width {d}"
        )));
    }
    if tape.shape(critic.w2) != (k, 1) || tape.shape(critic.b1) != (1, k) {
        return Err(Error::Shape(format!(
            "critic hidden width {k} disagrees with b1 {:?} / w2 {:?}",
            tape.shape(critic.b1),
            tape.shape(critic.w2)
        )));
    }
    let pre = tape.matmul(h, critic.w1)?;
    let pre = tape.add_row(pre, critic.b1)?;
    let slope = tape.activation_derivative(pre, critic.activation);
    let w2_row = tape.transpose(critic.w2);
    let weighted = tape.mul_row(slope, w2_row)?;
    let w1_t = tape.transpose(critic.w1);
    tape.matmul(weighted, w1_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
    }

    /// Central differences of `f` with respect to every entry of `x`.
    fn finite_difference(x: &DenseMatrix, f: impl Fn(&DenseMatrix) -> f64) -> DenseMatrix {
        let h = 1e-5;
        let mut out = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut up = x.clone();
            up[[r, c]] += h;
            let mut down = x.clone();
            down[[r, c]] -= h;
            out[[r, c]] = (f(&up) - f(&down)) / (2.0 * h);
        }
        out
    }

    fn max_rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let i = t.constant(Array2::eye(2));
        let b = t.constant(array![[3.0, 4.0], [5.0, 6.0]]);
        let p = t.matmul(i, b).unwrap();
        assert_eq!(t.value(p), &array![[3.0, 4.0], [5.0, 6.0]]);

        let a = t.constant(array![[1.0, 2.0]]);
        let c = t.constant(array![[3.0], [4.0]]);
        let p = t.matmul(a, c).unwrap();
        assert_eq!(t.value(p), &array![[11.0]]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3)));
        let b = t.constant(Array2::zeros((2, 3)));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = random(&mut rng, 3, 2);
        let b0 = random(&mut rng, 2, 4);
        let mut t = Tape::new();
        let a = t.param(a0.clone());
        let b = t.constant(b0.clone());
        let p = t.matmul(a, b).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        let fd = finite_difference(&a0, |a| a.dot(&b0).sum());
        assert!(max_rel_err(&g.wrt(a), &fd) < 1e-6);
    }

    #[test]
    fn spmm_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let eye = Arc::new(CsrMatrix::identity(3));
        let d0 = random(&mut rng, 3, 2);
        let d = t.constant(d0.clone());
        let out = t.spmm(&eye, d).unwrap();
        assert_eq!(t.value(out), &d0);

        let swap =
            Arc::new(CsrMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap());
        let d = t.constant(Array2::eye(2));
        let out = t.spmm(&swap, d).unwrap();
        assert_eq!(t.value(out), &array![[0.0, 1.0], [1.0, 0.0]]);

        let bad = t.constant(Array2::zeros((3, 1)));
        assert!(matches!(t.spmm(&swap, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn spmm_matches_dense_and_backpropagates_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut trip = Vec::new();
        for r in 0..6 {
            for c in 0..6 {
                if rng.gen_bool(0.4) {
                    trip.push((r, c, rng.gen_range(-2.0..2.0)));
                }
            }
        }
        let s = Arc::new(CsrMatrix::from_triplets(6, 6, trip).unwrap());
        let d0 = random(&mut rng, 6, 3);
        let w0 = random(&mut rng, 6, 3);
        let mut t = Tape::new();
        let d = t.param(d0.clone());
        let w = t.constant(w0.clone());
        let out = t.spmm(&s, d).unwrap();
        let dense = s.to_dense().dot(&d0);
        let diff = (t.value(out) - &dense)
            .mapv(f64::abs)
            .fold(0.0, |m: f64, &v| m.max(v));
        assert!(diff < 1e-12);
        let prod = t.mul(out, w).unwrap();
        let root = t.sum(prod);
        let g = t.backward(root).unwrap();
        let expect = s.to_dense().t().dot(&w0);
        assert!(max_rel_err(&g.wrt(d), &expect) < 1e-12);
    }

    #[test]
    fn activations_forward() {
        let mut t = Tape::new();
        let x = t.constant(array![[-1.0, 2.0]]);
        let r = t.relu(x);
        assert_eq!(t.value(r), &array![[0.0, 2.0]]);
        let z = t.constant(array![[0.0]]);
        let s = t.sigmoid(z);
        assert_eq!(t.value(s), &array![[0.5]]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.param(array![[0.0]]);
        let s = t.sigmoid(x);
        let root = t.sum(s);
        let g = t.backward(root).unwrap().wrt(x)[[0, 0]];
        assert_eq!(g, 0.25);
        let fd = (sigmoid(1e-5) - sigmoid(-1e-5)) / 2e-5;
        assert!((g - fd).abs() < 1e-8);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x0 = random(&mut rng, 3, 4);
        let row0 = random(&mut rng, 1, 4);
        for act in [Activation::Sigmoid, Activation::Tanh, Activation::Relu] {
            let f = |x: &DenseMatrix| {
                let mut t = Tape::new();
                let xv = t.param(x.clone());
                let r = t.constant(row0.clone());
                let y = t.mul_row(xv, r).unwrap();
                let y = t.activation(y, act);
                let y = t.softmax_rows(y);
                let y = t.log_clamped(y);
                let y = t.square(y);
                let root = t.mean(y).unwrap();
                (t, xv, root)
            };
            let (t, xv, root) = f(&x0);
            let g = t.backward(root).unwrap().wrt(xv);
            let fd = finite_difference(&x0, |x| {
                let (t, _, root) = f(x);
                t.scalar(root)
            });
            assert!(max_rel_err(&g, &fd) < 1e-4, "{act:?}");
        }
    }

    #[test]
    fn dropout_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.constant(Array2::ones((100, 100)));
        assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.7, false, &mut rng).unwrap(), x);
        assert!(matches!(
            t.dropout(x, 1.0, true, &mut rng),
            Err(Error::Config(_))
        ));
        let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean = t.value(y).mean().unwrap();
        assert!((0.96..=1.04).contains(&mean), "mean {mean}");
        assert!(t.value(y).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_replays_with_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut t = Tape::new();
            let x = t.param(Array2::ones((4, 5)));
            let y = t.dropout(x, 0.3, true, &mut rng).unwrap();
            let root = t.sum_squares(y);
            let g = t.backward(root).unwrap().wrt(x);
            (t.value(y).clone(), g)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_trivial_cases() {
        let mut t = Tape::new();
        let x = t.param(array![[3.0]]);
        let sq = t.square(x);
        let root = t.sum(sq);
        assert_eq!(t.backward(root).unwrap().wrt(x), array![[6.0]]);

        let mut t = Tape::new();
        let x = t.param(array![[3.0, 1.0]]);
        let c = t.constant(array![[2.0]]);
        let g = t.backward(c).unwrap();
        assert_eq!(g.wrt(x), Array2::<f64>::zeros((1, 2)));
        assert!(g.get(x).is_none());

        let mut t = Tape::new();
        let x = t.param(array![[3.0, 1.0]]);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.param(array![[2.0]]);
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.wrt(x), array![[5.0]]);
    }

    #[test]
    fn two_layer_network_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x0 = random(&mut rng, 5, 3);
        let w1 = random(&mut rng, 3, 4);
        let b1 = random(&mut rng, 1, 4);
        let w2 = random(&mut rng, 4, 2);
        let eval = |w1: &DenseMatrix, b1: &DenseMatrix, w2: &DenseMatrix| {
            let mut t = Tape::new();
            let x = t.constant(x0.clone());
            let vars = [
                t.param(w1.clone()),
                t.param(b1.clone()),
                t.param(w2.clone()),
            ];
            let h = t.matmul(x, vars[0]).unwrap();
            let h = t.add_row(h, vars[1]).unwrap();
            let h = t.activation(h, Activation::Tanh);
            let o = t.matmul(h, vars[2]).unwrap();
            let o = t.sigmoid(o);
            let root = t.mean(o).unwrap();
            (t, vars, root)
        };
        let (t, vars, root) = eval(&w1, &b1, &w2);
        let g = t.backward(root).unwrap();
        let fd1 = finite_difference(&w1, |w| {
            let (t, _, r) = eval(w, &b1, &w2);
            t.scalar(r)
        });
        let fdb = finite_difference(&b1, |b| {
            let (t, _, r) = eval(&w1, b, &w2);
            t.scalar(r)
        });
        let fd2 = finite_difference(&w2, |w| {
            let (t, _, r) = eval(&w1, &b1, w);
            t.scalar(r)
        });
        assert!(max_rel_err(&g.wrt(vars[0]), &fd1) < 1e-4);
        assert!(max_rel_err(&g.wrt(vars[1]), &fdb) < 1e-4);
        assert!(max_rel_err(&g.wrt(vars[2]), &fd2) < 1e-4);
    }

    fn critic_on(
        t: &mut Tape,
        w1: &DenseMatrix,
        b1: &DenseMatrix,
        w2: &DenseMatrix,
        act: Activation,
    ) -> CriticVars {
        CriticVars {
            w1: t.param(w1.clone()),
            b1: t.param(b1.clone()),
            w2: t.param(w2.clone()),
            b2: t.param(Array2::zeros((1, 1))),
            activation: act,
        }
    }

    fn critic_value(
        h: &DenseMatrix,
        w1: &DenseMatrix,
        b1: &DenseMatrix,
        w2: &DenseMatrix,
        act: Activation,
    ) -> DenseMatrix {
        (h.dot(w1) + b1).mapv(|z| act.apply(z)).dot(w2)
    }

    #[test]
    fn critic_input_gradient_degenerate_critics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h0 = random(&mut rng, 4, 3);
        let b1 = random(&mut rng, 1, 5);
        let w2 = random(&mut rng, 5, 1);

        let mut t = Tape::new();
        let c = critic_on(&mut t, &Array2::zeros((3, 5)), &b1, &w2, Activation::Relu);
        let h = t.constant(h0.clone());
        let g = critic_input_gradient(&mut t, &c, h).unwrap();
        assert!(t.value(g).iter().all(|&v| v == 0.0));

        let w1 = random(&mut rng, 3, 5);
        let mut t = Tape::new();
        let c = critic_on(&mut t, &w1, &b1, &w2, Activation::Identity);
        let h = t.constant(h0.clone());
        let g = critic_input_gradient(&mut t, &c, h).unwrap();
        let expect = w1.dot(&w2);
        for row in t.value(g).rows() {
            for (a, b) in row.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let mut t = Tape::new();
        let c = critic_on(&mut t, &w1, &b1, &w2, Activation::Relu);
        let h = t.constant(Array2::zeros((2, 4)));
        assert!(matches!(
            critic_input_gradient(&mut t, &c, h),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn critic_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for act in [Activation::Relu, Activation::Tanh] {
            let w1 = random(&mut rng, 3, 6);
            let b1 = random(&mut rng, 1, 6);
            let w2 = random(&mut rng, 6, 1);
            let h0 = random(&mut rng, 5, 3);
            let pre = h0.dot(&w1) + &b1;
            assert!(pre.iter().all(|z| z.abs() > 1e-3));
            let mut t = Tape::new();
            let c = critic_on(&mut t, &w1, &b1, &w2, act);
            let h = t.constant(h0.clone());
            let g = critic_input_gradient(&mut t, &c, h).unwrap();
            let fd = finite_difference(&h0, |h| critic_value(h, &w1, &b1, &w2, act).sum());
            assert!(max_rel_err(t.value(g), &fd) < 1e-4, "{act:?}");
        }
    }

    #[test]
    fn penalty_second_order_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h0 = random(&mut rng, 6, 3);
        for act in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
            let w1 = random(&mut rng, 3, 4);
            let b1 = random(&mut rng, 1, 4);
            let w2 = random(&mut rng, 4, 1);
            let penalty = |w1: &DenseMatrix, b1: &DenseMatrix, w2: &DenseMatrix| {
                let mut t = Tape::new();
                let c = critic_on(&mut t, w1, b1, w2, act);
                let h = t.constant(h0.clone());
                let g = critic_input_gradient(&mut t, &c, h).unwrap();
                let n = t.row_norms(g);
                let n = t.add_scalar(n, -1.0);
                let n = t.square(n);
                let root = t.mean(n).unwrap();
                (t, c, root)
            };
            let (t, c, root) = penalty(&w1, &b1, &w2);
            let g = t.backward(root).unwrap();
            let fd1 = finite_difference(&w1, |w| {
                let (t, _, r) = penalty(w, &b1, &w2);
                t.scalar(r)
            });
            let fd2 = finite_difference(&w2, |w| {
                let (t, _, r) = penalty(&w1, &b1, w);
                t.scalar(r)
            });
            let fdb = finite_difference(&b1, |b| {
                let (t, _, r) = penalty(&w1, b, &w2);
                t.scalar(r)
            });
            assert!(max_rel_err(&g.wrt(c.w1), &fd1) < 1e-3, "{act:?}");
            assert!(max_rel_err(&g.wrt(c.w2), &fd2) < 1e-3, "{act:?}");
            assert!(max_rel_err(&g.wrt(c.b1), &fdb) < 1e-3, "{act:?}");
        }
    }
}
