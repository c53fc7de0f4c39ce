//! Define-by-run reverse-mode tape over dense matrices.
//!
//! Every op evaluates eagerly when it is recorded, so node order is a valid
//! topological order and each slot is written exactly once. `backward` walks
//! the nodes in reverse and accumulates adjoints.

use std::collections::HashMap;

use super::{BlockId, Gradients, Matrix, ParameterStore, Real};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    /// `ln(1 + exp(x + shift))`.
    Softplus(Real),
}

impl Activation {
    #[inline]
    pub fn apply(self, x: Real) -> Real {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus(shift) => softplus(x + shift),
        }
    }

    /// Derivative expressed through the pre-activation input.
    #[inline]
    fn derivative(self, x: Real, y: Real) -> Real {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus(shift) => sigmoid(x + shift),
        }
    }
}

#[inline]
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// An op with a hand-written vector-Jacobian product.
///
/// `backward` returns one entry per input, in input order; `None` means no
/// gradient flows to that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>>;
}

enum Op {
    Leaf,
    Param(BlockId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    Act(Var, Activation),
    Abs(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    DetachRows(Var, Vec<bool>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParameterStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<BlockId, Var>,
}

/// Result of [`Tape::backward`].
pub struct TapeGradients {
    pub params: Gradients,
    leaves: Vec<Option<Matrix>>,
}

impl TapeGradients {
    /// Gradient with respect to a leaf created with `requires_grad = true`.
    pub fn wrt(&self, var: Var) -> Option<&Matrix> {
        self.leaves.get(var.0).and_then(Option::as_ref)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParameterStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Node for a parameter block. Repeated calls return the same node.
    pub fn param(&mut self, id: BlockId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let block = self.params.block(id);
        let v = self.push(block.value.clone(), Op::Param(id), block.trainable);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), g)
    }

    /// Adds the `1×m` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows, 1, "bias must be a single row");
        assert_eq!(av.cols, bv.cols, "bias width mismatch");
        let mut value = av.clone();
        for r in 0..value.rows {
            for (x, b) in value.row_mut(r).iter_mut().zip(&bv.data) {
                *x += *b;
            }
        }
        let g = self.any_grad(&[a, bias]);
        self.push(value, Op::AddRow(a, bias), g)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(Real, Real) -> Real) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let value = Matrix::from_vec(av.rows, av.cols, data);
        let g = self.any_grad(&[a, b]);
        self.push(value, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: Real) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), g)
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return a;
        }
        let value = self.value(a).map(|x| act.apply(x));
        let g = self.any_grad(&[a]);
        self.push(value, Op::Act(a, act), g)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(Real::abs);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Abs(a), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows, rows, "concat_cols row mismatch");
                value.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        let g = self.any_grad(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let g = self.any_grad(parts);
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut value = Matrix::zeros(av.rows, len);
        for r in 0..av.rows {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let g = self.any_grad(&[a]);
        self.push(value, Op::SliceCols(a, start), g)
    }

    /// Row `i` of the result is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let av = self.value(a);
        let mut value = Matrix::zeros(indices.len(), av.cols);
        for (i, &src) in indices.iter().enumerate() {
            value.row_mut(i).copy_from_slice(av.row(src));
        }
        let g = self.any_grad(&[a]);
        self.push(value, Op::Gather(a, indices.to_vec()), g)
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape size mismatch");
        let value = Matrix::from_vec(rows, cols, av.data.clone());
        let g = self.any_grad(&[a]);
        self.push(value, Op::Reshape(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let g = self.any_grad(&[a]);
        self.push(Matrix::scalar(s), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s: Real = av.data.iter().sum::<Real>() / av.len().max(1) as Real;
        let g = self.any_grad(&[a]);
        self.push(Matrix::scalar(s), Op::Mean(a), g)
    }

    /// Identity in the forward pass; rows flagged `true` pass no gradient back.
    pub fn detach_rows(&mut self, a: Var, blocked: &[bool]) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, blocked.len(), "detach mask length mismatch");
        let value = av.clone();
        let g = self.any_grad(&[a]) && blocked.iter().any(|b| !b);
        self.push(value, Op::DetachRows(a, blocked.to_vec()), g)
    }

    /// Identity in the forward pass with no gradient at all.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// Records a custom op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Matrix, op: Box<dyn CustomOp>) -> Var {
        let g = self.any_grad(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), op), g)
    }

    /// Reverse sweep from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Result<TapeGradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows, lv.cols
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        let mut params = Gradients { blocks: vec![None; self.params.len()] };
        if !self.nodes[loss.0].needs_grad {
            return Ok(TapeGradients { params, leaves: grads });
        }
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        params.blocks[id.0] = Some(g);
                    }
                    continue;
                }
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        Ok(TapeGradients { params, leaves: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_transposed(self.value(*b)));
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).transposed_matmul(g));
                }
            }
            Op::AddRow(a, bias) => {
                if self.needs_grad(*bias) {
                    let mut gb = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (acc, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *acc += *x;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
                self.accumulate(grads, *a, g.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let data = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Matrix::from_vec(g.rows, g.cols, data));
                }
                if self.needs_grad(*b) {
                    let data = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Matrix::from_vec(g.rows, g.cols, data));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|x| x * f)),
            Op::Act(a, act) => {
                let av = self.value(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&av.data)
                    .zip(&out.data)
                    .map(|((gi, x), y)| gi * act.derivative(*x, *y))
                    .collect();
                self.accumulate(grads, *a, Matrix::from_vec(g.rows, g.cols, data));
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&av.data)
                    .map(|(gi, x)| if *x > 0.0 { *gi } else if *x < 0.0 { -gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Matrix::from_vec(g.rows, g.cols, data));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols;
                    if self.needs_grad(*p) {
                        let mut gp = Matrix::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let len = pv.len();
                    if self.needs_grad(*p) {
                        let gp = Matrix::from_vec(pv.rows, pv.cols, g.data[off..off + len].to_vec());
                        self.accumulate(grads, *p, gp);
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows, av.cols);
                for r in 0..g.rows {
                    ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gather(a, indices) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows, av.cols);
                for (i, &src) in indices.iter().enumerate() {
                    for (acc, x) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                        *acc += *x;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Matrix::from_vec(av.rows, av.cols, g.data.clone()));
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Matrix::filled(av.rows, av.cols, g.data[0]));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let s = g.data[0] / av.len().max(1) as Real;
                self.accumulate(grads, *a, Matrix::filled(av.rows, av.cols, s));
            }
            Op::DetachRows(a, blocked) => {
                let mut ga = g.clone();
                for (r, &b) in blocked.iter().enumerate() {
                    if b {
                        ga.row_mut(r).fill(0.0);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Matrix> = inputs.iter().map(|v| self.value(*v)).collect();
                let back = op.backward(&values, out, g);
                debug_assert_eq!(back.len(), inputs.len(), "{} returned wrong arity", op.name());
                for (v, gi) in inputs.iter().zip(back) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, *v, gi);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, value: Matrix) -> (ParameterStore, BlockId) {
        let mut s = ParameterStore::new();
        let id = s.insert(name, value, true).unwrap();
        (s, id)
    }

    #[test]
    fn linear_function_gradient() {
        let (store, w) = store_with("w", Matrix::scalar(0.7));
        let mut t = Tape::new(&store);
        let wv = t.param(w);
        let x = t.constant(Matrix::scalar(2.0));
        let f = t.mul(wv, x);
        let g = t.backward(f).unwrap();
        assert_eq!(g.params.get(w).unwrap().data[0], 2.0);
    }

    #[test]
    fn quadratic_gradient() {
        let (store, w) = store_with("w", Matrix::scalar(3.0));
        let mut t = Tape::new(&store);
        let wv = t.param(w);
        let f = t.mul(wv, wv);
        let g = t.backward(f).unwrap();
        assert_eq!(g.params.get(w).unwrap().data[0], 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let (store, w) = store_with("w", Matrix::zeros(2, 2));
        let mut t = Tape::new(&store);
        let wv = t.param(w);
        assert!(matches!(t.backward(wv), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_blocks_get_no_gradient() {
        let mut store = ParameterStore::new();
        let a = store.insert("a", Matrix::scalar(1.5), true).unwrap();
        let b = store.insert("b", Matrix::scalar(2.5), false).unwrap();
        let mut t = Tape::new(&store);
        let (av, bv) = (t.param(a), t.param(b));
        let f = t.mul(av, bv);
        let g = t.backward(f).unwrap();
        assert_eq!(g.params.get(a).unwrap().data[0], 2.5);
        assert!(g.params.get(b).is_none());
    }

    #[test]
    fn detached_rows_block_gradient_but_not_value() {
        let (store, w) = store_with("w", Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]));
        let mut t = Tape::new(&store);
        let wv = t.param(w);
        let d = t.detach_rows(wv, &[false, true, false]);
        let sq = t.mul(d, d);
        let f = t.sum(sq);
        assert_eq!(t.value(f).data[0], 14.0);
        let g = t.backward(f).unwrap();
        assert_eq!(g.params.get(w).unwrap().data, vec![2.0, 0.0, 6.0]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - (2.0 as Real).ln()).abs() < 1e-12);
    }
}
