use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Shared row-index list used by gather/segment operations.
pub type Index = Arc<[usize]>;

const LN_FLOOR: f64 = 1e-12;
pub(crate) const ATANH_CLAMP: f64 = crate::geometry::ATANH_CLAMP;
const SERIES_CUTOFF: f64 = 1e-3;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    ColSum(usize),
    RowNorm(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Tanh(usize),
    Atanh(usize),
    Sigmoid(usize),
    Ln(usize),
    Relu(usize),
    Softmax(usize, usize),
    SegmentSoftmax(usize, Index, usize),
    GatherRows(usize, Index),
    SegmentSum(usize, Index),
    TanhRatio(usize, f64),
    AtanhRatio(usize, f64),
    ProjectRows(usize, f64),
}

struct Node {
    value: Rc<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in execution order for reverse-mode
/// differentiation.
///
/// A tape is single-threaded (`!Sync`). Build a fresh tape per step and drop
/// it afterwards; nothing outlives it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar loss with respect to every leaf that required them.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_array(g.clone()),
            None => {
                let (r, c) = self.shapes[v.id];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Array2<f64> {
        match self.grads.get_mut(v.id).and_then(|g| g.take()) {
            Some(g) => g,
            None => Array2::zeros(self.shapes[v.id]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(Rc::new(t.into_array()), Op::Leaf, true)
    }

    pub fn param_array(&self, a: &Array2<f64>) -> Var<'_> {
        self.push(Rc::new(a.as_standard_layout().into_owned()), Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(Rc::new(t.into_array()), Op::Leaf, false)
    }

    pub fn constant_array(&self, a: Array2<f64>) -> Var<'_> {
        self.push(Rc::new(a), Op::Leaf, false)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Tensor::scalar(x))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_> {
        self.constant(Tensor::zeros(rows, cols))
    }

    fn push(&self, value: Rc<Array2<f64>>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Array2<f64>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, name: &str, value: Array2<f64>, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "`{name}` produced non-finite values (shape {:?})",
                value.shape()
            )));
        }
        let rg = inputs.iter().any(|&i| self.needs(i));
        Ok(self.push(Rc::new(value), op, rg))
    }

    /// Concatenates along the last (column) axis.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let rows = first.shape()[0];
        let vals: Vec<Rc<Array2<f64>>> = parts.iter().map(|p| self.value(p.id)).collect();
        if vals.iter().any(|v| v.nrows() != rows) {
            return Err(Error::shape("concat_cols row counts differ"));
        }
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::shape(e.to_string()))?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.record("concat_cols", out, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Stacks along the first (row) axis.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let cols = first.shape()[1];
        let vals: Vec<Rc<Array2<f64>>> = parts.iter().map(|p| self.value(p.id)).collect();
        if vals.iter().any(|v| v.ncols() != cols) {
            return Err(Error::shape("concat_rows column counts differ"));
        }
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.record("concat_rows", out, Op::ConcatRows(ids.clone()), &ids)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shapes: Vec<(usize, usize)> = nodes.iter().map(|n| n.value.dim()).collect();
        if shapes[loss.id] != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                shapes[loss.id]
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Array2::ones((1, 1)));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut send = |target: usize, contrib: Array2<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            };
            let val = |i: usize| -> &Array2<f64> { &nodes[i].value };
            let y: &Array2<f64> = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    send(*a, reduce_to(&g, val(*a).dim()));
                    send(*b, reduce_to(&g, val(*b).dim()));
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(&g, val(*a).dim()));
                    send(*b, -reduce_to(&g, val(*b).dim()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        send(*a, reduce_to(&(&g * vb), va.dim()));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, reduce_to(&(&g * va), vb.dim()));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        send(*a, reduce_to(&(&g / vb), va.dim()));
                    }
                    if nodes[*b].requires_grad {
                        // d(a/b)/db = -y/b
                        let gb = -(&g * y) / vb;
                        send(*b, reduce_to(&gb, vb.dim()));
                    }
                }
                Op::Neg(a) => send(*a, -g),
                Op::Scale(a, k) => send(*a, g * *k),
                Op::AddScalar(a) => send(*a, g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        send(*a, g.dot(&vb.t()));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, va.t().dot(&g));
                    }
                }
                Op::Transpose(a) => send(*a, g.t().as_standard_layout().into_owned()),
                Op::ConcatCols(ids) => {
                    let mut off = 0;
                    for &i in ids {
                        let w = val(i).ncols();
                        send(i, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(ids) => {
                    let mut off = 0;
                    for &i in ids {
                        let h = val(i).nrows();
                        send(i, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::Sum(a) => send(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::Mean(a) => {
                    let va = val(*a);
                    send(*a, Array2::from_elem(va.dim(), g[[0, 0]] / va.len() as f64));
                }
                Op::RowSum(a) => {
                    let dim = val(*a).dim();
                    send(*a, g.broadcast(dim).expect("row sum broadcast").to_owned());
                }
                Op::ColSum(a) => {
                    let dim = val(*a).dim();
                    send(*a, g.broadcast(dim).expect("col sum broadcast").to_owned());
                }
                Op::RowNorm(a) => {
                    let va = val(*a);
                    let mut out = va.clone();
                    for ((mut row, n), gr) in out.rows_mut().into_iter().zip(y.iter()).zip(g.iter()) {
                        if *n > 0.0 {
                            row.mapv_inplace(|x| x * gr / n);
                        } else {
                            row.fill(0.0);
                        }
                    }
                    send(*a, out);
                }
                Op::Square(a) => send(*a, &g * val(*a) * 2.0),
                Op::Sqrt(_) | Op::Exp(_) | Op::Tanh(_) | Op::Sigmoid(_) => {
                    let a = unary_input(&node.op);
                    let mut out = g;
                    Zip::from(&mut out).and(y).for_each(|gi, &yi| {
                        *gi *= match &node.op {
                            Op::Sqrt(_) => {
                                if yi > 0.0 {
                                    0.5 / yi
                                } else {
                                    0.0
                                }
                            }
                            Op::Exp(_) => yi,
                            Op::Tanh(_) => 1.0 - yi * yi,
                            _ => yi * (1.0 - yi),
                        }
                    });
                    send(a, out);
                }
                Op::Atanh(a) => {
                    let mut out = g;
                    Zip::from(&mut out).and(val(*a)).for_each(|gi, &x| {
                        *gi *= if x.abs() < ATANH_CLAMP { 1.0 / (1.0 - x * x) } else { 0.0 };
                    });
                    send(*a, out);
                }
                Op::Ln(a) => {
                    let mut out = g;
                    Zip::from(&mut out).and(val(*a)).for_each(|gi, &x| {
                        *gi *= if x > LN_FLOOR { 1.0 / x } else { 0.0 };
                    });
                    send(*a, out);
                }
                Op::Relu(a) => {
                    let mut out = g;
                    Zip::from(&mut out).and(val(*a)).for_each(|gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    send(*a, out);
                }
                Op::Softmax(a, axis) => {
                    let dot = (&g * y).sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                    send(*a, y * &(&g - &dot));
                }
                Op::SegmentSoftmax(a, seg, n) => {
                    let cols = y.ncols();
                    let mut dots = Array2::<f64>::zeros((*n, cols));
                    for (r, &sg) in seg.iter().enumerate() {
                        for c in 0..cols {
                            dots[[sg, c]] += g[[r, c]] * y[[r, c]];
                        }
                    }
                    let mut out = g;
                    for (r, &sg) in seg.iter().enumerate() {
                        for c in 0..cols {
                            out[[r, c]] = y[[r, c]] * (out[[r, c]] - dots[[sg, c]]);
                        }
                    }
                    send(*a, out);
                }
                Op::GatherRows(a, idx) => {
                    let mut out = Array2::<f64>::zeros(val(*a).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = out.row_mut(src);
                        dst += &g.row(r);
                    }
                    send(*a, out);
                }
                Op::SegmentSum(a, seg) => {
                    let mut out = Array2::<f64>::zeros(val(*a).dim());
                    for (r, &sg) in seg.iter().enumerate() {
                        out.row_mut(r).assign(&g.row(sg));
                    }
                    send(*a, out);
                }
                Op::TanhRatio(a, k) => {
                    let mut out = g;
                    Zip::from(&mut out)
                        .and(val(*a))
                        .for_each(|gi, &r| *gi *= k * tanh_ratio_deriv(k * r));
                    send(*a, out);
                }
                Op::AtanhRatio(a, k) => {
                    let mut out = g;
                    Zip::from(&mut out)
                        .and(val(*a))
                        .for_each(|gi, &r| *gi *= k * atanh_ratio_deriv(k * r));
                    send(*a, out);
                }
                Op::ProjectRows(a, max_norm) => {
                    let va = val(*a);
                    let mut out = g;
                    for (mut grow, xrow) in out.rows_mut().into_iter().zip(va.rows()) {
                        let n = xrow.dot(&xrow).sqrt();
                        if n > *max_norm {
                            let proj = xrow.dot(&grow) / (n * n);
                            let scale = max_norm / n;
                            Zip::from(&mut grow)
                                .and(&xrow)
                                .for_each(|gi, &xi| *gi = scale * (*gi - xi * proj));
                        }
                    }
                    send(*a, out);
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn unary_input(op: &Op) -> usize {
    match op {
        Op::Sqrt(a) | Op::Exp(a) | Op::Tanh(a) | Op::Sigmoid(a) => *a,
        _ => unreachable!("not a unary op"),
    }
}

/// Sums `g` down to `dim`, undoing broadcasting.
fn reduce_to(g: &Array2<f64>, dim: (usize, usize)) -> Array2<f64> {
    let mut out = g.clone();
    if dim.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if dim.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn broadcast_dim(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    fn one(x: usize, y: usize) -> Option<usize> {
        match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        }
    }
    Some((one(a.0, b.0)?, one(a.1, b.1)?))
}

/// `tanh(t)/t`, continuous at zero.
pub(crate) fn tanh_ratio(t: f64) -> f64 {
    if t.abs() < SERIES_CUTOFF {
        let t2 = t * t;
        1.0 - t2 / 3.0 + 2.0 * t2 * t2 / 15.0
    } else {
        t.tanh() / t
    }
}

fn tanh_ratio_deriv(t: f64) -> f64 {
    if t.abs() < SERIES_CUTOFF {
        -2.0 * t / 3.0 + 8.0 * t * t * t / 15.0
    } else {
        let th = t.tanh();
        (t * (1.0 - th * th) - th) / (t * t)
    }
}

/// `atanh(t)/t` with the argument clamped below 1, continuous at zero.
pub(crate) fn atanh_ratio(t: f64) -> f64 {
    if t.abs() < SERIES_CUTOFF {
        let t2 = t * t;
        1.0 + t2 / 3.0 + t2 * t2 / 5.0
    } else {
        (t.abs().min(ATANH_CLAMP)).atanh() / t.abs()
    }
}

fn atanh_ratio_deriv(t: f64) -> f64 {
    let a = t.abs();
    let sign = t.signum();
    if a < SERIES_CUTOFF {
        2.0 * t / 3.0 + 4.0 * t * t * t / 5.0
    } else if a >= ATANH_CLAMP {
        -sign * ATANH_CLAMP.atanh() / (a * a)
    } else {
        sign * (a / (1.0 - a * a) - a.atanh()) / (a * a)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> [usize; 2] {
        let (r, c) = self.tape.nodes.borrow()[self.id].value.dim();
        [r, c]
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    pub fn value(&self) -> Tensor {
        Tensor::from_array((*self.tape.value(self.id)).clone())
    }

    pub fn array(&self) -> Rc<Array2<f64>> {
        self.tape.value(self.id)
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn unary(
        self,
        name: &str,
        op: Op,
        f: impl FnOnce(&Array2<f64>) -> Array2<f64>,
    ) -> Result<Var<'t>> {
        let x = self.tape.value(self.id);
        let out = f(&x);
        self.tape.record(name, out, op, &[self.id])
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &str,
        op: Op,
        f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
        if broadcast_dim(a.dim(), b.dim()).is_none() {
            return Err(Error::shape(format!(
                "`{name}` cannot broadcast {:?} with {:?}",
                a.dim(),
                b.dim()
            )));
        }
        let out = f(&a, &b);
        self.tape.record(name, out, op, &[self.id, other.id])
    }

    /// Elementwise `self + other` with row/column broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary("neg", Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, k: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, k), |x| x * k)
    }

    pub fn add_scalar(self, k: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", Op::AddScalar(self.id), |x| x + k)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
        if a.ncols() != b.nrows() {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                a.dim(),
                b.dim()
            )));
        }
        let out = a.dot(&*b);
        self.tape
            .record("matmul", out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn t(self) -> Result<Var<'t>> {
        self.unary("transpose", Op::Transpose(self.id), |x| {
            x.t().as_standard_layout().into_owned()
        })
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(self) -> Result<Var<'t>> {
        self.unary("sum", Op::Sum(self.id), |x| Array2::from_elem((1, 1), x.sum()))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.unary("mean", Op::Mean(self.id), |x| {
            Array2::from_elem((1, 1), x.sum() / x.len() as f64)
        })
    }

    /// Sum along each row, `r×c → r×1`.
    pub fn row_sum(self) -> Result<Var<'t>> {
        self.unary("row_sum", Op::RowSum(self.id), |x| {
            x.sum_axis(Axis(1)).insert_axis(Axis(1))
        })
    }

    /// Sum down each column, `r×c → 1×c`.
    pub fn col_sum(self) -> Result<Var<'t>> {
        self.unary("col_sum", Op::ColSum(self.id), |x| {
            x.sum_axis(Axis(0)).insert_axis(Axis(0))
        })
    }

    /// Euclidean norm of each row, `r×c → r×1`. The gradient at a zero row
    /// is taken to be zero.
    pub fn row_norm(self) -> Result<Var<'t>> {
        self.unary("row_norm", Op::RowNorm(self.id), |x| {
            x.map_axis(Axis(1), |r| r.dot(&r).sqrt()).insert_axis(Axis(1))
        })
    }

    /// Frobenius (L2) norm of the whole tensor.
    pub fn norm(self) -> Result<Var<'t>> {
        self.square()?.sum()?.sqrt()
    }

    /// Row-wise dot product of two equally shaped tensors, `r×1`.
    pub fn row_dot(self, other: Var<'t>) -> Result<Var<'t>> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "row_dot {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        self.mul(other)?.row_sum()
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", Op::Square(self.id), |x| x.mapv(|v| v * v))
    }

    /// `√max(x, 0)`; gradient zero at zero.
    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary("sqrt", Op::Sqrt(self.id), |x| x.mapv(|v| v.max(0.0).sqrt()))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), |x| x.mapv(f64::exp))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", Op::Tanh(self.id), |x| x.mapv(f64::tanh))
    }

    /// `atanh` with the argument clamped to `±(1 − 1e-12)`.
    pub fn atanh(self) -> Result<Var<'t>> {
        self.unary("atanh", Op::Atanh(self.id), |x| {
            x.mapv(|v| v.clamp(-ATANH_CLAMP, ATANH_CLAMP).atanh())
        })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), |x| {
            x.mapv(|v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
        })
    }

    /// Natural log with the argument floored at `1e-12`.
    pub fn ln(self) -> Result<Var<'t>> {
        self.unary("ln", Op::Ln(self.id), |x| x.mapv(|v| v.max(LN_FLOOR).ln()))
    }

    /// `max(x, 0)`.
    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |x| x.mapv(|v| v.max(0.0)))
    }

    /// Softmax along `axis` (0: down columns, 1: across rows).
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        if axis > 1 {
            return Err(Error::shape(format!("softmax axis {axis} out of range")));
        }
        self.unary("softmax", Op::Softmax(self.id, axis), |x| {
            let mut out = x.clone();
            for mut lane in out.lanes_mut(Axis(axis)) {
                let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                lane.mapv_inplace(|v| (v - m).exp());
                let z = lane.sum();
                lane.mapv_inplace(|v| v / z);
            }
            out
        })
    }

    /// Softmax over groups of rows: row `r` belongs to segment `seg[r]`,
    /// and each column is normalised within each segment.
    pub fn segment_softmax(self, seg: &Index, n_segments: usize) -> Result<Var<'t>> {
        let x = self.tape.value(self.id);
        check_index(seg, n_segments, "segment_softmax")?;
        if seg.len() != x.nrows() {
            return Err(Error::shape(format!(
                "segment_softmax: {} segment ids for {} rows",
                seg.len(),
                x.nrows()
            )));
        }
        let cols = x.ncols();
        let mut maxes = Array2::from_elem((n_segments, cols), f64::NEG_INFINITY);
        for (r, &sg) in seg.iter().enumerate() {
            for c in 0..cols {
                maxes[[sg, c]] = maxes[[sg, c]].max(x[[r, c]]);
            }
        }
        let mut out = Array2::<f64>::zeros(x.dim());
        let mut sums = Array2::<f64>::zeros((n_segments, cols));
        for (r, &sg) in seg.iter().enumerate() {
            for c in 0..cols {
                let e = (x[[r, c]] - maxes[[sg, c]]).exp();
                out[[r, c]] = e;
                sums[[sg, c]] += e;
            }
        }
        for (r, &sg) in seg.iter().enumerate() {
            for c in 0..cols {
                out[[r, c]] /= sums[[sg, c]];
            }
        }
        self.tape.record(
            "segment_softmax",
            out,
            Op::SegmentSoftmax(self.id, seg.clone(), n_segments),
            &[self.id],
        )
    }

    /// Row `r` of the output is row `idx[r]` of the input.
    pub fn gather_rows(self, idx: &Index) -> Result<Var<'t>> {
        let x = self.tape.value(self.id);
        check_index(idx, x.nrows(), "gather_rows")?;
        let out = x.select(Axis(0), idx);
        self.tape
            .record("gather_rows", out, Op::GatherRows(self.id, idx.clone()), &[self.id])
    }

    /// Adds row `r` into output row `seg[r]`; the output has `n_segments`
    /// rows (empty segments are zero).
    pub fn segment_sum(self, seg: &Index, n_segments: usize) -> Result<Var<'t>> {
        let x = self.tape.value(self.id);
        check_index(seg, n_segments, "segment_sum")?;
        if seg.len() != x.nrows() {
            return Err(Error::shape(format!(
                "segment_sum: {} segment ids for {} rows",
                seg.len(),
                x.nrows()
            )));
        }
        let mut out = Array2::<f64>::zeros((n_segments, x.ncols()));
        for (r, &sg) in seg.iter().enumerate() {
            let mut dst = out.row_mut(sg);
            dst += &x.row(r);
        }
        self.tape
            .record("segment_sum", out, Op::SegmentSum(self.id, seg.clone()), &[self.id])
    }

    /// Elementwise `tanh(k·x)/(k·x)`, equal to 1 at zero.
    pub fn tanh_ratio(self, k: f64) -> Result<Var<'t>> {
        self.unary("tanh_ratio", Op::TanhRatio(self.id, k), |x| {
            x.mapv(|v| tanh_ratio(k * v))
        })
    }

    /// Elementwise `atanh(k·x)/(k·x)` (argument clamped), equal to 1 at zero.
    pub fn atanh_ratio(self, k: f64) -> Result<Var<'t>> {
        self.unary("atanh_ratio", Op::AtanhRatio(self.id, k), |x| {
            x.mapv(|v| atanh_ratio(k * v))
        })
    }

    /// Radially rescales every row whose norm exceeds `max_norm` onto the
    /// sphere of that radius.
    pub fn project_rows(self, max_norm: f64) -> Result<Var<'t>> {
        self.unary("project_rows", Op::ProjectRows(self.id, max_norm), |x| {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let n = row.dot(&row).sqrt();
                if n > max_norm {
                    row.mapv_inplace(|v| v * max_norm / n);
                }
            }
            out
        })
    }
}

fn check_index(idx: &[usize], bound: usize, name: &str) -> Result<()> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= bound) {
        return Err(Error::shape(format!(
            "`{name}` index {bad} out of range for {bound} rows"
        )));
    }
    Ok(())
}
