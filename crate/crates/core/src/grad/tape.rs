//! Reverse-mode differentiation over a fixed set of dense batched operations.
//!
//! Every value is a row-major `Array2<f64>` whose rows index batch elements.
//! Element-wise binary operations broadcast size-one rows or columns. The
//! tape records each operation with its inputs; [`Tape::backward`] walks the
//! records in reverse and accumulates analytic local derivatives into the
//! gradient blocks of a [`ParamStore`].

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Silu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var, act: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    SumAll(Var),
    RowSum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Silu(_) => "silu",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SumAll(_) => "sum_all",
            Op::RowSum(_) => "row_sum",
        }
    }
}

struct Node {
    value: Array2<f64>,
    /// Pre-activation of fused linear layers.
    aux: Option<Array2<f64>>,
    op: Op,
}

/// Recording of one forward evaluation.
pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
    params: HashMap<ParamId, Var>,
    first_nonfinite: Option<(usize, &'static str)>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible broadcast shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn zip_broadcast(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let shape = broadcast_shape(a.dim(), b.dim());
    let av = a.broadcast(shape).expect("broadcast");
    let bv = b.broadcast(shape).expect("broadcast");
    let mut out = Array2::zeros(shape);
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records operations for a later backward pass.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
            params: HashMap::new(),
            first_nonfinite: None,
        }
    }

    /// A tape that only evaluates; [`Tape::backward`] is unavailable.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, aux: Option<Array2<f64>>, op: Op) -> Var {
        if self.first_nonfinite.is_none() && !value.iter().all(|x| x.is_finite()) {
            self.first_nonfinite = Some((self.nodes.len(), op.name()));
        }
        let op = if self.record { op } else { Op::Input };
        let aux = if self.record { aux } else { None };
        self.nodes.push(Node { value, aux, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        assert_eq!(x.dim(), (1, 1), "scalar() on non-scalar node");
        x[[0, 0]]
    }

    /// Reports the first operation that produced a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            Some((idx, name)) => Err(Error::NonFinite {
                op: format!("{name} (node {idx})"),
            }),
            None => Ok(()),
        }
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, None, Op::Input)
    }

    pub fn input_view(&mut self, value: ArrayView2<f64>) -> Var {
        self.input(value.to_owned())
    }

    /// Leaf bound to a parameter block. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), None, Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// Copies a value as a new leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, None, Op::Input)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, None, Op::MatMul(a, b))
    }

    /// `act(x·w + b)` with `w` stored as `(in, out)` and `b` as `(1, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Var {
        let mut z = self.value(x).dot(self.value(w));
        z += self.value(b);
        let (value, aux) = match act {
            Activation::Identity => (z, None),
            Activation::Silu => (z.mapv(silu), Some(z)),
            Activation::Tanh => (z.mapv(f64::tanh), None),
            Activation::Sigmoid => (z.mapv(sigmoid), None),
        };
        self.push(value, aux, Op::Linear { x, w, b, act })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, None, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, None, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, None, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x / y);
        self.push(out, None, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| -x);
        self.push(out, None, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, None, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, None, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, None, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, None, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(silu);
        self.push(out, None, Op::Silu(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sin);
        self.push(out, None, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::cos);
        self.push(out, None, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, None, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, None, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, None, Op::Square(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, None, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(out, None, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, None, Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(out, None, Op::SliceRows(a, start, end))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, None, Op::SumAll(a))
    }

    /// Sum over columns, giving an `(n, 1)` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, None, Op::RowSum(a))
    }

    /// Accumulates `d loss / d param` into `store` for every parameter leaf.
    /// `loss` must be a `1×1` node.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        assert!(self.record, "backward on a non-recording tape");
        self.check_finite()?;
        assert_eq!(self.shape(loss), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(x) => *x += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("{} backward (node {i})", node.op.name()),
                });
            }
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&val(*b).t());
                    let gb = val(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Linear { x, w, b, act } => {
                    let gz = match act {
                        Activation::Identity => g,
                        Activation::Silu => {
                            let z = node.aux.as_ref().expect("pre-activation");
                            let mut gz = g;
                            Zip::from(&mut gz).and(z).for_each(|g, &z| *g *= silu_grad(z));
                            gz
                        }
                        Activation::Tanh => {
                            let mut gz = g;
                            Zip::from(&mut gz).and(&node.value).for_each(|g, &y| *g *= 1.0 - y * y);
                            gz
                        }
                        Activation::Sigmoid => {
                            let mut gz = g;
                            Zip::from(&mut gz)
                                .and(&node.value)
                                .for_each(|g, &y| *g *= y * (1.0 - y));
                            gz
                        }
                    };
                    let gx = gz.dot(&val(*w).t());
                    let gw = val(*x).t().dot(&gz);
                    let gb = gz.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, reduce_to(g.clone(), val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(g, val(*b).dim()));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, reduce_to(g.clone(), val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(-g, val(*b).dim()));
                }
                Op::Mul(a, b) => {
                    let ga = zip_broadcast(&g, val(*b), |g, y| g * y);
                    let gb = zip_broadcast(&g, val(*a), |g, x| g * x);
                    acc(&mut grads, *a, reduce_to(ga, val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(gb, val(*b).dim()));
                }
                Op::Div(a, b) => {
                    let ga = zip_broadcast(&g, val(*b), |g, y| g / y);
                    let q = zip_broadcast(&node.value, val(*b), |o, y| o / y);
                    let gb = -(&g * &q);
                    acc(&mut grads, *a, reduce_to(ga, val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(gb, val(*b).dim()));
                }
                Op::Neg(a) => acc(&mut grads, *a, -g),
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(&node.value).for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(&node.value).for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, g);
                }
                Op::Silu(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(val(*a)).for_each(|g, &x| *g *= silu_grad(x));
                    acc(&mut grads, *a, g);
                }
                Op::Sin(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(val(*a)).for_each(|g, &x| *g *= x.cos());
                    acc(&mut grads, *a, g);
                }
                Op::Cos(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(val(*a)).for_each(|g, &x| *g *= -x.sin());
                    acc(&mut grads, *a, g);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, g / val(*a)),
                Op::Square(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(val(*a)).for_each(|g, &x| *g *= 2.0 * x);
                    acc(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = val(p).nrows();
                        acc(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut full = Array2::zeros(val(*a).dim());
                    full.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, full);
                }
                Op::SliceRows(a, start, end) => {
                    let mut full = Array2::zeros(val(*a).dim());
                    full.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(&mut grads, *a, full);
                }
                Op::SumAll(a) => {
                    let c = g[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(val(*a).dim(), c));
                }
                Op::RowSum(a) => {
                    let full = g.broadcast(val(*a).dim()).expect("row_sum broadcast").to_owned();
                    acc(&mut grads, *a, full);
                }
            }
        }
        Ok(())
    }
}
