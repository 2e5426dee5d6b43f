//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation on a [`Var`] evaluates eagerly, appends one node to the
//! owning [`Tape`] and returns a handle to it. Nodes only reference earlier
//! nodes, so the tape is always in topological order and [`Tape::backward`]
//! is a single reverse sweep.
//!
//! Binary elementwise ops broadcast over leading dimensions: the shorter
//! operand's shape must be a suffix of the longer one (`[b, d] + [d]`,
//! `[b, d] * []`). Adjoints of broadcast operands are summed over the
//! repeated blocks.
//!
//! Every produced value is checked for NaN/Inf; a non-finite result is
//! reported as [`TensorError::NonFinite`] instead of being recorded.

use std::cell::{Ref, RefCell};
use std::f64::consts::PI;

use crate::fwht::fwht_rows;
use crate::tensor::{matmul_into, Result, Tensor, TensorError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Cos(usize),
    Sum(usize),
    SumLast(usize),
    Reshape(usize),
    Fwht { src: usize, normalize: bool },
    PadLast { src: usize, width: usize },
    SliceLast { src: usize, start: usize, width: usize },
    ConcatLast(Vec<usize>),
    TransposeLast2(usize),
    DiagLast2(usize),
    PackedTril { src: usize, dim: usize },
    GaussianNll { y: Tensor, mean: usize, log_var: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation record for one forward/backward pair. Confined to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an input (parameter, data or noise).
    pub fn leaf(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn scalar(&self, value: f64) -> Result<Var<'_>> {
        self.leaf(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes and gradients. Existing handles become invalid.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.grads.borrow_mut().clear();
    }

    /// Seeds `d objective / d objective = 1` and sweeps the tape in reverse.
    /// Gradients from any earlier call are discarded first.
    pub fn backward(&self, objective: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(objective.tape, self), "variable from another tape");
        let nodes = self.nodes.borrow();
        let seed = &nodes[objective.id].value;
        if seed.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[objective.id] = Some(Tensor::ones(seed.shape().to_vec()));
        for id in (0..=objective.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last `backward` objective with respect to `var`;
    /// zeros if `var` did not influence it.
    pub fn grad(&self, var: Var<'_>) -> Tensor {
        let grads = self.grads.borrow();
        match grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes.borrow()[var.id].value.shape().to_vec()),
        }
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }
}

/// Output shape for suffix broadcasting of `a` against `b`.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] == *short {
        Ok(long.to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn binary(a: &Tensor, b: &Tensor, out_shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = out_shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let (na, nb) = (ad.len(), bd.len());
    let data = (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect();
    Tensor::new(out_shape, data).expect("broadcast shape")
}

/// Sums a full-size adjoint down to `len` elements (the broadcast operand).
fn reduce_to(full: Vec<f64>, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    if full.len() == len {
        return Tensor::new(shape.to_vec(), full).expect("same length");
    }
    let mut out = vec![0.0; len];
    for (i, v) in full.into_iter().enumerate() {
        out[i % len] += v;
    }
    Tensor::new(shape.to_vec(), out).expect("reduced length")
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            accumulate(grads, *a, reduce_to(gd.to_vec(), val(*a).shape()));
            let gb = gd.iter().map(|v| sign * v).collect();
            accumulate(grads, *b, reduce_to(gb, val(*b).shape()));
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let (na, nb) = (ad.len(), bd.len());
            let ga = gd.iter().enumerate().map(|(i, g)| g * bd[i % nb]).collect();
            let gb = gd.iter().enumerate().map(|(i, g)| g * ad[i % na]).collect();
            accumulate(grads, *a, reduce_to(ga, val(*a).shape()));
            accumulate(grads, *b, reduce_to(gb, val(*b).shape()));
        }
        Op::Div(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let (na, nb) = (ad.len(), bd.len());
            let ga = gd.iter().enumerate().map(|(i, g)| g / bd[i % nb]).collect();
            let gb = gd
                .iter()
                .enumerate()
                .map(|(i, g)| -g * ad[i % na] / (bd[i % nb] * bd[i % nb]))
                .collect();
            accumulate(grads, *a, reduce_to(ga, val(*a).shape()));
            accumulate(grads, *b, reduce_to(gb, val(*b).shape()));
        }
        Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
        Op::Offset(a) => accumulate(grads, *a, g.clone()),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, k) = (av.shape()[0], av.shape()[1]);
            let m = bv.shape()[1];
            let bt = bv.transpose().expect("matrix");
            let mut ga = vec![0.0; n * k];
            matmul_into(gd, bt.data(), &mut ga, n, m, k);
            let at = av.transpose().expect("matrix");
            let mut gb = vec![0.0; k * m];
            matmul_into(at.data(), gd, &mut gb, k, n, m);
            accumulate(grads, *a, Tensor::new(vec![n, k], ga).expect("shape"));
            accumulate(grads, *b, Tensor::new(vec![k, m], gb).expect("shape"));
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose().expect("matrix")),
        Op::Relu(a) => {
            let x = val(*a).data();
            let ga = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(grads, *a, Tensor::new(val(*a).shape().to_vec(), ga).expect("shape"));
        }
        Op::Exp(a) => {
            let ga = g.zip_map(&node.value, |g, y| g * y).expect("shape");
            accumulate(grads, *a, ga);
        }
        Op::Ln(a) => accumulate(grads, *a, g.zip_map(val(*a), |g, x| g / x).expect("shape")),
        Op::Sqrt(a) => {
            let ga = g
                .zip_map(&node.value, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 })
                .expect("shape");
            accumulate(grads, *a, ga);
        }
        Op::Square(a) => accumulate(grads, *a, g.zip_map(val(*a), |g, x| 2.0 * g * x).expect("shape")),
        Op::Cos(a) => accumulate(grads, *a, g.zip_map(val(*a), |g, x| -g * x.sin()).expect("shape")),
        Op::Sum(a) => {
            let s = gd[0];
            accumulate(grads, *a, Tensor::full(val(*a).shape().to_vec(), s));
        }
        Op::SumLast(a) => {
            let src = val(*a);
            let w = src.last_dim();
            let ga = (0..src.len()).map(|i| gd[i / w]).collect();
            accumulate(grads, *a, Tensor::new(src.shape().to_vec(), ga).expect("shape"));
        }
        Op::Reshape(a) => {
            accumulate(grads, *a, g.reshape(val(*a).shape().to_vec()).expect("same length"));
        }
        Op::Fwht { src, normalize } => {
            // H is symmetric, so the adjoint is the same transform.
            let mut ga = g.clone();
            let d = ga.last_dim();
            fwht_rows(ga.data_mut(), d, *normalize).expect("validated in forward");
            accumulate(grads, *src, ga);
        }
        Op::PadLast { src, width } => {
            let w = node.value.last_dim();
            let rows = node.value.len() / w;
            let mut ga = Vec::with_capacity(rows * width);
            for r in 0..rows {
                ga.extend_from_slice(&gd[r * w..r * w + width]);
            }
            accumulate(grads, *src, Tensor::new(val(*src).shape().to_vec(), ga).expect("shape"));
        }
        Op::SliceLast { src, start, width } => {
            let w_out = node.value.last_dim();
            let rows = node.value.len() / w_out.max(1);
            let mut ga = vec![0.0; rows * width];
            for r in 0..rows {
                ga[r * width + start..r * width + start + w_out].copy_from_slice(&gd[r * w_out..(r + 1) * w_out]);
            }
            accumulate(grads, *src, Tensor::new(val(*src).shape().to_vec(), ga).expect("shape"));
        }
        Op::ConcatLast(parts) => {
            let w_out = node.value.last_dim();
            let rows = node.value.len() / w_out.max(1);
            let mut offset = 0;
            for &p in parts {
                let w = val(p).last_dim();
                let mut gp = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    gp.extend_from_slice(&gd[r * w_out + offset..r * w_out + offset + w]);
                }
                accumulate(grads, p, Tensor::new(val(p).shape().to_vec(), gp).expect("shape"));
                offset += w;
            }
        }
        Op::TransposeLast2(a) => {
            let gt = transpose_last2(g);
            accumulate(grads, *a, gt);
        }
        Op::DiagLast2(a) => {
            let src = val(*a);
            let n = src.last_dim();
            let mut ga = vec![0.0; src.len()];
            for (m, chunk) in ga.chunks_exact_mut(n * n).enumerate() {
                for i in 0..n {
                    chunk[i * n + i] = gd[m * n + i];
                }
            }
            accumulate(grads, *a, Tensor::new(src.shape().to_vec(), ga).expect("shape"));
        }
        Op::PackedTril { src, dim } => {
            let n = *dim;
            let l = node.value.data();
            let mut ga = vec![0.0; n * (n + 1) / 2];
            for i in 0..n {
                for j in 0..=i {
                    let k = i * (i + 1) / 2 + j;
                    ga[k] = if i == j {
                        gd[i * n + j] * l[i * n + j]
                    } else {
                        gd[i * n + j]
                    };
                }
            }
            accumulate(grads, *src, Tensor::vector(ga));
        }
        Op::GaussianNll { y, mean, log_var } => {
            let (m, lv) = (val(*mean), val(*log_var));
            let (md, lvd, yd) = (m.data(), lv.data(), y.data());
            let nl = lvd.len();
            let s = gd[0];
            let mut gm = vec![0.0; md.len()];
            let mut glv = vec![0.0; md.len()];
            for i in 0..md.len() {
                let prec = (-lvd[i % nl]).exp();
                let r = yd[i] - md[i];
                gm[i] = -s * r * prec;
                glv[i] = 0.5 * s * (1.0 - r * r * prec);
            }
            accumulate(grads, *mean, Tensor::new(m.shape().to_vec(), gm).expect("shape"));
            accumulate(grads, *log_var, reduce_to(glv, lv.shape()));
        }
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let mut shape = s.to_vec();
    let k = shape.len();
    shape.swap(k - 2, k - 1);
    let mut out = vec![0.0; t.len()];
    for (src, dst) in t.data().chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    Tensor::new(shape, out).expect("shape")
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrowed view of the recorded value.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value_ref().item()
    }

    pub fn grad(&self) -> Tensor {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables from different tapes");
    }

    fn elementwise(&self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = {
            let (a, b) = (self.value_ref(), other.value_ref());
            let shape = broadcast_shape(name, a.shape(), b.shape())?;
            binary(&a, &b, shape, f)
        };
        self.tape.push(out, op, name)
    }

    fn unary(&self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let out = self.value_ref().map(f);
        self.tape.push(out, op, name)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", Op::Offset(self.id), |x| x + c)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = self.value_ref().matmul(&other.value_ref())?;
        self.tape.push(out, Op::MatMul(self.id, other.id), "matmul")
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let out = self.value_ref().transpose()?;
        self.tape.push(out, Op::Transpose(self.id), "transpose")
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary("ln", Op::Ln(self.id), f64::ln)
    }

    /// Square root; the adjoint at 0 is taken as 0.
    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.unary("sqrt", Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary("square", Op::Square(self.id), |x| x * x)
    }

    pub fn cos(&self) -> Result<Var<'t>> {
        self.unary("cos", Op::Cos(self.id), f64::cos)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value_ref().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), "sum")
    }

    /// Sums over the last axis: `[.., n] -> [..]`.
    pub fn sum_last(&self) -> Result<Var<'t>> {
        let out = {
            let v = self.value_ref();
            let w = v.last_dim();
            let shape = v.shape()[..v.rank().saturating_sub(1)].to_vec();
            let data = v.data().chunks_exact(w).map(|c| c.iter().sum()).collect();
            Tensor::new(shape, data)?
        };
        self.tape.push(out, Op::SumLast(self.id), "sum_last")
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = self.value_ref().reshape(shape)?;
        self.tape.push(out, Op::Reshape(self.id), "reshape")
    }

    /// Walsh-Hadamard transform of every row along the last axis.
    pub fn fwht(&self, normalize: bool) -> Result<Var<'t>> {
        let mut out = self.value();
        let d = out.last_dim();
        fwht_rows(out.data_mut(), d, normalize).map_err(|e| TensorError::Invalid {
            op: "fwht",
            message: e.to_string(),
        })?;
        self.tape.push(
            out,
            Op::Fwht {
                src: self.id,
                normalize,
            },
            "fwht",
        )
    }

    /// Zero-pads the last axis up to `to` entries.
    pub fn pad_last(&self, to: usize) -> Result<Var<'t>> {
        let (out, width) = {
            let v = self.value_ref();
            let w = v.last_dim();
            if to < w {
                return Err(TensorError::Invalid {
                    op: "pad_last",
                    message: format!("cannot pad width {w} down to {to}"),
                });
            }
            let mut shape = v.shape().to_vec();
            *shape.last_mut().expect("rank >= 1") = to;
            let mut data = Vec::with_capacity(v.len() / w.max(1) * to);
            for row in v.data().chunks_exact(w) {
                data.extend_from_slice(row);
                data.extend(std::iter::repeat_n(0.0, to - w));
            }
            (Tensor::new(shape, data)?, w)
        };
        if width == to {
            return Ok(*self);
        }
        self.tape.push(out, Op::PadLast { src: self.id, width }, "pad_last")
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let (out, width) = {
            let v = self.value_ref();
            let w = v.last_dim();
            if start + len > w {
                return Err(TensorError::Invalid {
                    op: "slice_last",
                    message: format!("range {start}..{} exceeds width {w}", start + len),
                });
            }
            let mut shape = v.shape().to_vec();
            *shape.last_mut().expect("rank >= 1") = len;
            let data = v
                .data()
                .chunks_exact(w)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect();
            (Tensor::new(shape, data)?, w)
        };
        if start == 0 && len == width {
            return Ok(*self);
        }
        self.tape.push(
            out,
            Op::SliceLast {
                src: self.id,
                start,
                width,
            },
            "slice_last",
        )
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_last",
            message: "no inputs".into(),
        })?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let out = {
            let values: Vec<_> = parts.iter().map(|p| p.value_ref()).collect();
            let lead = &values[0].shape()[..values[0].rank() - 1];
            for v in &values[1..] {
                if &v.shape()[..v.rank() - 1] != lead {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_last",
                        lhs: values[0].shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
            }
            let total: usize = values.iter().map(|v| v.last_dim()).sum();
            let rows = values[0].len() / values[0].last_dim().max(1);
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &values {
                    data.extend_from_slice(v.row(r));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::new(shape, data)?
        };
        let ids = parts.iter().map(|p| p.id).collect();
        first.tape.push(out, Op::ConcatLast(ids), "concat_last")
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Var<'t>> {
        let out = {
            let v = self.value_ref();
            if v.rank() < 2 {
                return Err(TensorError::Rank {
                    op: "transpose_last2",
                    expected: 2,
                    shape: v.shape().to_vec(),
                });
            }
            transpose_last2(&v)
        };
        self.tape.push(out, Op::TransposeLast2(self.id), "transpose_last2")
    }

    /// Diagonals of the trailing square matrices: `[.., n, n] -> [.., n]`.
    pub fn diag_last2(&self) -> Result<Var<'t>> {
        let out = {
            let v = self.value_ref();
            let s = v.shape();
            if v.rank() < 2 || s[s.len() - 1] != s[s.len() - 2] {
                return Err(TensorError::Invalid {
                    op: "diag_last2",
                    message: format!("trailing axes of {s:?} are not square"),
                });
            }
            let n = s[s.len() - 1];
            let data = v
                .data()
                .chunks_exact(n * n)
                .flat_map(|m| (0..n).map(move |i| m[i * n + i]))
                .collect();
            Tensor::new(s[..s.len() - 1].to_vec(), data)?
        };
        self.tape.push(out, Op::DiagLast2(self.id), "diag_last2")
    }

    /// Unpacks a row-major lower triangle of length `n(n+1)/2` into an
    /// `n×n` matrix whose diagonal is `exp` of the packed diagonal entries.
    pub fn packed_tril(&self, n: usize) -> Result<Var<'t>> {
        let out = {
            let v = self.value_ref();
            if v.shape() != [n * (n + 1) / 2] {
                return Err(TensorError::ShapeMismatch {
                    op: "packed_tril",
                    lhs: v.shape().to_vec(),
                    rhs: vec![n * (n + 1) / 2],
                });
            }
            let p = v.data();
            let mut l = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..=i {
                    let x = p[i * (i + 1) / 2 + j];
                    l[i * n + j] = if i == j { x.exp() } else { x };
                }
            }
            Tensor::new(vec![n, n], l)?
        };
        self.tape
            .push(out, Op::PackedTril { src: self.id, dim: n }, "packed_tril")
    }
}

/// Gaussian negative log-likelihood summed over all elements:
/// `½ Σ [ln 2π + log_var + (y - mean)² / exp(log_var)]`.
/// `log_var` broadcasts over leading dimensions of `mean`.
pub fn gaussian_nll<'t>(y: &Tensor, mean: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
    mean.same_tape(&log_var);
    let out = {
        let (m, lv) = (mean.value_ref(), log_var.value_ref());
        if y.shape() != m.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "gaussian_nll",
                lhs: y.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        broadcast_shape("gaussian_nll", m.shape(), lv.shape())?;
        if m.len() < lv.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gaussian_nll",
                lhs: m.shape().to_vec(),
                rhs: lv.shape().to_vec(),
            });
        }
        if !y.is_finite() {
            return Err(TensorError::NonFinite { op: "gaussian_nll" });
        }
        let (yd, md, lvd) = (y.data(), m.data(), lv.data());
        let nl = lvd.len();
        let total: f64 = (0..md.len())
            .map(|i| {
                let l = lvd[i % nl];
                let r = yd[i] - md[i];
                LN_2PI + l + r * r * (-l).exp()
            })
            .sum();
        Tensor::scalar(0.5 * total)
    };
    mean.tape.push(
        out,
        Op::GaussianNll {
            y: y.clone(),
            mean: mean.id,
            log_var: log_var.id,
        },
        "gaussian_nll",
    )
}

/// `½ ln 2π`, the standard normal NLL at its mode.
pub fn half_ln_2pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central finite differences of `f` at `x` (independent of the tape).
    fn fd_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.shape().to_vec());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let num = a.max_abs_diff(b);
        let den = a.data().iter().chain(b.data()).fold(1e-8, |m: f64, v| m.max(v.abs()));
        num / den
    }

    /// Evaluates a taped scalar function of one input and checks its
    /// gradient against central differences.
    fn check(x: &Tensor, build: &dyn for<'a> Fn(Var<'a>) -> Result<Var<'a>>) -> f64 {
        let tape = Tape::new();
        let v = tape.leaf(x.clone()).unwrap();
        let out = build(v).unwrap();
        tape.backward(out).unwrap();
        let analytic = v.grad();
        let numeric = fd_grad(x, &|xx| {
            let tape = Tape::new();
            let v = tape.leaf(xx.clone()).unwrap();
            build(v).unwrap().item().unwrap()
        });
        rel_err(&analytic, &numeric)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>())
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.leaf(t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let c = tape.leaf(t(&[2], &[2.0, 3.0])).unwrap();
        let z = tape.leaf(t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(c.mul(z).unwrap().value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn product_rule_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.leaf(t(&[2], &[5.0, 7.0])).unwrap();
        let s = a.mul(b).unwrap().sum().unwrap();
        tape.backward(s).unwrap();
        assert_eq!(a.grad().data(), &[5.0, 7.0]);
        assert_eq!(b.grad().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![2])).unwrap();
        let err = a.add(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[2]"));
    }

    #[test]
    fn broadcast_adjoint_reduces_over_batch() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let b = tape.leaf(t(&[2], &[10.0, 20.0])).unwrap();
        let s = a.mul(b).unwrap().sum().unwrap();
        tape.backward(s).unwrap();
        assert_eq!(b.grad().data(), &[9.0, 12.0]);
        assert_eq!(a.grad().data(), &[10.0, 20.0, 10.0, 20.0, 10.0, 20.0]);
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let i2 = tape.leaf(Tensor::eye(2)).unwrap();
        let v = tape.leaf(t(&[2, 1], &[1.0, 2.0])).unwrap();
        assert_eq!(i2.matmul(v).unwrap().value().data(), &[1.0, 2.0]);
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let ones = tape.leaf(t(&[2, 1], &[1.0, 1.0])).unwrap();
        // Brute-force oracle: row sums.
        assert_eq!(a.matmul(ones).unwrap().value().data(), &[3.0, 7.0]);
        assert!(matches!(
            a.matmul(a.reshape(vec![4, 1]).unwrap()),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let b = random(&[3, 4], 2);
        let err = check(&random(&[2, 3], 1), &|a| {
            let bv = a.tape().leaf(b.clone())?;
            a.matmul(bv)?.square()?.sum()
        });
        assert!(err < 1e-6, "{err}");
        let a = random(&[2, 3], 3);
        let err = check(&random(&[3, 4], 4), &|b| {
            let av = b.tape().leaf(a.clone())?;
            av.matmul(b)?.cos()?.sum()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn relu_examples() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let r = x.relu().unwrap();
        assert_eq!(r.value().data(), &[0.0, 0.0, 2.0]);
        let y = tape.leaf(t(&[2], &[-1.0, 2.0])).unwrap();
        let s = y.relu().unwrap().sum().unwrap();
        tape.backward(s).unwrap();
        assert_eq!(y.grad().data(), &[0.0, 1.0]);
        let z = tape.leaf(t(&[1], &[0.0])).unwrap();
        let s = z.relu().unwrap().sum().unwrap();
        tape.backward(s).unwrap();
        assert_eq!(z.grad().data(), &[0.0]);
    }

    #[test]
    fn gaussian_nll_examples() {
        let tape = Tape::new();
        let m = tape.leaf(t(&[1], &[0.0])).unwrap();
        let lv = tape.leaf(t(&[1], &[0.0])).unwrap();
        let nll0 = gaussian_nll(&t(&[1], &[0.0]), m, lv).unwrap().item().unwrap();
        assert!((nll0 - 0.918_938_5).abs() < 1e-7);
        assert!((nll0 - half_ln_2pi()).abs() < 1e-15);
        let nll1 = gaussian_nll(&t(&[1], &[1.0]), m, lv).unwrap();
        assert!((nll1.item().unwrap() - 1.418_938_5).abs() < 1e-7);
        tape.backward(nll1).unwrap();
        assert!((m.grad().data()[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_nll_gradients() {
        let y = random(&[4, 2], 11);
        let lv = random(&[2], 12);
        let err = check(&random(&[4, 2], 13), &|m| {
            let lvv = m.tape().leaf(lv.clone())?;
            gaussian_nll(&y, m, lvv)
        });
        assert!(err < 1e-6, "{err}");
        let m = random(&[4, 2], 14);
        let err = check(&lv, &|l| {
            let mv = l.tape().leaf(m.clone())?;
            gaussian_nll(&y, mv, l)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(x.grad().data(), &[1.0, 1.0, 1.0]);
        tape.backward(x.square().unwrap().sum().unwrap()).unwrap();
        assert_eq!(x.grad().data(), &[2.0, 4.0, 6.0]);
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn non_finite_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1], &[-1.0])).unwrap();
        assert_eq!(x.ln().unwrap_err(), TensorError::NonFinite { op: "ln" });
        let z = tape.leaf(t(&[1], &[0.0])).unwrap();
        assert!(x.div(z).is_err());
        assert!(tape.leaf(t(&[1], &[f64::NAN])).is_err());
    }

    #[test]
    fn reset_then_replay_gives_same_gradients() {
        let tape = Tape::new();
        let run = |tape: &Tape| {
            let x = tape.leaf(t(&[2], &[0.5, -1.5])).unwrap();
            let y = x.exp().unwrap().mul(x).unwrap().sum().unwrap();
            tape.backward(y).unwrap();
            x.grad()
        };
        let first = run(&tape);
        let x_again = {
            // Second backward on the same graph must not accumulate.
            let x = Var { tape: &tape, id: 0 };
            let y = Var {
                tape: &tape,
                id: tape.len() - 1,
            };
            tape.backward(y).unwrap();
            x.grad()
        };
        assert_eq!(first, x_again);
        tape.reset();
        assert!(tape.is_empty());
        assert_eq!(run(&tape), first);
    }

    #[test]
    fn structural_ops_gradients() {
        let x = random(&[2, 3, 4], 21);
        let w = random(&[2, 3, 5], 22);
        let err = check(&x, &|v| {
            let wv = v.tape().leaf(w.clone())?;
            let padded = v.pad_last(5)?.mul(wv)?;
            padded.slice_last(1, 3)?.square()?.sum_last()?.sum()
        });
        assert!(err < 1e-6, "{err}");
        let sq = random(&[2, 4, 4], 23);
        let err = check(&sq, &|v| {
            let t2 = v.transpose_last2()?;
            let prod = t2.mul(v.cos()?)?;
            prod.diag_last2()?.exp()?.sum()
        });
        assert!(err < 1e-6, "{err}");
        let a = random(&[3, 2], 24);
        let err = check(&random(&[3, 3], 25), &|v| {
            let av = v.tape().leaf(a.clone())?;
            let c = Var::concat_last(&[v, av, v])?;
            c.square()?.mul(c)?.sum()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn packed_tril_layout_and_gradient() {
        let tape = Tape::new();
        let p = tape.leaf(t(&[3], &[0.0, 2.0, 0.5f64.ln()])).unwrap();
        let l = p.packed_tril(2).unwrap();
        assert_eq!(l.value().data(), &[1.0, 0.0, 2.0, 0.5]);
        let err = check(&random(&[6], 26), &|v| {
            let l = v.packed_tril(3)?;
            l.matmul(l.transpose()?)?.square()?.sum()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fwht_op_matches_kernel_and_adjoint() {
        let tape = Tape::new();
        let x = tape
            .leaf(t(&[2, 4], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]))
            .unwrap();
        let y = x.fwht(false).unwrap();
        assert_eq!(y.value().data(), &[1.0; 8]);
        let s = tape.leaf(Tensor::ones(vec![4])).unwrap();
        let total = s.fwht(false).unwrap().sum().unwrap();
        tape.backward(total).unwrap();
        assert_eq!(s.grad().data(), &[4.0, 0.0, 0.0, 0.0]);
        let odd = tape.leaf(Tensor::ones(vec![3])).unwrap();
        assert!(odd.fwht(true).is_err());
    }

    #[test]
    fn deterministic_replay_is_bit_identical() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(random(&[4, 8], 31)).unwrap();
            let w = tape.leaf(random(&[8, 8], 32)).unwrap();
            let y = x.matmul(w).unwrap().relu().unwrap().fwht(true).unwrap();
            let s = y.square().unwrap().sum().unwrap();
            tape.backward(s).unwrap();
            (s.item().unwrap().to_bits(), w.grad())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn relu_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..20)) {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::vector(v)).unwrap();
            let once = x.relu().unwrap();
            prop_assert_eq!(once.relu().unwrap().value(), once.value());
        }

        #[test]
        fn composite_gradients_match_finite_differences(seed in 0u64..1000) {
            let x = random(&[3, 4], seed);
            let w = random(&[4, 4], seed + 1);
            let err = check(&x, &|v| {
                let wv = v.tape().leaf(w.clone())?;
                let h = v.matmul(wv)?.fwht(true)?;
                let e = h.scale(0.3)?.exp()?;
                let q = e.div(h.square()?.add_scalar(1.0)?)?;
                q.sub(v.sqrt_safe()?)?.sum()
            });
            prop_assert!(err < 1e-5, "rel err {}", err);
        }
    }

    impl<'t> Var<'t> {
        /// sqrt(x² + 1), smooth everywhere; exercises sqrt + square + offset.
        fn sqrt_safe(&self) -> Result<Var<'t>> {
            self.square()?.add_scalar(1.0)?.sqrt()
        }
    }
}
