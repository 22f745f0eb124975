//! Differentiable primitives.
//!
//! Shape contract violations panic with both shapes in the message, the same
//! way slice indexing does. They are programming errors, not runtime data
//! conditions.

use std::ops;
use std::sync::Arc;

use crate::kernels;
use crate::value::{numel, Value};

pub(crate) struct Op {
    pub(crate) kind: OpKind,
    pub(crate) inputs: Vec<Value>,
}

pub(crate) enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    MatMul { ta: bool, tb: bool },
    Softmax,
    SumAll,
    SumAxis,
    BroadcastTo,
    SumTo,
    Reshape,
    Permute(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize },
    Pad { axis: usize, start: usize },
    Where(Arc<Vec<bool>>),
    MaskedFill(Arc<Vec<bool>>),
    Gather(Arc<Vec<usize>>),
    Scatter(Arc<Vec<usize>>),
    TakeRows(Arc<Vec<usize>>),
    ScatterRows(Arc<Vec<usize>>),
    Clamp { lo: f64, hi: f64 },
}

fn zip_map(a: &Value, b: &Value, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn map(a: &Value, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.data().iter().map(|&x| f(x)).collect()
}

impl Value {
    fn broadcast_pair(&self, other: &Value, what: &str) -> (Value, Value) {
        if self.shape() == other.shape() {
            return (self.clone(), other.clone());
        }
        let shape = kernels::broadcast_shape(self.shape(), other.shape()).unwrap_or_else(|| {
            panic!(
                "{what}: incompatible shapes {:?} and {:?}",
                self.shape(),
                other.shape()
            )
        });
        (self.broadcast_to(&shape), other.broadcast_to(&shape))
    }

    fn binary(&self, other: &Value, kind: OpKind, f: impl Fn(f64, f64) -> f64) -> Value {
        let (a, b) = self.broadcast_pair(other, "elementwise op");
        let data = zip_map(&a, &b, f);
        let shape = a.shape().to_vec();
        Value::from_op(data, shape, kind, vec![a, b])
    }

    pub fn add(&self, other: &Value) -> Value {
        self.binary(other, OpKind::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: &Value) -> Value {
        self.binary(other, OpKind::Sub, |x, y| x - y)
    }

    pub fn mul(&self, other: &Value) -> Value {
        self.binary(other, OpKind::Mul, |x, y| x * y)
    }

    pub fn div(&self, other: &Value) -> Value {
        self.binary(other, OpKind::Div, |x, y| x / y)
    }

    pub fn scale(&self, c: f64) -> Value {
        Value::from_op(map(self, |x| x * c), self.shape().to_vec(), OpKind::Scale(c), vec![self.clone()])
    }

    pub fn neg(&self) -> Value {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Value {
        Value::from_op(map(self, |x| x + c), self.shape().to_vec(), OpKind::AddScalar, vec![self.clone()])
    }

    pub fn square(&self) -> Value {
        self.mul(self)
    }

    pub fn exp(&self) -> Value {
        Value::from_op(map(self, f64::exp), self.shape().to_vec(), OpKind::Exp, vec![self.clone()])
    }

    pub fn log(&self) -> Value {
        Value::from_op(map(self, f64::ln), self.shape().to_vec(), OpKind::Log, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Value {
        Value::from_op(map(self, f64::sqrt), self.shape().to_vec(), OpKind::Sqrt, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Value {
        let data = map(self, |x| 1.0 / (1.0 + (-x).exp()));
        Value::from_op(data, self.shape().to_vec(), OpKind::Sigmoid, vec![self.clone()])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Value {
        self.mul(&self.sigmoid())
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(&self) -> Value {
        let sign = Value::constant(map(self, |x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }), self.shape());
        self.mul(&sign)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Value {
        assert!(lo <= hi, "clamp: lo {lo} > hi {hi}");
        Value::from_op(
            map(self, |x| x.clamp(lo, hi)),
            self.shape().to_vec(),
            OpKind::Clamp { lo, hi },
            vec![self.clone()],
        )
    }

    pub fn matmul(&self, other: &Value) -> Value {
        self.matmul_t(other, false, false)
    }

    /// `op(self) @ op(other)` where `op` optionally transposes the last two
    /// axes. Operands either share all leading batch axes, or `other` is a
    /// single 2-D matrix applied to every batch entry of `self`.
    pub fn matmul_t(&self, other: &Value, ta: bool, tb: bool) -> Value {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            sa.len() >= 2 && sb.len() >= 2,
            "matmul: operands must be at least 2-D, got {sa:?} and {sb:?}"
        );
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(
            k, kb,
            "matmul: inner dimensions differ for shapes {sa:?} and {sb:?} (ta={ta}, tb={tb})"
        );
        let batch_a = &sa[..sa.len() - 2];
        let b_shared = sb.len() == 2;
        if !b_shared {
            assert_eq!(
                batch_a,
                &sb[..sb.len() - 2],
                "matmul: batch dimensions differ for shapes {sa:?} and {sb:?}"
            );
        }
        assert!(
            !(b_shared && ta && sa.len() > 2),
            "matmul: transposed batched lhs with shared rhs is unsupported ({sa:?}, {sb:?})"
        );
        let batch = numel(batch_a);
        let data = kernels::matmul(self.data(), other.data(), batch, m, k, n, ta, tb, b_shared);
        let mut shape = batch_a.to_vec();
        shape.push(m);
        shape.push(n);
        Value::from_op(data, shape, OpKind::MatMul { ta, tb }, vec![self.clone(), other.clone()])
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Value {
        let nd = self.rank();
        assert!(nd >= 2, "t: need at least 2 axes, got {:?}", self.shape());
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    /// Softmax over the last axis. Entries equal to `-inf` receive zero mass.
    pub fn softmax(&self) -> Value {
        let n = *self.shape().last().expect("softmax of a 0-d value");
        let data = kernels::softmax_last(self.data(), n);
        Value::from_op(data, self.shape().to_vec(), OpKind::Softmax, vec![self.clone()])
    }

    /// Sum of all elements, as a 0-d value.
    pub fn sum(&self) -> Value {
        let s = self.data().iter().sum();
        Value::from_op(vec![s], vec![], OpKind::SumAll, vec![self.clone()])
    }

    pub fn mean(&self) -> Value {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Value {
        assert!(axis < self.rank(), "sum_axis: axis {axis} out of range for {:?}", self.shape());
        let data = kernels::sum_axis(self.data(), self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        let out = Value::from_op(data, shape.clone(), OpKind::SumAxis, vec![self.clone()]);
        if keepdim {
            out
        } else {
            shape.remove(axis);
            out.reshape(&shape)
        }
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Value {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Value {
        if self.shape() == shape {
            return self.clone();
        }
        assert!(
            kernels::broadcast_shape(self.shape(), shape).as_deref() == Some(shape),
            "broadcast_to: cannot broadcast {:?} to {:?}",
            self.shape(),
            shape
        );
        let data = kernels::broadcast_to(self.data(), self.shape(), shape);
        Value::from_op(data, shape.to_vec(), OpKind::BroadcastTo, vec![self.clone()])
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Value {
        if self.shape() == shape {
            return self.clone();
        }
        assert!(
            kernels::broadcast_shape(shape, self.shape()).as_deref() == Some(self.shape()),
            "sum_to: {:?} does not broadcast to {:?}",
            shape,
            self.shape()
        );
        let data = kernels::sum_to(self.data(), self.shape(), shape);
        Value::from_op(data, shape.to_vec(), OpKind::SumTo, vec![self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Value {
        assert_eq!(
            numel(shape),
            self.numel(),
            "reshape: {:?} has a different element count than {:?}",
            shape,
            self.shape()
        );
        if shape == self.shape() {
            return self.clone();
        }
        Value::from_op_shared(
            self.0.data.clone(),
            shape.to_vec(),
            self.precision(),
            OpKind::Reshape,
            vec![self.clone()],
        )
    }

    pub fn permute(&self, perm: &[usize]) -> Value {
        let nd = self.rank();
        let mut seen = vec![false; nd];
        assert!(
            perm.len() == nd && perm.iter().all(|&p| p < nd && !std::mem::replace(&mut seen[p], true)),
            "permute: {perm:?} is not a permutation of the axes of {:?}",
            self.shape()
        );
        let (data, shape) = kernels::permute(self.data(), self.shape(), perm);
        Value::from_op(data, shape, OpKind::Permute(perm.to_vec()), vec![self.clone()])
    }

    pub fn concat(values: &[Value], axis: usize) -> Value {
        assert!(!values.is_empty(), "concat of zero values");
        let first = values[0].shape();
        assert!(axis < first.len(), "concat: axis {axis} out of range for {first:?}");
        for v in values {
            let s = v.shape();
            let ok = s.len() == first.len()
                && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            assert!(ok, "concat along axis {axis}: incompatible shapes {first:?} and {s:?}");
        }
        let (outer, _, inner) = kernels::split_axis(first, axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in values {
                let n = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Value::from_op(data, shape, OpKind::Concat(axis), values.to_vec())
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Value {
        assert!(
            axis < self.rank() && start <= end && end <= self.shape()[axis],
            "slice {start}..{end} on axis {axis} out of range for {:?}",
            self.shape()
        );
        let data = kernels::slice_axis(self.data(), self.shape(), axis, start, end);
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        Value::from_op(data, shape, OpKind::Slice { axis, start }, vec![self.clone()])
    }

    /// Places `self` at offset `start` inside zeros of extent `full` along `axis`.
    pub fn pad(&self, axis: usize, start: usize, full: usize) -> Value {
        assert!(
            axis < self.rank() && start + self.shape()[axis] <= full,
            "pad: cannot place {:?} at {start} within extent {full} on axis {axis}",
            self.shape()
        );
        let data = kernels::pad_axis(self.data(), self.shape(), axis, start, full);
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        Value::from_op(data, shape, OpKind::Pad { axis, start }, vec![self.clone()])
    }

    /// `mask ? self : other`, elementwise over equal shapes.
    pub fn select(mask: Arc<Vec<bool>>, a: &Value, b: &Value) -> Value {
        assert_eq!(a.shape(), b.shape(), "select: shapes {:?} and {:?} differ", a.shape(), b.shape());
        assert_eq!(mask.len(), a.numel(), "select: mask length {} vs shape {:?}", mask.len(), a.shape());
        let data = mask
            .iter()
            .zip(a.data().iter().zip(b.data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        Value::from_op(data, a.shape().to_vec(), OpKind::Where(mask), vec![a.clone(), b.clone()])
    }

    /// Replaces entries where `mask` is true by `fill`.
    pub fn masked_fill(&self, mask: Arc<Vec<bool>>, fill: f64) -> Value {
        assert_eq!(
            mask.len(),
            self.numel(),
            "masked_fill: mask length {} vs shape {:?}",
            mask.len(),
            self.shape()
        );
        let data = mask
            .iter()
            .zip(self.data())
            .map(|(&m, &x)| if m { fill } else { x })
            .collect();
        Value::from_op(data, self.shape().to_vec(), OpKind::MaskedFill(mask), vec![self.clone()])
    }

    /// Picks one entry per row along the last axis: `out[r] = self[r, index[r]]`.
    pub fn gather_last(&self, index: Arc<Vec<usize>>) -> Value {
        let shape = self.shape();
        let v = *shape.last().expect("gather_last of a 0-d value");
        let rows = self.numel() / v.max(1);
        assert_eq!(index.len(), rows, "gather_last: {} indices for shape {shape:?}", index.len());
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                assert!(i < v, "gather_last: index {i} out of range {v}");
                self.data()[r * v + i]
            })
            .collect();
        let out_shape = shape[..shape.len() - 1].to_vec();
        Value::from_op(data, out_shape, OpKind::Gather(index), vec![self.clone()])
    }

    /// Adjoint of [`Value::gather_last`]: zeros of trailing extent `width` with
    /// `self[r]` written at `index[r]`.
    pub fn scatter_last(&self, index: Arc<Vec<usize>>, width: usize) -> Value {
        assert_eq!(index.len(), self.numel(), "scatter_last: index/shape mismatch {:?}", self.shape());
        let mut data = vec![0.0; self.numel() * width];
        for (r, (&i, &x)) in index.iter().zip(self.data()).enumerate() {
            data[r * width + i] += x;
        }
        let mut shape = self.shape().to_vec();
        shape.push(width);
        Value::from_op(data, shape, OpKind::Scatter(index), vec![self.clone()])
    }

    /// Row lookup into a `[rows, width]` table; result `[ids.len(), width]`.
    pub fn take_rows(&self, ids: Arc<Vec<usize>>) -> Value {
        assert_eq!(self.rank(), 2, "take_rows: table must be 2-D, got {:?}", self.shape());
        let (rows, width) = (self.shape()[0], self.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids.iter() {
            assert!(i < rows, "take_rows: id {i} out of range {rows}");
            data.extend_from_slice(&self.data()[i * width..(i + 1) * width]);
        }
        Value::from_op(data, vec![ids.len(), width], OpKind::TakeRows(ids), vec![self.clone()])
    }

    /// Adjoint of [`Value::take_rows`]: accumulates rows into a `[rows, width]` table.
    pub fn scatter_rows(&self, ids: Arc<Vec<usize>>, rows: usize) -> Value {
        assert!(
            self.rank() == 2 && self.shape()[0] == ids.len(),
            "scatter_rows: {} ids for shape {:?}",
            ids.len(),
            self.shape()
        );
        let width = self.shape()[1];
        let mut data = vec![0.0; rows * width];
        for (r, &i) in ids.iter().enumerate() {
            let dst = &mut data[i * width..(i + 1) * width];
            for (d, s) in dst.iter_mut().zip(&self.data()[r * width..(r + 1) * width]) {
                *d += s;
            }
        }
        Value::from_op(data, vec![rows, width], OpKind::ScatterRows(ids), vec![self.clone()])
    }

    /// Vector-Jacobian product of the operation that produced `self`, built
    /// from differentiable primitives. One entry per input.
    pub(crate) fn vjp(&self, g: &Value) -> Vec<Option<Value>> {
        let op = self.op().expect("vjp on a leaf");
        let inp = &op.inputs;
        let one = |v: Value| vec![Some(v)];
        match &op.kind {
            OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
            OpKind::Sub => vec![Some(g.clone()), Some(g.neg())],
            OpKind::Mul => vec![Some(g.mul(&inp[1])), Some(g.mul(&inp[0]))],
            OpKind::Div => vec![Some(g.div(&inp[1])), Some(g.mul(self).div(&inp[1]).neg())],
            OpKind::Scale(c) => one(g.scale(*c)),
            OpKind::AddScalar => one(g.clone()),
            OpKind::Exp => one(g.mul(self)),
            OpKind::Log => one(g.div(&inp[0])),
            OpKind::Sqrt => one(g.div(&self.scale(2.0))),
            OpKind::Sigmoid => one(g.mul(&self.sub(&self.square()))),
            OpKind::MatMul { ta, tb } => {
                let (a, b) = (&inp[0], &inp[1]);
                let (ta, tb) = (*ta, *tb);
                let ga = if ta { b.matmul_t(g, tb, true) } else { g.matmul_t(b, false, !tb) };
                let gb = if b.rank() == 2 && a.rank() > 2 {
                    let k = *a.shape().last().unwrap();
                    let n = *g.shape().last().unwrap();
                    let a2 = a.reshape(&[a.numel() / k, k]);
                    let g2 = g.reshape(&[g.numel() / n, n]);
                    if tb { g2.matmul_t(&a2, true, false) } else { a2.matmul_t(&g2, true, false) }
                } else if tb {
                    g.matmul_t(a, true, ta)
                } else {
                    a.matmul_t(g, !ta, false)
                };
                vec![Some(ga), Some(gb)]
            }
            OpKind::Softmax => {
                let gy = g.mul(self);
                let s = gy.sum_axis(self.rank() - 1, true);
                one(gy.sub(&self.mul(&s)))
            }
            OpKind::SumAll | OpKind::SumAxis | OpKind::SumTo => {
                let g = if g.rank() == 0 && inp[0].rank() > 0 {
                    g.reshape(&vec![1; inp[0].rank()])
                } else {
                    g.clone()
                };
                one(g.broadcast_to(inp[0].shape()))
            }
            OpKind::BroadcastTo => one(g.sum_to(inp[0].shape())),
            OpKind::Reshape => one(g.reshape(inp[0].shape())),
            OpKind::Permute(perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                one(g.permute(&inv))
            }
            OpKind::Concat(axis) => {
                let mut start = 0;
                inp.iter()
                    .map(|v| {
                        let n = v.shape()[*axis];
                        let s = g.slice(*axis, start, start + n);
                        start += n;
                        Some(s)
                    })
                    .collect()
            }
            OpKind::Slice { axis, start } => one(g.pad(*axis, *start, inp[0].shape()[*axis])),
            OpKind::Pad { axis, start } => {
                let n = inp[0].shape()[*axis];
                one(g.slice(*axis, *start, start + n))
            }
            OpKind::Where(mask) => {
                let inv: Arc<Vec<bool>> = Arc::new(mask.iter().map(|m| !m).collect());
                vec![Some(g.masked_fill(inv, 0.0)), Some(g.masked_fill(mask.clone(), 0.0))]
            }
            OpKind::MaskedFill(mask) => one(g.masked_fill(mask.clone(), 0.0)),
            OpKind::Gather(index) => {
                let width = *inp[0].shape().last().unwrap();
                one(g.scatter_last(index.clone(), width))
            }
            OpKind::Scatter(index) => one(g.gather_last(index.clone())),
            OpKind::TakeRows(ids) => one(g.scatter_rows(ids.clone(), inp[0].shape()[0])),
            OpKind::ScatterRows(ids) => one(g.take_rows(ids.clone())),
            OpKind::Clamp { lo, hi } => {
                let outside: Arc<Vec<bool>> =
                    Arc::new(inp[0].data().iter().map(|&x| x < *lo || x > *hi).collect());
                one(g.masked_fill(outside, 0.0))
            }
        }
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $call:ident) => {
        impl ops::$trait<&Value> for &Value {
            type Output = Value;
            fn $method(self, rhs: &Value) -> Value {
                self.$call(rhs)
            }
        }
        impl ops::$trait<Value> for Value {
            type Output = Value;
            fn $method(self, rhs: Value) -> Value {
                (&self).$call(&rhs)
            }
        }
        impl ops::$trait<&Value> for Value {
            type Output = Value;
            fn $method(self, rhs: &Value) -> Value {
                (&self).$call(rhs)
            }
        }
    };
}

binop!(Add, add, add);
binop!(Sub, sub, sub);
binop!(Mul, mul, mul);
binop!(Div, div, div);

impl ops::Neg for &Value {
    type Output = Value;
    fn neg(self) -> Value {
        self.scale(-1.0)
    }
}

impl ops::Neg for Value {
    type Output = Value;
    fn neg(self) -> Value {
        self.scale(-1.0)
    }
}
