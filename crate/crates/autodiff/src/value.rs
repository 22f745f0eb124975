use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Numeric mode of a graph. Storage is always `f64`; in `F32` mode every
/// primitive rounds its result to the nearest `f32`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }

    fn merge(self, other: Precision) -> Precision {
        if self == Precision::F32 || other == Precision::F32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static DEFAULT_PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` without recording any operation into a graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

pub(crate) fn with_grad_enabled<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(true));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

/// Precision assigned to leaves created on this thread.
pub fn default_precision() -> Precision {
    DEFAULT_PRECISION.with(|p| p.get())
}

pub fn set_default_precision(p: Precision) {
    DEFAULT_PRECISION.with(|c| c.set(p));
}

pub fn with_precision<T>(p: Precision, f: impl FnOnce() -> T) -> T {
    let prev = DEFAULT_PRECISION.with(|c| c.replace(p));
    struct Restore(Precision);
    impl Drop for Restore {
        fn drop(&mut self) {
            DEFAULT_PRECISION.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<f64>>,
    pub(crate) precision: Precision,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op>,
}

impl Drop for Node {
    // Long unrolled graphs would otherwise recurse once per node on drop.
    fn drop(&mut self) {
        let Some(op) = self.op.take() else { return };
        let mut stack = op.inputs;
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Arc::try_unwrap(v.0) {
                if let Some(op) = node.op.take() {
                    stack.extend(op.inputs);
                }
            }
        }
    }
}

/// A node in a differentiable computation graph.
#[derive(Clone)]
pub struct Value(pub(crate) Arc<Node>);

impl Value {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Value {
        assert_eq!(
            data.len(),
            numel(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        let precision = default_precision();
        let data = if precision == Precision::F32 {
            data.into_iter().map(|v| precision.round(v)).collect()
        } else {
            data
        };
        Value(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Arc::new(data),
            precision,
            requires_grad,
            op: None,
        }))
    }

    /// A leaf that never accumulates gradient.
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Value {
        Value::leaf(data, shape.to_vec(), false)
    }

    /// A trainable leaf.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Value {
        Value::leaf(data, shape.to_vec(), true)
    }

    pub fn scalar(v: f64) -> Value {
        Value::constant(vec![v], &[])
    }

    pub fn full(shape: &[usize], v: f64) -> Value {
        Value::constant(vec![v; numel(shape)], shape)
    }

    pub fn zeros(shape: &[usize]) -> Value {
        Value::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Value {
        Value::full(shape, 1.0)
    }

    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        kind: crate::ops::OpKind,
        inputs: Vec<Value>,
    ) -> Value {
        debug_assert_eq!(data.len(), numel(&shape));
        let precision = inputs
            .iter()
            .fold(Precision::F64, |p, v| p.merge(v.precision()));
        let data = if precision == Precision::F32 {
            data.into_iter().map(|v| precision.round(v)).collect()
        } else {
            data
        };
        Value::from_op_shared(Arc::new(data), shape, precision, kind, inputs)
    }

    pub(crate) fn from_op_shared(
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        precision: Precision,
        kind: crate::ops::OpKind,
        inputs: Vec<Value>,
    ) -> Value {
        let track = grad_enabled() && inputs.iter().any(|v| v.requires_grad());
        Value(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            precision,
            requires_grad: track,
            op: track.then_some(Op { kind, inputs }),
        }))
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn precision(&self) -> Precision {
        self.0.precision
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when this value was produced by a recorded operation.
    pub fn has_producer(&self) -> bool {
        self.0.op.is_some()
    }

    /// Value of a single-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same data, no history, no gradient.
    pub fn detach(&self) -> Value {
        Value(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            precision: self.0.precision,
            requires_grad: false,
            op: None,
        }))
    }

    /// Same data as a fresh trainable leaf.
    pub fn detach_requiring_grad(&self) -> Value {
        Value(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            precision: self.0.precision,
            requires_grad: true,
            op: None,
        }))
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Value")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}
