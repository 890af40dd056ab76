//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Tensors are row-major `Rc`-shared buffers; a [`Tape`] records every
//! differentiable op so [`Tape::backward`] can replay them in reverse.
//! One tape serves one forward/backward pair and is single-threaded by
//! contract; the kernels underneath may parallelize internally with a
//! fixed per-element reduction order, so results are bitwise reproducible
//! regardless of thread count.
//!
//! Training runs in `f32`; gradient checks instantiate the same code at
//! `f64`, which is what the element-type parameter exists for.

mod gemm;
mod ops;

pub use gemm::{conv_out_dim, gemm_nn, gemm_nt, gemm_tn};
pub use ops::RunningStats;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Element type of the engine: `f32` for training, `f64` for checks.
pub trait Element:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
}

/// Train-time vs inference behavior of mode-dependent ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct TensorInner<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    /// Id of the tape whose op produced this tensor, if any.
    produced_by: Option<u64>,
}

/// An n-dimensional real array, possibly participating in a gradient tape.
pub struct Tensor<T: Element> {
    inner: Rc<RefCell<TensorInner<T>>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Self::raw(shape.to_vec(), data))
    }

    fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape,
                data,
                grad: None,
                requires_grad: false,
                produced_by: None,
            })),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::raw(shape.to_vec(), vec![T::ZERO; numel])
    }

    pub fn scalar(v: T) -> Self {
        Self::raw(vec![], vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self::raw(shape.to_vec(), (0..numel).map(&mut f).collect())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrow the raw data; release before mutating the same tensor.
    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    /// Replace the contents in place (shape must match).
    pub fn set_data(&self, data: &[T]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data.copy_from_slice(data);
    }

    /// Apply an update to every element (used by the optimizer).
    pub fn update_data(&self, f: impl FnMut(usize, &mut T)) {
        let mut inner = self.inner.borrow_mut();
        inner.data.iter_mut().enumerate().for_each(adapt(f));
    }

    pub fn item(&self) -> T {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn get(&self, i: usize) -> T {
        self.inner.borrow().data[i]
    }

    pub fn set(&self, i: usize, v: T) {
        self.inner.borrow_mut().data[i] = v;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) -> &Self {
        self.inner.borrow_mut().requires_grad = v;
        self
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut inner = self.inner.borrow_mut();
        match &mut inner.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => inner.grad = Some(delta.to_vec()),
        }
    }

    fn produced_by(&self) -> Option<u64> {
        self.inner.borrow().produced_by
    }

    fn mark_produced(&self, tape_id: u64) {
        self.inner.borrow_mut().produced_by = Some(tape_id);
    }

    /// True when backward through `tape` must deliver a gradient here.
    fn wants_grad(&self, tape_id: u64) -> bool {
        let inner = self.inner.borrow();
        inner.requires_grad || inner.produced_by == Some(tape_id)
    }

    /// Gradient buffer or zeros; intermediates with no consumers stay zero.
    pub fn grad_or_zeros(&self) -> Vec<T> {
        let inner = self.inner.borrow();
        inner
            .grad
            .clone()
            .unwrap_or_else(|| vec![T::ZERO; inner.data.len()])
    }
}

fn adapt<T>(mut f: impl FnMut(usize, &mut T)) -> impl FnMut((usize, &mut T)) {
    move |(i, v)| f(i, v)
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

struct Record {
    backward: Box<dyn FnOnce()>,
}

/// Ordered record of differentiable operations for one forward pass.
pub struct Tape<T: Element> {
    id: u64,
    recording: bool,
    consumed: Cell<bool>,
    records: RefCell<Vec<Record>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Element> Tape<T> {
    /// A recording tape for a forward/backward pair.
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            consumed: Cell::new(false),
            records: RefCell::new(Vec::new()),
            _marker: std::marker::PhantomData,
        }
    }

    /// A non-recording tape: forward only, no backward state kept.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub(crate) fn push_op(&self, output: &Tensor<T>, backward: impl FnOnce() + 'static) {
        if self.recording {
            output.mark_produced(self.id);
            self.records.borrow_mut().push(Record {
                backward: Box::new(backward),
            });
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    /// Populates `grad` on every tensor reachable from `loss` that asked
    /// for it. Visits each recorded op exactly once, in reverse order, and
    /// consumes the tape.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if !self.recording {
            return Err(Error::State(
                "backward called on an inference tape".into(),
            ));
        }
        if self.consumed.get() {
            return Err(Error::State(
                "backward already consumed this tape; run a new forward pass".into(),
            ));
        }
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if loss.produced_by() != Some(self.id) {
            return Err(Error::Contract(
                "loss was not produced by an op recorded on this tape".into(),
            ));
        }
        self.consumed.set(true);
        loss.accumulate_grad(&[T::ONE]);
        let records = std::mem::take(&mut *self.records.borrow_mut());
        for record in records.into_iter().rev() {
            (record.backward)();
        }
        Ok(())
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}
