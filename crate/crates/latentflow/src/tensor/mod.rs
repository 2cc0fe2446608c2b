//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major `Vec`-backed storage, a
//! dynamically built DAG of parent links, and one backward closure per node.
//! Model state runs in `f32` ([`Tensor`]); every op is generic over
//! [`Scalar`] so gradient-check tests can rerun the same graph in `f64`.
//!
//! Tensors are immutable once produced by an op. The only sanctioned
//! mutation is the in-place parameter update inside [`AdamW::step`], which
//! is why element storage sits behind an `RwLock`: read-only tensors can be
//! shared freely across threads while the (single-threaded) optimizer keeps
//! exclusive access during updates.

mod adamw;
mod autograd;
mod ops;
mod rng;

pub use adamw::{AdamW, AdamWConfig};
pub use autograd::Gradients;
pub use rng::{seeded_normal, RngState};

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

/// Element type bound for the tensor engine: `f32` for model state, `f64`
/// for the shadow path used by finite-difference tests.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E], &mut autograd::GradSink<E>) + Send + Sync>;

pub(crate) struct Node<E: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<E>>,
    requires_grad: AtomicBool,
    name: Option<String>,
    parents: Vec<TensorBase<E>>,
    backward: Option<BackwardFn<E>>,
}

/// A dense row-major tensor, generic over the element type.
///
/// Cloning is cheap (shared storage). Use the [`Tensor`] alias for the
/// `f32` engine that all model code runs on.
pub struct TensorBase<E: Scalar> {
    node: Arc<Node<E>>,
}

/// The `f32` tensor all model state uses.
pub type Tensor = TensorBase<f32>;

impl<E: Scalar> Clone for TensorBase<E> {
    fn clone(&self) -> Self {
        TensorBase {
            node: Arc::clone(&self.node),
        }
    }
}

impl<E: Scalar> std::fmt::Debug for TensorBase<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("name", &self.node.name)
            .finish()
    }
}

impl<E: Scalar> TensorBase<E> {
    fn from_node(node: Node<E>) -> Self {
        TensorBase {
            node: Arc::new(node),
        }
    }

    /// Build a constant (non-differentiable) tensor from raw data.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::from_node(Node {
            id: fresh_id(),
            shape: shape.to_vec(),
            data: RwLock::new(data),
            requires_grad: AtomicBool::new(false),
            name: None,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Build a trainable leaf parameter with a diagnostic path name.
    pub fn param(name: impl Into<String>, data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::from_node(Node {
            id: fresh_id(),
            shape: shape.to_vec(),
            data: RwLock::new(data),
            requires_grad: AtomicBool::new(true),
            name: Some(name.into()),
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(vec![E::zero(); numel], shape).expect("zeros: consistent by construction")
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(vec![E::one(); numel], shape).expect("ones: consistent by construction")
    }

    pub fn full(value: E, shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(vec![value; numel], shape).expect("full: consistent by construction")
    }

    pub fn scalar(value: E) -> Self {
        Self::from_vec(vec![value], &[1]).expect("scalar: consistent by construction")
    }

    /// Internal constructor for op outputs.
    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<TensorBase<E>>,
        backward: Option<BackwardFn<E>>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = backward.is_some();
        Self::from_node(Node {
            id: fresh_id(),
            shape,
            data: RwLock::new(data),
            requires_grad: AtomicBool::new(requires_grad),
            name: None,
            parents: if requires_grad { parents } else { Vec::new() },
            backward,
        })
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    /// Number of rows when viewed as a 2-D matrix.
    pub fn rows(&self) -> usize {
        self.node.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns when viewed as a 2-D matrix (product of trailing dims).
    pub fn cols(&self) -> usize {
        if self.node.shape.len() <= 1 {
            self.numel()
        } else {
            self.node.shape[1..].iter().product()
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.load(Ordering::Relaxed)
    }

    /// Mark a leaf as trainable or frozen. Op outputs keep their derived flag.
    pub fn set_requires_grad(&self, flag: bool) {
        self.node.requires_grad.store(flag, Ordering::Relaxed);
    }

    /// True if this tensor is a graph leaf (no recorded op produced it).
    pub fn is_leaf(&self) -> bool {
        self.node.backward.is_none()
    }

    pub fn name(&self) -> Option<&str> {
        self.node.name.as_deref()
    }

    /// Read guard over the raw row-major storage.
    pub fn data(&self) -> RwLockReadGuard<'_, Vec<E>> {
        self.node.data.read().expect("tensor storage poisoned")
    }

    /// Copy the elements out.
    pub fn to_vec(&self) -> Vec<E> {
        self.data().clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() requires a scalar tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.data()[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Overwrite the stored elements. Reserved for the optimizer and
    /// checkpoint loader; only valid on leaves.
    pub(crate) fn overwrite(&self, new_data: &[E]) -> Result<()> {
        if new_data.len() != self.numel() {
            return Err(Error::Shape(format!(
                "overwrite length {} does not match tensor numel {}",
                new_data.len(),
                self.numel()
            )));
        }
        let mut guard = self.node.data.write().expect("tensor storage poisoned");
        guard.copy_from_slice(new_data);
        Ok(())
    }

    /// Mutate the stored elements in place. Reserved for the optimizer.
    pub(crate) fn update_in_place(&self, f: impl FnOnce(&mut [E])) {
        let mut guard = self.node.data.write().expect("tensor storage poisoned");
        f(&mut guard);
    }

    pub(crate) fn parents(&self) -> &[TensorBase<E>] {
        &self.node.parents
    }

    pub(crate) fn backward_fn(&self) -> Option<&BackwardFn<E>> {
        self.node.backward.as_ref()
    }

    /// Detach from the graph: same data, constant.
    pub fn detach(&self) -> Self {
        Self::from_vec(self.to_vec(), self.shape()).expect("detach: shape is consistent")
    }

    /// Copy this tensor into a different element type (used by the f64
    /// shadow path in gradient-check tests).
    pub fn cast<F: Scalar>(&self) -> TensorBase<F> {
        let data = self
            .data()
            .iter()
            .map(|&v| F::from_f64(Scalar::to_f64(v)))
            .collect();
        TensorBase::<F>::from_vec(data, self.shape()).expect("cast: shape is consistent")
    }
}

/// Shape equality check shared by elementwise ops.
fn check_same_shape<E: Scalar>(op: &str, a: &TensorBase<E>, b: &TensorBase<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
