//! Dense tensors and a define-by-run reverse-mode tape.
//!
//! [`Tensor`] is the owned parameter/data container. A [`Tape`] is built
//! fresh for every forward pass: leaves copy tensor data in, operations
//! append nodes, and [`Tape::backward`] walks the nodes once in reverse.
//! Gradients are routed back to parameters by [`TensorId`].

mod gradcheck;
mod tape;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use tape::{Gradients, Tape, Var};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity used to route tape gradients back to their parameter.
///
/// `Clone` on a [`Tensor`] keeps the id; [`Tensor::fork`] issues a new one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone)]
pub struct Tensor<T> {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) && !data.is_empty() {
            return Err(dim_err(format!("shape {shape:?} has a zero extent")));
        }
        if numel(&shape) != data.len() {
            return Err(dim_err(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self {
            id: TensorId::fresh(),
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            id: TensorId::fresh(),
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self {
            id: TensorId::fresh(),
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self::from_fn(shape, |_| T::lit(normal.sample(rng)))
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound);
        Self::from_fn(shape, |_| T::lit(dist.sample(rng)))
    }

    /// Builder form of [`Tensor::set_trainable`].
    pub fn trainable(mut self, on: bool) -> Self {
        self.set_trainable(on);
        self
    }

    /// Turning training off drops the gradient buffer.
    pub fn set_trainable(&mut self, on: bool) {
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![T::zero(); self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.grad.is_some()
    }

    /// Deep copy with a fresh identity.
    pub fn fork(&self) -> Self {
        Self {
            id: TensorId::fresh(),
            ..self.clone()
        }
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer. Frozen tensors ignore it.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(dim_err(format!(
                "gradient of length {} for tensor {:?}",
                delta.len(),
                self.shape
            )));
        }
        if let Some(g) = self.grad.as_mut() {
            for (a, &d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        Ok(())
    }

    /// Replaces the data, keeping shape and identity.
    pub fn assign(&mut self, data: &[T]) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(dim_err(format!(
                "cannot assign {} values to tensor {:?}",
                data.len(),
                self.shape
            )));
        }
        self.data.copy_from_slice(data);
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_fn(&self.shape, |i| f(self.data[i]))
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Feeds dtype, shape and raw little-endian bytes into `hasher`.
    pub fn hash_into(&self, hasher: &mut Sha256) {
        hasher.update([T::DTYPE.size() as u8]);
        hasher.update((self.shape.len() as u64).to_le_bytes());
        for &d in &self.shape {
            hasher.update((d as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(self.data.len() * T::DTYPE.size());
        for &v in &self.data {
            v.write_le(&mut buf);
        }
        hasher.update(&buf);
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            id: TensorId::fresh(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::lit(v.as_f64())).collect()),
        }
    }
}

/// Named access to every tensor a component owns.
///
/// Names are stable and dotted (`task0.root.key`); the checkpoint format,
/// the optimizer and the gradient checker all key on them.
pub trait Parameters<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| {
            if t.is_trainable() {
                n += t.numel();
            }
        });
        n
    }

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |_, t| t.zero_grad());
    }

    /// Copies gradients from a finished backward pass into every trainable tensor.
    fn absorb_grads(&mut self, grads: &Gradients<T>) -> Result<()> {
        let mut out = Ok(());
        self.visit_mut(&mut |_, t| {
            if out.is_ok() && t.is_trainable() {
                if let Some(g) = grads.for_tensor(t.id()) {
                    out = t.accumulate_grad(g);
                }
            }
        });
        out
    }

    fn set_trainable(&mut self, on: bool) {
        self.visit_mut(&mut |_, t| t.set_trainable(on));
    }

    fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit(&mut |name, t| {
            hasher.update(name.as_bytes());
            t.hash_into(&mut hasher);
        });
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
