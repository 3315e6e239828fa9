//! Dense row-major tensors.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::NodeId;

/// An n-dimensional array with an optional attachment to a tape node.
///
/// A tensor with no node is detached: it never contributes to any gradient.
/// Data is shared (`Arc`), so clones and saved-for-backward copies are cheap.
#[derive(Clone, Debug)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Arc<Vec<R>>,
    node: Option<NodeId>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} does not describe {} values", data.len()),
            });
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    pub fn scalar(value: R) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]), node: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![R::zero(); numel]), node: None }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![R::one(); numel]), node: None }
    }

    /// Identity matrix scaled by `value`.
    pub fn eye(n: usize, value: R) -> Self {
        let mut data = vec![R::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = value;
        }
        Tensor { shape: vec![n, n], data: Arc::new(data), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<R>> {
        Arc::clone(&self.data)
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, no tape node.
    pub fn detach(&self) -> Tensor<R> {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> R {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[R] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Stack same-shaped flat rows into a `[rows.len(), row_shape...]` tensor.
    pub fn from_rows(row_shape: &[usize], rows: &[&[R]]) -> Result<Self> {
        let row_numel: usize = row_shape.iter().product();
        let mut data = Vec::with_capacity(row_numel * rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != row_numel {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    detail: format!("row {i} has {} values, expected {row_numel}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        let mut shape = Vec::with_capacity(row_shape.len() + 1);
        shape.push(rows.len());
        shape.extend_from_slice(row_shape);
        Tensor::new(shape, data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<R>, node: Option<NodeId>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: Arc::new(data), node }
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<R>>, node: Option<NodeId>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, node }
    }

    /// Mutable access to the underlying buffer; clones if shared.
    ///
    /// Only detached tensors may be mutated (optimizer updates).
    pub fn data_mut(&mut self) -> &mut [R] {
        debug_assert!(self.node.is_none(), "in-place mutation of a tracked tensor");
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Max |a - b| over elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<R>) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// True when every element is bit-identical to `other`'s.
    pub fn bits_eq(&self, other: &Tensor<R>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(&a, &b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}
