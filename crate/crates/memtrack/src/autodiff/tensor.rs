//! Dense rank-2 tensors backed by shared row-major storage.
//!
//! A `Tensor` is either a plain constant (no graph handle) or the output of
//! an operation recorded on a [`Graph`](super::Graph). Constants and graph
//! outputs share the same type so layer code can mix parameters, recorded
//! intermediates, and fixed data freely.

use std::sync::Arc;

use super::graph::NodeId;
use super::AdError;

/// Dense matrix of `f64` values. Scalars are 1×1, column vectors n×1.
#[derive(Clone, Debug)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
    /// (graph id, node id) when this tensor was produced on a graph.
    pub(crate) node: Option<(u64, NodeId)>,
}

impl Tensor {
    /// Build a constant tensor. Fails if the element count does not match
    /// the shape or any value is non-finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdError> {
        if data.len() != rows * cols {
            return Err(AdError::BadShape {
                op: "tensor",
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(AdError::NonFiniteInput {
                op: "tensor",
                index: pos,
            });
        }
        Ok(Self {
            rows,
            cols,
            data: Arc::new(data),
            node: None,
        })
    }

    pub(crate) fn from_arc(
        rows: usize,
        cols: usize,
        data: Arc<Vec<f64>>,
        node: Option<(u64, NodeId)>,
    ) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            rows,
            cols,
            data,
            node,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: Arc::new(vec![0.0; rows * cols]),
            node: None,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: Arc::new(vec![value; rows * cols]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            rows: n,
            cols: n,
            data: Arc::new(data),
            node: None,
        }
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Result<Self, AdError> {
        Self::new(values.len(), 1, values.to_vec())
    }

    /// n×3 tensor from xyz rows.
    pub fn from_points(points: &[[f64; 3]]) -> Result<Self, AdError> {
        let mut data = Vec::with_capacity(points.len() * 3);
        for p in points {
            data.extend_from_slice(p);
        }
        Self::new(points.len(), 3, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Value of a 1×1 tensor.
    pub fn scalar_value(&self) -> Result<f64, AdError> {
        if !self.is_scalar() {
            return Err(AdError::NotScalar {
                shape: self.shape(),
            });
        }
        Ok(self.data[0])
    }

    /// Node id on the graph that produced this tensor, if any.
    pub fn node_id(&self) -> Option<NodeId> {
        self.node.map(|(_, id)| id)
    }

    /// Copy of this tensor detached from any graph. Used when recurrent
    /// state crosses from one frame's tape to the next at inference time.
    pub fn detached(&self) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Max over |values|; 0 for empty tensors.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_len() {
        assert!(Tensor::new(2, 3, vec![0.0; 6]).is_ok());
        assert!(Tensor::new(2, 3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn eye_diagonal() {
        let i = Tensor::eye(3);
        assert_eq!(i.get(0, 0), 1.0);
        assert_eq!(i.get(1, 0), 0.0);
        assert_eq!(i.get(2, 2), 1.0);
    }

    #[test]
    fn detached_drops_node() {
        let t = Tensor::scalar(4.0);
        assert!(t.node_id().is_none());
        assert_eq!(t.detached().scalar_value().unwrap(), 4.0);
    }
}
