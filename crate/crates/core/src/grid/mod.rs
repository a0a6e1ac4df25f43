//! Dense 2D grids with a minimal reverse-mode differentiation tape.
//!
//! A [`Grid2D`] is a row-major field of `f64` scalars. Grids produced by
//! [`Tape`] operations carry a tape-node handle; plain constants do not and
//! never record anything. Reductions that are detached by design
//! (`min`/`max`) are plain methods on the grid value.

mod kernels;
mod tape;

pub use tape::{Gradients, NodeId, Tape};

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GridError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: invalid size {height}x{width}")]
    InvalidSize {
        op: &'static str,
        height: usize,
        width: usize,
    },
    #[error("data length {got} does not match {height}x{width}")]
    DataLength {
        height: usize,
        width: usize,
        got: usize,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must be a 1x1 scalar, got {height}x{width}")]
    NonScalarRoot { height: usize, width: usize },
    #[error("backward root is a constant, not attached to any tape")]
    DetachedRoot,
}

/// Dense 2D scalar field, row-major.
#[derive(Debug, Clone)]
pub struct Grid2D {
    pub(crate) height: usize,
    pub(crate) width: usize,
    pub(crate) data: Vec<f64>,
    pub(crate) node: Option<NodeId>,
}

impl Grid2D {
    /// Constant grid from raw row-major data. Rejects shape/length mismatch
    /// and non-finite values.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if height == 0 || width == 0 {
            return Err(GridError::InvalidSize {
                op: "from_vec",
                height,
                width,
            });
        }
        if data.len() != height * width {
            return Err(GridError::DataLength {
                height,
                width,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(GridError::NonFinite { op: "from_vec" });
        }
        Ok(Grid2D {
            height,
            width,
            data,
            node: None,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        debug_assert!(value.is_finite());
        Grid2D {
            height,
            width,
            data: vec![value; height * width],
            node: None,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::constant(height, width, 1.0)
    }

    /// 1x1 grid holding one scalar.
    pub fn scalar(value: f64) -> Self {
        Self::constant(1, 1, value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Tape-node handle; `None` for constants.
    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_scalar(&self) -> bool {
        self.height == 1 && self.width == 1
    }

    /// Value of a 1x1 grid.
    pub fn scalar_value(&self) -> Option<f64> {
        if self.is_scalar() {
            Some(self.data[0])
        } else {
            None
        }
    }

    /// Detached minimum over all cells.
    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Detached maximum over all cells.
    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Detached sum over all cells.
    pub fn sum_value(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same shape and cell-for-cell identical values (tape handles ignored).
    pub fn value_eq(&self, other: &Grid2D) -> bool {
        self.shape() == other.shape() && self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length_and_finiteness() {
        assert!(Grid2D::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).is_ok());
        assert!(matches!(
            Grid2D::from_vec(2, 2, vec![1.0]),
            Err(GridError::DataLength { got: 1, .. })
        ));
        assert!(matches!(
            Grid2D::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(GridError::NonFinite { .. })
        ));
        assert!(matches!(
            Grid2D::from_vec(0, 2, vec![]),
            Err(GridError::InvalidSize { .. })
        ));
    }

    #[test]
    fn detached_reductions() {
        let g = Grid2D::from_vec(2, 2, vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(g.min_value(), 0.0);
        assert_eq!(g.max_value(), 6.0);
        assert_eq!(g.sum_value(), 12.0);
    }

    #[test]
    fn sum_of_ones_counts_cells() {
        let ones = Grid2D::ones(64, 64);
        assert_eq!(ones.sum_value(), 4096.0);
    }
}
