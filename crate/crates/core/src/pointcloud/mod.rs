//! Point-cloud value type, file I/O and the stochastic augmentations used to
//! build pretraining positives.

mod augment;
mod io;

pub use augment::{
    compose_augmentations, jitter, remove_random_block, remove_random_points,
    remove_block_at, shear, shear_with_matrix, AugmentationConfig, BlockRemoval,
};
pub use io::{load_pointcloud, save_pointcloud, save_pointcloud_text, BINARY_MAGIC, TEXT_MAGIC};

use crate::error::{Error, Result};

/// An ordered set of 3-D points describing one submap or scene.
///
/// Points are stored in 64-bit floats. The canonical binary file format keeps
/// 32-bit floats, so clouds built from f32 data round-trip bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    source_id: Option<u64>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud needs at least one point".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            source_id: None,
        })
    }

    pub fn with_source(mut self, source_id: u64) -> Self {
        self.source_id = Some(source_id);
        self
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false for a constructed cloud; kept for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn source_id(&self) -> Option<u64> {
        self.source_id
    }

    /// Builds a new cloud sharing this cloud's source id.
    pub(crate) fn derive(&self, points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            source_id: self.source_id,
        }
    }

    /// Returns the cloud with rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: order.len(),
            });
        }
        let mut seen = vec![false; order.len()];
        let mut points = Vec::with_capacity(order.len());
        for &i in order {
            if i >= self.len() || seen[i] {
                return Err(Error::invalid("order is not a permutation"));
            }
            seen[i] = true;
            points.push(self.points[i]);
        }
        Ok(self.derive(points))
    }
}
