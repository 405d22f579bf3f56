//! Region features: boxes and suppression, FPN fusion, RoIAlign, region
//! embeddings and the `RVQF` feature file.

pub mod bbox;
pub mod detector;
pub mod pyramid;
pub mod roi;
pub mod rvqf;

pub use bbox::{iou, nms_per_category, select_top_k, top_k_indices, BBox, BoxSet};
pub use detector::{
    DetectionSample, Detector, DetectorConfig, DetectorTrainConfig, Extraction, ExtractionStatus,
    LabeledCandidate,
};
pub use pyramid::{fpn_fuse, fuse_maps, FeaturePyramid};
pub use roi::roi_align;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Up to K boxes with one D-dim embedding row each.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatureSet {
    pub boxes: Vec<BBox>,
    dim: usize,
    features: Vec<f32>,
}

impl RegionFeatureSet {
    pub fn new(boxes: Vec<BBox>, dim: usize, features: Vec<f32>) -> Result<Self> {
        if dim == 0 || features.len() != boxes.len() * dim {
            return Err(Error::InvalidInput(format!(
                "{} boxes need {} feature values at dim {dim}, got {}",
                boxes.len(),
                boxes.len() * dim,
                features.len()
            )));
        }
        Ok(Self {
            boxes,
            dim,
            features,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            boxes: Vec::new(),
            dim,
            features: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// K×D matrix, or `None` for an empty set.
    pub fn to_tensor<T: Real>(&self) -> Option<Tensor<T>> {
        if self.is_empty() {
            return None;
        }
        Tensor::new(
            &[self.len(), self.dim],
            self.features.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .ok()
    }
}
