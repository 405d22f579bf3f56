//! RoIAlign over continuous box coordinates.
//!
//! Feature cell `(r, c)` of a level with stride `s` covers image pixels
//! `[c·s, (c+1)·s)`; its value sits at the cell centre. Box corners are
//! mapped to level coordinates with `x·(1/s) − ½` so that integer level
//! coordinates are cell centres, and no coordinate is ever rounded.

use crate::error::{Error, Result};
use crate::numerics::kernels::MapRoi;
use crate::numerics::{Graph, Real, Tensor};

use super::bbox::BBox;

pub fn map_roi<T: Real>(b: &BBox, spatial_scale: f64) -> MapRoi<T> {
    let f = |v: f32| T::of(v as f64 * spatial_scale - 0.5);
    MapRoi {
        x1: f(b.x1),
        y1: f(b.y1),
        x2: f(b.x2),
        y2: f(b.y2),
    }
}

/// Fails when `b` does not overlap the image area covered by an `h×w` level.
pub fn check_overlap(b: &BBox, h: usize, w: usize, spatial_scale: f64) -> Result<()> {
    let img_w = w as f64 / spatial_scale;
    let img_h = h as f64 / spatial_scale;
    let outside = b.x2 as f64 <= 0.0
        || b.y2 as f64 <= 0.0
        || b.x1 as f64 >= img_w
        || b.y1 as f64 >= img_h;
    if outside {
        return Err(Error::InvalidInput(format!(
            "box ({}, {}, {}, {}) lies entirely outside the {img_w}×{img_h} feature extent",
            b.x1, b.y1, b.x2, b.y2
        )));
    }
    Ok(())
}

/// Pools `b` from a C×H×W level into C×out_h×out_w. Each bin averages
/// `sampling²` bilinear samples taken at regular offsets inside the bin.
pub fn roi_align<T: Real>(
    level: &Tensor<T>,
    b: &BBox,
    output_size: (usize, usize),
    sampling_ratio: usize,
    spatial_scale: f64,
) -> Result<Tensor<T>> {
    let (c, h, w) = level.dims3()?;
    check_overlap(b, h, w, spatial_scale)?;
    let mut g = Graph::new();
    let f = g.input(level.clone());
    let out = g.roi_align(
        f,
        &[map_roi(b, spatial_scale)],
        output_size.0,
        output_size.1,
        sampling_ratio,
    )?;
    g.value(out)
        .clone()
        .reshape(&[c, output_size.0, output_size.1])
}
