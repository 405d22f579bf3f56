//! Stand-in convolutional backbone and FPN top-down fusion.

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamStore, Real, Tensor};

/// Multi-scale maps sharing one channel count, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
    /// Stride of each level relative to the input image.
    pub strides: Vec<usize>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn channels(&self) -> usize {
        self.levels[0].shape()[0]
    }
}

/// Three stride-2 3×3 convolution stages with ReLU. Returns the stage
/// outputs, finest first, with strides 2, 4, 8.
pub fn backbone<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    image: NodeId,
    stages: usize,
) -> Result<Vec<NodeId>> {
    let mut x = image;
    let mut outs = Vec::with_capacity(stages);
    for s in 0..stages {
        let w = g.param(store, &format!("{prefix}.s{s}.w"))?;
        let b = g.param(store, &format!("{prefix}.s{s}.b"))?;
        let y = g.conv2d(x, w, b, 2, 1)?;
        x = g.relu(y);
        outs.push(x);
    }
    Ok(outs)
}

pub fn init_backbone<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    in_channels: usize,
    channels: &[usize],
    seed: u64,
) {
    let mut c_in = in_channels;
    for (s, &c) in channels.iter().enumerate() {
        let fan_in = (c_in * 9) as f64;
        store.init_normal(&format!("{prefix}.s{s}.w"), &[c, c_in, 3, 3], (2.0 / fan_in).sqrt(), seed);
        store.init_const(&format!("{prefix}.s{s}.b"), &[c], 0.0);
        c_in = c;
    }
}

pub fn init_fpn<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    level_channels: &[usize],
    fpn_dim: usize,
    seed: u64,
) {
    for (i, &c) in level_channels.iter().enumerate() {
        store.init_normal(&format!("{prefix}.lateral{i}.w"), &[fpn_dim, c, 1, 1], (1.0 / c as f64).sqrt(), seed);
        store.init_const(&format!("{prefix}.lateral{i}.b"), &[fpn_dim], 0.0);
        let fan = (fpn_dim * 9) as f64;
        store.init_normal(&format!("{prefix}.smooth{i}.w"), &[fpn_dim, fpn_dim, 3, 3], (1.0 / fan).sqrt(), seed);
        store.init_const(&format!("{prefix}.smooth{i}.b"), &[fpn_dim], 0.0);
    }
}

/// FPN fusion: 1×1 lateral projection of every level to `fpn_dim`
/// channels, top-down nearest-neighbour upsample-and-add, then a 3×3
/// smoothing convolution per level. Levels are finest first and each must be
/// half the size (rounded up) of the one before.
pub fn fpn_fuse<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    levels: &[NodeId],
    fpn_dim: usize,
) -> Result<Vec<NodeId>> {
    if levels.is_empty() {
        return Err(Error::Config("fpn_fuse needs at least one level".into()));
    }
    for pair in levels.windows(2) {
        let (_, h0, w0) = g.value(pair[0]).dims3()?;
        let (_, h1, w1) = g.value(pair[1]).dims3()?;
        if h0.div_ceil(2) != h1 || w0.div_ceil(2) != w1 {
            return Err(Error::Config(format!(
                "pyramid strides must double: level of {h0}×{w0} followed by {h1}×{w1}"
            )));
        }
    }
    let mut laterals = Vec::with_capacity(levels.len());
    for (i, &lv) in levels.iter().enumerate() {
        let w = g.param(store, &format!("{prefix}.lateral{i}.w"))?;
        let b = g.param(store, &format!("{prefix}.lateral{i}.b"))?;
        let (c, _, _) = g.value(lv).dims3()?;
        let ws = g.shape(w).to_vec();
        if ws != [fpn_dim, c, 1, 1] {
            return Err(Error::Config(format!(
                "lateral {i} expects weights [{fpn_dim}, {c}, 1, 1], found {ws:?}"
            )));
        }
        laterals.push(g.conv2d(lv, w, b, 1, 0)?);
    }
    let mut merged = vec![laterals[laterals.len() - 1]];
    for i in (0..laterals.len() - 1).rev() {
        let coarse = *merged.last().unwrap();
        let (_, h, w) = g.value(laterals[i]).dims3()?;
        let up = g.upsample2x(coarse, h, w)?;
        merged.push(g.add(laterals[i], up)?);
    }
    merged.reverse();
    let mut out = Vec::with_capacity(merged.len());
    for (i, m) in merged.into_iter().enumerate() {
        let w = g.param(store, &format!("{prefix}.smooth{i}.w"))?;
        let b = g.param(store, &format!("{prefix}.smooth{i}.b"))?;
        out.push(g.conv2d(m, w, b, 1, 1)?);
    }
    Ok(out)
}

/// Eager wrapper around [`fpn_fuse`] over concrete backbone maps.
pub fn fuse_maps<T: Real>(
    store: &ParamStore<T>,
    prefix: &str,
    maps: &[Tensor<T>],
    base_stride: usize,
    fpn_dim: usize,
) -> Result<FeaturePyramid<T>> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = maps.iter().map(|m| g.input(m.clone())).collect();
    let out = fpn_fuse(&mut g, store, prefix, &ids, fpn_dim)?;
    Ok(FeaturePyramid {
        levels: out.iter().map(|&id| g.value(id).clone()).collect(),
        strides: (0..maps.len()).map(|i| base_stride << i).collect(),
    })
}
