//! Region detector: backbone, FPN, RoIAlign, two-layer region embedding,
//! object classifier and the training-only attribute head.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{linear, Graph, NodeId, ParamStore, Real, SoftmaxDomain, Tensor};
use crate::train::optim::{Adam, AdamConfig};

use super::bbox::{nms_per_category, BBox};
use super::pyramid::{backbone, fpn_fuse, init_backbone, init_fpn};
use super::roi::{check_overlap, map_roi};
use super::RegionFeatureSet;

pub const PREFIX: &str = "det";

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub image_channels: usize,
    /// Output channels of each stride-2 backbone stage.
    pub backbone_channels: Vec<usize>,
    pub fpn_dim: usize,
    /// Region embedding width D.
    pub embed_dim: usize,
    /// Maximum regions K kept per image.
    pub max_regions: usize,
    pub iou_threshold: f64,
    pub num_object_classes: usize,
    pub num_attribute_classes: usize,
    pub attribute_head: bool,
    pub multiscale: bool,
    /// Relative input scales sampled per step when `multiscale` is on.
    pub scales: Vec<f64>,
    /// RoIAlign output is `roi_size × roi_size`.
    pub roi_size: usize,
    pub sampling_ratio: usize,
    /// Box side (pixels) that maps to the middle pyramid level.
    pub canonical_box_size: f64,
    pub attribute_loss_weight: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl DetectorConfig {
    /// 100 regions × 2048 dims, 1600 object and 400 attribute classes.
    pub fn full_scale() -> Self {
        Self {
            image_channels: 3,
            backbone_channels: vec![16, 32, 64],
            fpn_dim: 256,
            embed_dim: 2048,
            max_regions: 100,
            iou_threshold: 0.5,
            num_object_classes: 1600,
            num_attribute_classes: 400,
            attribute_head: true,
            multiscale: false,
            scales: vec![0.5, 0.75, 1.0, 1.25],
            roi_size: 7,
            sampling_ratio: 2,
            canonical_box_size: 16.0,
            attribute_loss_weight: 0.5,
        }
    }

    /// Small detector for the synthetic shapes data.
    pub fn toy() -> Self {
        Self {
            backbone_channels: vec![8, 16, 16],
            fpn_dim: 8,
            embed_dim: 16,
            max_regions: 8,
            num_object_classes: 4,
            num_attribute_classes: 4,
            roi_size: 3,
            canonical_box_size: 8.0,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_regions == 0 {
            return bad("max_regions must be ≥ 1");
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return bad("iou_threshold must lie in (0, 1)");
        }
        if self.num_object_classes == 0 || self.num_attribute_classes == 0 {
            return bad("object and attribute class counts must be ≥ 1");
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return bad("backbone needs at least one stage with positive width");
        }
        let dims = [self.image_channels, self.fpn_dim, self.embed_dim, self.roi_size, self.sampling_ratio];
        if dims.contains(&0) {
            return bad("channel counts, embed dim, roi size and sampling ratio must be ≥ 1");
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0)) {
            return bad("multi-scale set must be non-empty and positive");
        }
        if !(self.canonical_box_size > 0.0) || self.attribute_loss_weight < 0.0 {
            return bad("canonical_box_size must be positive and attribute_loss_weight ≥ 0");
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.backbone_channels.len()
    }

    pub fn stride(&self, level: usize) -> usize {
        2 << level
    }

    /// Flattened RoIAlign output width per region.
    pub fn pooled_dim(&self) -> usize {
        self.fpn_dim * self.roi_size * self.roi_size
    }

    /// Index of the background logit.
    pub fn background(&self) -> usize {
        self.num_object_classes
    }
}

/// Candidate box with its training labels. `category == None` marks
/// background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledCandidate {
    pub bbox: BBox,
    pub category: Option<u32>,
    pub attribute: Option<u32>,
}

/// Image with annotated candidates for detector training.
#[derive(Clone, Debug)]
pub struct DetectionSample<T> {
    pub image: Tensor<T>,
    pub candidates: Vec<LabeledCandidate>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractionStatus {
    Complete,
    /// No candidate boxes were supplied; the region set is empty.
    NoCandidates,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub regions: RegionFeatureSet,
    pub status: ExtractionStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Keep backbone and FPN at their initial values.
    pub freeze_backbone: bool,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 3e-3,
            seed: 0,
            freeze_backbone: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
}

fn name(part: &str) -> String {
    format!("{PREFIX}.{part}")
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let c = &self.config;
        let mut s = ParamStore::new();
        init_backbone(&mut s, &name("backbone"), c.image_channels, &c.backbone_channels, seed);
        init_fpn(&mut s, &name("fpn"), &c.backbone_channels, c.fpn_dim, seed);
        let p = c.pooled_dim();
        let d = c.embed_dim;
        s.init_normal(&name("embed.fc1.w"), &[p, d], (2.0 / p as f64).sqrt(), seed);
        s.init_const(&name("embed.fc1.b"), &[d], 0.0);
        s.init_normal(&name("embed.fc2.w"), &[d, d], (1.0 / d as f64).sqrt(), seed);
        s.init_const(&name("embed.fc2.b"), &[d], 0.0);
        s.init_normal(&name("cls.w"), &[d, c.num_object_classes + 1], (1.0 / d as f64).sqrt(), seed);
        s.init_const(&name("cls.b"), &[c.num_object_classes + 1], 0.0);
        if c.attribute_head {
            s.init_normal(&name("attr.w"), &[d, c.num_attribute_classes], (1.0 / d as f64).sqrt(), seed);
            s.init_const(&name("attr.b"), &[c.num_attribute_classes], 0.0);
        }
        s
    }

    /// Backbone followed by FPN fusion; levels finest first.
    pub fn pyramid<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: NodeId) -> Result<Vec<NodeId>> {
        let (ch, _, _) = g.value(image).dims3()?;
        if ch != self.config.image_channels {
            return Err(Error::InvalidInput(format!(
                "image has {ch} channels, detector expects {}",
                self.config.image_channels
            )));
        }
        let levels = backbone(g, store, &name("backbone"), image, self.config.levels())?;
        fpn_fuse(g, store, &name("fpn"), &levels, self.config.fpn_dim)
    }

    /// Pyramid level for a box: the middle level at the canonical size,
    /// one level coarser per doubling of side length.
    pub fn level_for(&self, b: &BBox) -> usize {
        let top = self.config.levels() - 1;
        let mid = (top / 2) as f64;
        let k = (mid + (b.area().sqrt() / self.config.canonical_box_size).log2()).floor();
        k.clamp(0.0, top as f64) as usize
    }

    /// RoIAlign of every box on its assigned level. Output rows follow
    /// `boxes` order, each of width `pooled_dim`.
    pub fn pool<T: Real>(&self, g: &mut Graph<T>, pyramid: &[NodeId], boxes: &[BBox]) -> Result<NodeId> {
        if boxes.is_empty() {
            return Err(Error::InvalidInput("no boxes to pool".into()));
        }
        let c = &self.config;
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(boxes.len());
        for (lvl, &feat) in pyramid.iter().enumerate() {
            let scale = 1.0 / c.stride(lvl) as f64;
            let (_, h, w) = g.value(feat).dims3()?;
            let mut rois = Vec::new();
            for (i, b) in boxes.iter().enumerate() {
                if self.level_for(b) == lvl {
                    check_overlap(b, h, w, scale)?;
                    rois.push(map_roi(b, scale));
                    order.push(i);
                }
            }
            if !rois.is_empty() {
                parts.push(g.roi_align(feat, &rois, c.roi_size, c.roi_size, c.sampling_ratio)?);
            }
        }
        let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        // stacked row j holds box order[j]; gather restores input order.
        let mut inverse = vec![0; boxes.len()];
        for (j, &i) in order.iter().enumerate() {
            inverse[i] = j;
        }
        if inverse.iter().enumerate().all(|(i, &j)| i == j) {
            return Ok(stacked);
        }
        g.gather_rows(stacked, &inverse)
    }

    /// FC → ReLU → FC from pooled regions to D-dim embeddings.
    pub fn embed_regions<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pooled: NodeId) -> Result<NodeId> {
        let h = linear(g, store, &name("embed.fc1"), pooled)?;
        let h = g.relu(h);
        linear(g, store, &name("embed.fc2"), h)
    }

    /// Object logits, `num_object_classes + 1` per region (background last).
    pub fn class_logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feats: NodeId) -> Result<NodeId> {
        linear(g, store, &name("cls"), feats)
    }

    /// Attribute logits; only valid when the attribute head is enabled.
    pub fn attribute_logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feats: NodeId) -> Result<NodeId> {
        if !self.config.attribute_head {
            return Err(Error::Config("attribute head is disabled in this detector".into()));
        }
        linear(g, store, &name("attr"), feats)
    }

    /// Full extraction: score every candidate, suppress duplicates within
    /// each category, keep the `max_regions` most confident boxes and return
    /// their embeddings. The attribute head is never run here.
    ///
    /// A box's confidence is its largest non-background class probability and
    /// its category the matching class.
    pub fn extract<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>, candidates: &[BBox]) -> Result<Extraction> {
        let d = self.config.embed_dim;
        if candidates.is_empty() {
            warn!("extraction received no candidate boxes; emitting an empty region set");
            return Ok(Extraction {
                regions: RegionFeatureSet::empty(d),
                status: ExtractionStatus::NoCandidates,
            });
        }
        for b in candidates {
            b.validate()?;
        }
        let mut g = Graph::new();
        let img = g.input(image.clone());
        let pyr = self.pyramid(&mut g, store, img)?;
        let pooled = self.pool(&mut g, &pyr, candidates)?;
        let feats = self.embed_regions(&mut g, store, pooled)?;
        let logits = self.class_logits(&mut g, store, feats)?;
        let probs = g.softmax(logits, SoftmaxDomain::Rows, None)?;
        let scored = self.score(g.value(probs), candidates);
        let kept = nms_per_category(&scored, self.config.iou_threshold);
        let selected: Vec<usize> = kept.into_iter().take(self.config.max_regions).collect();
        let fv = g.value(feats);
        let mut features = Vec::with_capacity(selected.len() * d);
        for &i in &selected {
            features.extend(fv.row(i).iter().map(|v| v.as_f64() as f32));
        }
        Ok(Extraction {
            regions: RegionFeatureSet::new(selected.iter().map(|&i| scored[i]).collect(), d, features)?,
            status: ExtractionStatus::Complete,
        })
    }

    /// Attaches confidence and category to each candidate from class
    /// probabilities.
    pub fn score<T: Real>(&self, probs: &Tensor<T>, candidates: &[BBox]) -> Vec<BBox> {
        let n_obj = self.config.num_object_classes;
        candidates
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let row = &probs.row(i)[..n_obj];
                let cat = crate::numerics::argmax(row);
                BBox {
                    score: (row[cat].as_f64() as f32).clamp(0.0, 1.0),
                    category: cat as u32,
                    ..*b
                }
            })
            .collect()
    }

    /// Object classification loss over all candidates plus, when the
    /// attribute head is on, `attribute_loss_weight ×` attribute loss over
    /// candidates that carry an attribute label.
    pub fn detection_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: NodeId,
        candidates: &[LabeledCandidate],
    ) -> Result<NodeId> {
        let c = &self.config;
        let boxes: Vec<BBox> = candidates.iter().map(|c| c.bbox).collect();
        let pyr = self.pyramid(g, store, image)?;
        let pooled = self.pool(g, &pyr, &boxes)?;
        let feats = self.embed_regions(g, store, pooled)?;
        let logits = self.class_logits(g, store, feats)?;
        let labels: Vec<usize> = candidates
            .iter()
            .map(|c| c.category.map_or(self.config.background(), |k| k as usize))
            .collect();
        let mut loss = g.softmax_cross_entropy(logits, &labels)?;
        if c.attribute_head {
            let (rows, attrs): (Vec<usize>, Vec<usize>) = candidates
                .iter()
                .enumerate()
                .filter_map(|(i, c)| c.attribute.map(|a| (i, a as usize)))
                .unzip();
            if !rows.is_empty() {
                let sel = g.gather_rows(feats, &rows)?;
                let al = self.attribute_logits(g, store, sel)?;
                let ce = g.softmax_cross_entropy(al, &attrs)?;
                let weighted = g.scale(ce, T::of(c.attribute_loss_weight));
                loss = g.add(loss, weighted)?;
            }
        }
        Ok(loss)
    }

    /// Trains every detector parameter (or only the heads when the backbone is
    /// frozen) with Adam. Returns the parameters and the mean loss per epoch.
    pub fn train<T: Real>(
        &self,
        samples: &[DetectionSample<T>],
        cfg: &DetectorTrainConfig,
    ) -> Result<(ParamStore<T>, Vec<f64>)> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("detector training needs at least one image".into()));
        }
        let mut store = self.init_params::<T>(cfg.seed);
        let mut opt = Adam::new(AdamConfig::default(), cfg.lr, vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_de7e);
        let frozen: Vec<String> = if cfg.freeze_backbone {
            vec![name("backbone"), name("fpn")]
        } else {
            vec![]
        };
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (step, &i) in order.iter().enumerate() {
                let sample = &samples[i];
                let scale = if self.config.multiscale {
                    *self.config.scales.choose(&mut rng).expect("validated non-empty")
                } else {
                    1.0
                };
                let (image, cands) = rescale(sample, scale)?;
                let mut g = Graph::new().with_frozen(&frozen);
                let img = g.input(image);
                let loss = self.detection_loss(&mut g, &store, img, &cands)?;
                let lv = g.scalar(loss).as_f64();
                if !lv.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss: lv });
                }
                total += lv;
                g.backward(loss)?;
                opt.step(&mut store, g.param_grads(), |lr| lr);
            }
            history.push(total / samples.len() as f64);
        }
        Ok((store, history))
    }
}

/// Resamples the image so both sides scale by `scale` (rounded, at least 8
/// pixels) and moves the boxes with it.
fn rescale<T: Real>(sample: &DetectionSample<T>, scale: f64) -> Result<(Tensor<T>, Vec<LabeledCandidate>)> {
    if scale == 1.0 {
        return Ok((sample.image.clone(), sample.candidates.clone()));
    }
    let (_, h, w) = sample.image.dims3()?;
    let nh = ((h as f64 * scale).round() as usize).max(8);
    let nw = ((w as f64 * scale).round() as usize).max(8);
    let img = resize_bilinear(&sample.image, nh, nw)?;
    let (sy, sx) = (nh as f64 / h as f64, nw as f64 / w as f64);
    let cands = sample
        .candidates
        .iter()
        .map(|c| LabeledCandidate {
            bbox: c.bbox.scaled(sx, sy),
            ..*c
        })
        .collect();
    Ok((img, cands))
}

/// Bilinear resize of a C×H×W map with half-pixel centres.
pub fn resize_bilinear<T: Real>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = img.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput("resize target must be non-empty".into()));
    }
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = coord(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = coord(ox, w, out_w);
                let v = |y: usize, x: usize| plane[y * w + x].as_f64();
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out.push(T::of(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}
