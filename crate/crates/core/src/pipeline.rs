//! End-to-end glue: scenes → detector → region features → answer model →
//! reports, and the ablation harness that sweeps detector and language
//! settings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::config::KvConfig;
use crate::data::{self, render, SyntheticSpec, VqaExample};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::region::rvqf::{load_rvqf, save_rvqf};
use crate::region::{DetectionSample, Detector, DetectorConfig, DetectorTrainConfig, RegionFeatureSet};
use crate::train::{
    evaluate, evaluate_ensemble, train, EvalReport, LanguageConfig, Member, TableRow, TrainConfig,
    VqaModel, VqaModelConfig, VqaSample,
};

/// Detector settings for the synthetic data. Keys (all prefixed `det_`):
/// `backbone` (comma-separated stage widths), `fpn_dim`, `embed_dim`,
/// `max_regions`, `iou`, `roi_size`, `attribute_head`, `multiscale`,
/// `epochs`, `lr`, `freeze_backbone`, `seed`.
pub fn detector_from_kv(kv: &mut KvConfig, spec: &SyntheticSpec) -> Result<(DetectorConfig, DetectorTrainConfig)> {
    let base = toy_detector(spec);
    let det = DetectorConfig {
        backbone_channels: kv.take_list("det_backbone", base.backbone_channels.clone())?,
        fpn_dim: kv.take("det_fpn_dim", base.fpn_dim)?,
        embed_dim: kv.take("det_embed_dim", base.embed_dim)?,
        max_regions: kv.take("det_max_regions", base.max_regions)?,
        iou_threshold: kv.take("det_iou", base.iou_threshold)?,
        roi_size: kv.take("det_roi_size", base.roi_size)?,
        attribute_head: kv.take("det_attribute_head", base.attribute_head)?,
        multiscale: kv.take("det_multiscale", base.multiscale)?,
        ..base
    };
    det.validate()?;
    let d = DetectorTrainConfig::default();
    let tr = DetectorTrainConfig {
        epochs: kv.take("det_epochs", 2)?,
        lr: kv.take("det_lr", d.lr)?,
        seed: kv.take("det_seed", d.seed)?,
        freeze_backbone: kv.take("det_freeze_backbone", true)?,
    };
    Ok((det, tr))
}

/// The toy detector sized for `spec`: one object class per shape and one
/// attribute class per colour.
pub fn toy_detector(spec: &SyntheticSpec) -> DetectorConfig {
    DetectorConfig {
        num_object_classes: spec.num_shapes,
        num_attribute_classes: spec.num_colors,
        canonical_box_size: spec.grid as f64 / 4.0,
        ..DetectorConfig::toy()
    }
}

/// Images in first-appearance order, one detection sample each.
pub fn detection_samples(examples: &[VqaExample]) -> Result<Vec<DetectionSample<f32>>> {
    let mut seen = BTreeMap::new();
    for e in examples {
        seen.entry(e.image.id).or_insert(e);
    }
    seen.values()
        .map(|e| {
            Ok(DetectionSample {
                image: render(&e.image),
                candidates: e.candidates.iter().map(|c| c.to_labeled()).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Region features for every distinct image, keyed by image id.
pub fn extract_features(
    det: &Detector,
    store: &ParamStore<f32>,
    examples: &[VqaExample],
) -> Result<BTreeMap<u32, RegionFeatureSet>> {
    let mut out = BTreeMap::new();
    for e in examples {
        if out.contains_key(&e.image.id) {
            continue;
        }
        let boxes = e.candidates.iter().map(|c| c.to_bbox()).collect::<Result<Vec<_>>>()?;
        let ex = det.extract(store, &render(&e.image), &boxes)?;
        out.insert(e.image.id, ex.regions);
    }
    Ok(out)
}

pub fn feature_path(dir: &Path, image_id: u32) -> PathBuf {
    dir.join(format!("img{image_id:06}.rvqf"))
}

pub fn save_features(dir: &Path, features: &BTreeMap<u32, RegionFeatureSet>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (id, set) in features {
        save_rvqf(&feature_path(dir, *id), set)?;
    }
    Ok(())
}

pub fn load_features(dir: &Path, examples: &[VqaExample]) -> Result<BTreeMap<u32, RegionFeatureSet>> {
    let mut out = BTreeMap::new();
    for e in examples {
        if !out.contains_key(&e.image.id) {
            let p = feature_path(dir, e.image.id);
            let set = load_rvqf(&p).map_err(|err| {
                Error::InvalidInput(format!("cannot read features {}: {err}", p.display()))
            })?;
            out.insert(e.image.id, set);
        }
    }
    Ok(out)
}

pub fn build_samples(
    model: &VqaModel,
    examples: &[VqaExample],
    features: &BTreeMap<u32, RegionFeatureSet>,
) -> Result<Vec<VqaSample<f32>>> {
    examples
        .iter()
        .map(|e| {
            let f = features
                .get(&e.image.id)
                .ok_or_else(|| Error::InvalidInput(format!("no features for image {}", e.image.id)))?;
            VqaSample::new(model, e, f)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LanguageKind {
    Bert,
    Gru,
}

/// One ablation row's detector and language choices.
#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub fpn_dim: usize,
    pub attribute_head: bool,
    pub multiscale: bool,
    pub language: LanguageKind,
}

impl Setting {
    pub fn backbone_label(&self) -> String {
        if self.multiscale {
            "toy-conv (ms-train)".into()
        } else {
            "toy-conv".into()
        }
    }
}

/// Ablation rows: attribute head off/on, FPN width
/// 256/512, multi-scale detector training off/on, GRU baseline vs BERT.
pub fn standard_settings() -> Vec<Setting> {
    let s = |fpn_dim, attribute_head, multiscale, language| Setting {
        fpn_dim,
        attribute_head,
        multiscale,
        language,
    };
    use LanguageKind::*;
    vec![
        s(256, false, false, Gru),
        s(256, true, false, Gru),
        s(512, true, false, Gru),
        s(256, true, true, Gru),
        s(512, true, true, Gru),
        s(256, true, false, Bert),
        s(512, true, false, Bert),
        s(256, true, true, Bert),
        s(512, true, true, Bert),
    ]
}

/// Everything except the per-row choices.
#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub spec: SyntheticSpec,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    pub bert_hidden: usize,
    pub bert_layers: usize,
    pub gru_embed: usize,
    pub gru_hidden: usize,
    pub glimpses: usize,
    pub train: TrainConfig,
    pub split_label: String,
}

impl AblationConfig {
    pub fn toy(spec: SyntheticSpec) -> Self {
        Self {
            detector: toy_detector(&spec),
            detector_train: DetectorTrainConfig {
                epochs: 1,
                freeze_backbone: true,
                ..DetectorTrainConfig::default()
            },
            bert_hidden: 32,
            bert_layers: 2,
            gru_embed: 32,
            gru_hidden: 64,
            glimpses: 2,
            train: TrainConfig {
                max_epochs: 10,
                base_lr: 3e-3,
                batch_size: 16,
                ..TrainConfig::default()
            },
            split_label: "val".into(),
            spec,
        }
    }

    pub fn model_config(&self, language: LanguageKind) -> VqaModelConfig {
        let vocab = self.spec.vocab();
        let d = self.detector.embed_dim;
        match language {
            LanguageKind::Bert => VqaModelConfig::toy_bert(
                self.spec.vocab_size,
                d,
                self.bert_hidden,
                self.bert_layers,
                self.glimpses,
                vocab.answers,
            ),
            LanguageKind::Gru => VqaModelConfig::toy_gru(
                self.spec.vocab_size,
                d,
                self.gru_embed,
                self.gru_hidden,
                self.bert_hidden,
                self.glimpses,
                vocab.answers,
            ),
        }
    }
}

/// Trained members of an ablation run, kept for ensembling.
pub struct TrainedMember {
    pub setting: Setting,
    pub model: VqaModel,
    pub store: ParamStore<f32>,
    pub val: Vec<VqaSample<f32>>,
    pub report: EvalReport,
}

pub struct AblationRun {
    pub rows: Vec<TableRow>,
    pub members: Vec<TrainedMember>,
}

/// Trains one detector per distinct (FPN width, attribute head, multi-scale)
/// triple, then one answer model per setting, and scores each on the
/// validation split. A final row scores the probability-averaging ensemble
/// of all members.
pub fn run_ablation(cfg: &AblationConfig, settings: &[Setting]) -> Result<AblationRun> {
    if settings.is_empty() {
        return Err(Error::Config("no ablation settings".into()));
    }
    let (train_ex, val_ex) = data::generate(&cfg.spec)?;
    let det_samples = detection_samples(&train_ex)?;
    let mut all_ex = train_ex.clone();
    all_ex.extend(val_ex.iter().cloned());
    let mut feature_cache: BTreeMap<(usize, bool, bool), BTreeMap<u32, RegionFeatureSet>> = BTreeMap::new();
    let mut members = Vec::with_capacity(settings.len());
    let mut rows = Vec::with_capacity(settings.len() + 1);
    for s in settings {
        let key = (s.fpn_dim, s.attribute_head, s.multiscale);
        if !feature_cache.contains_key(&key) {
            let det = Detector::new(DetectorConfig {
                fpn_dim: s.fpn_dim,
                attribute_head: s.attribute_head,
                multiscale: s.multiscale,
                ..cfg.detector.clone()
            })?;
            let (store, losses) = det.train(&det_samples, &cfg.detector_train)?;
            info!("detector {key:?} losses {losses:?}");
            feature_cache.insert(key, extract_features(&det, &store, &all_ex)?);
        }
        let features = &feature_cache[&key];
        let model = VqaModel::new(cfg.model_config(s.language))?;
        let train_s = build_samples(&model, &train_ex, features)?;
        let val_s = build_samples(&model, &val_ex, features)?;
        let outcome = train(&model, model.init_params(cfg.train.seed), &train_s, &cfg.train)?;
        let report = evaluate(&model, &outcome.store, &val_s)?;
        rows.push(TableRow {
            split: cfg.split_label.clone(),
            backbone: s.backbone_label(),
            fpn_dim: Some(s.fpn_dim),
            attribute: Some(s.attribute_head),
            language: Some(model.language_name().to_string()),
            report: report.clone(),
        });
        members.push(TrainedMember {
            setting: s.clone(),
            model,
            store: outcome.store,
            val: val_s,
            report,
        });
    }
    let refs: Vec<Member<'_, f32>> = members
        .iter()
        .map(|m| Member {
            model: &m.model,
            store: &m.store,
            samples: &m.val,
        })
        .collect();
    let ens = evaluate_ensemble(&refs)?;
    rows.push(TableRow {
        split: cfg.split_label.clone(),
        backbone: format!("Ensemble ({} models)", members.len()),
        fpn_dim: None,
        attribute: None,
        language: None,
        report: ens,
    });
    Ok(AblationRun { rows, members })
}

/// Language model chosen by a model configuration.
pub fn language_kind(cfg: &VqaModelConfig) -> LanguageKind {
    match cfg.language {
        LanguageConfig::Bert(_) => LanguageKind::Bert,
        LanguageConfig::Gru(_) => LanguageKind::Gru,
    }
}

/// Toy answer model and training samples for the memorisation check: the
/// default synthetic spec (64 training questions), regions from an untrained
/// toy detector (K = 8, D = 16) and a 2-layer, 32-wide encoder with two
/// glimpses.
pub fn overfit_setup(spec: &SyntheticSpec, detector_seed: u64) -> Result<(VqaModel, Vec<VqaSample<f32>>)> {
    let cfg = AblationConfig::toy(spec.clone());
    let det = Detector::new(cfg.detector.clone())?;
    let store = det.init_params::<f32>(detector_seed);
    let (train_ex, _) = data::generate(spec)?;
    let features = extract_features(&det, &store, &train_ex)?;
    let model = VqaModel::new(cfg.model_config(LanguageKind::Bert))?;
    let samples = build_samples(&model, &train_ex, &features)?;
    Ok((model, samples))
}

/// Training settings that memorise the [`overfit_setup`] samples.
pub fn overfit_train_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 200,
        base_lr: 3e-3,
        batch_size: 16,
        seed: 1,
        stop_at_accuracy: Some(0.95),
        ..TrainConfig::default()
    }
}
