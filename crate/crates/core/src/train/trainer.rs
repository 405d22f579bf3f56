//! Mini-batch training of the answer model.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::simple_accuracy;
use super::optim::{Adam, AdamConfig, ParamGroup};
use super::schedule::LrSchedule;
use super::vqa::{VqaModel, VqaSample};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::language;
use crate::numerics::{Graph, ParamStore, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Peak rate of every parameter outside the language encoder.
    pub base_lr: f64,
    /// Peak rate of the language encoder.
    pub language_lr: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the attribute term in the detector objective.
    pub attribute_loss_weight: f64,
    /// Rescale the global gradient norm to at most this value.
    pub grad_clip: Option<f64>,
    /// Stop once simple accuracy on the training set reaches this fraction.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 20,
            base_lr: 2e-3,
            language_lr: 5e-5,
            schedule: LrSchedule::Cosine { min_ratio: 0.0 },
            batch_size: 16,
            seed: 0,
            attribute_loss_weight: 0.5,
            grad_clip: Some(0.25),
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be at least 1".into()));
        }
        for (k, v) in [("base_lr", self.base_lr), ("language_lr", self.language_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be a finite non-negative rate, got {v}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Keys: `max_epochs`, `base_lr`, `language_lr`, `schedule`
    /// (cosine|constant), `min_lr_ratio`, `batch_size`, `seed`,
    /// `attribute_loss_weight`, `grad_clip` (0 disables), `stop_at_accuracy`.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let schedule = match kv.take("schedule", "cosine".to_string())?.as_str() {
            "cosine" => LrSchedule::Cosine {
                min_ratio: kv.take("min_lr_ratio", 0.0)?,
            },
            "constant" => LrSchedule::Constant,
            other => return Err(Error::Config(format!("unknown schedule '{other}'"))),
        };
        let clip: f64 = kv.take("grad_clip", d.grad_clip.unwrap_or(0.0))?;
        let cfg = Self {
            max_epochs: kv.take("max_epochs", d.max_epochs)?,
            base_lr: kv.take("base_lr", d.base_lr)?,
            language_lr: kv.take("language_lr", d.language_lr)?,
            schedule,
            batch_size: kv.take("batch_size", d.batch_size)?,
            seed: kv.take("seed", d.seed)?,
            attribute_loss_weight: kv.take("attribute_loss_weight", d.attribute_loss_weight)?,
            grad_clip: (clip > 0.0).then_some(clip),
            stop_at_accuracy: kv.take_opt("stop_at_accuracy")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub store: ParamStore<T>,
    /// Mean loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    /// `(base, language)` rate applied at every optimizer step.
    pub rate_log: Vec<(f64, f64)>,
}

/// Adam over mini-batches with a per-step schedule shared by both rate
/// groups. Deterministic for a given seed.
pub fn train<T: Real>(
    model: &VqaModel,
    mut store: ParamStore<T>,
    samples: &[VqaSample<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let lang_prefix = format!("{}.", language::PREFIX);
    let mut opt = Adam::new(
        AdamConfig::default(),
        cfg.base_lr,
        vec![ParamGroup {
            prefix: lang_prefix.clone(),
            lr: cfg.language_lr,
        }],
    );
    let batches = samples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_epochs * batches;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.max_epochs);
    let mut rate_log = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::training(cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &samples[i];
                let v = g.input(s.regions.clone());
                let (logits, _) = model.forward(&mut g, &store, v, &s.question)?;
                losses.push(g.bce_soft_loss(logits, &s.targets)?);
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.add(total, l)?;
            }
            let loss = g.scale(total, T::of(1.0 / chunk.len() as f64));
            let lv = g.scalar(loss).as_f64();
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, step: b, loss: lv });
            }
            epoch_loss += lv * chunk.len() as f64;
            g.backward(loss)?;

            let base = cfg.schedule.rate(cfg.base_lr, step, total_steps)?;
            let lang = cfg.schedule.rate(cfg.language_lr, step, total_steps)?;
            rate_log.push((base, lang));
            let grads: Vec<(&str, Vec<T>)> = g.param_grads().into_iter().map(|(n, v)| (n, v.to_vec())).collect();
            let scale = clip_scale(&grads, cfg.grad_clip);
            let grads: Vec<(&str, Vec<T>)> = grads
                .into_iter()
                .map(|(n, v)| (n, v.into_iter().map(|x| x * T::of(scale)).collect()))
                .collect();
            let schedule = &cfg.schedule;
            opt.step(&mut store, grads.iter().map(|(n, v)| (*n, v.as_slice())), |peak| {
                schedule.rate(peak, step, total_steps).expect("step is within the schedule")
            });
            step += 1;
        }
        let mean = epoch_loss / samples.len() as f64;
        info!("epoch {} loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
        if let Some(target) = cfg.stop_at_accuracy {
            if simple_accuracy(model, &store, samples)? >= target {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        store,
        epoch_losses,
        rate_log,
    })
}

fn clip_scale<T: Real>(grads: &[(&str, Vec<T>)], clip: Option<f64>) -> f64 {
    let Some(max) = clip else { return 1.0 };
    let norm = grads
        .iter()
        .flat_map(|(_, v)| v.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max {
        max / norm
    } else {
        1.0
    }
}
