//! Randomised finite-difference suite over every differentiable operation and
//! model block, run in f64.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ban::{Ban, BanConfig};
use crate::error::{Error, Result};
use crate::language::{encode_question, BertEncoder, EncoderConfig, GruConfig, GruEncoder};
use crate::numerics::kernels::MapRoi;
use crate::numerics::{check_params, Activation, CheckReport, Graph, NodeId, ParamStore, SoftmaxDomain, Tensor};
use crate::region::{fpn_fuse, BBox, Detector, DetectorConfig, LabeledCandidate};

pub const OPS: [&str; 16] = [
    "matmul",
    "softmax",
    "layer_norm",
    "activations",
    "roi_align",
    "conv_fpn",
    "region_embed",
    "detector",
    "attention_block",
    "encoder",
    "gru",
    "bilinear_attention",
    "glimpse_join",
    "classifier",
    "losses",
    "end_to_end",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub instances: usize,
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            step: 1e-5,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpResult {
    pub op: &'static str,
    pub instances: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub elapsed: Duration,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<OpResult>,
    pub tol: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(OpResult::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn elapsed(&self) -> Duration {
        self.results.iter().map(|r| r.elapsed).sum()
    }
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let results = OPS.iter().map(|op| run_op(op, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport { results, tol: cfg.tol })
}

pub fn run_op(op: &str, cfg: &SuiteConfig) -> Result<OpResult> {
    let (idx, &op) = OPS
        .iter()
        .enumerate()
        .find(|(_, &o)| o == op)
        .ok_or_else(|| Error::InvalidInput(format!("unknown gradient check op {op:?}")))?;
    if cfg.instances == 0 {
        return Err(Error::Config("gradient suite needs at least one instance".into()));
    }
    let start = Instant::now();
    let mut failures = 0;
    let mut worst = 0.0f64;
    for i in 0..cfg.instances {
        let seed = cfg.seed ^ ((idx as u64) << 32) ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let report = instance(op, &mut rng, cfg)?;
        worst = worst.max(report.max_rel_err);
        if !report.passed {
            failures += 1;
        }
    }
    Ok(OpResult {
        op,
        instances: cfg.instances,
        failures,
        max_rel_err: worst,
        elapsed: start.elapsed(),
    })
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches")
}

/// Normal samples kept at least 1e-3 away from zero, for inputs that feed a
/// ReLU kink directly.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = normal(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 1e-3 {
            *v = 1e-3f64.copysign(*v) + *v;
        }
    }
    t
}

/// Random mask with at least one valid entry.
fn mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    m[rng.gen_range(0..n)] = true;
    m
}

/// `Σ w ∘ x` with a fresh random weight tensor, so every output entry gets a
/// distinct upstream gradient.
fn weighted(g: &mut Graph<f64>, x: NodeId, w: &Tensor<f64>) -> Result<NodeId> {
    let wi = g.input(w.clone());
    let p = g.mul(x, wi)?;
    Ok(g.sum(p))
}

/// Replaces constant-initialised tensors (zero biases) with small random
/// values. A zero bias behind a dead ReLU leaves the next pre-activation at
/// exactly 0, where the function has no derivative.
fn randomize_constants(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for n in all_names(store) {
        let t = store.get_mut(&n).expect("name from store");
        let first = t.data()[0];
        if t.data().iter().all(|&v| v == first) {
            for v in t.data_mut() {
                *v = first + 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

fn all_names(store: &ParamStore<f64>) -> Vec<String> {
    store.names().map(str::to_string).collect()
}

fn check<F>(f: F, store: &ParamStore<f64>, cfg: &SuiteConfig) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let names = all_names(store);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    check_params(f, store, &names, cfg.step, cfg.tol)
}

fn tiny_detector(rng: &mut ChaCha8Rng) -> Result<Detector> {
    Detector::new(DetectorConfig {
        backbone_channels: vec![2, 2, 2],
        fpn_dim: 2,
        embed_dim: 3,
        num_object_classes: 3,
        num_attribute_classes: 2,
        attribute_head: rng.gen_bool(0.5),
        roi_size: 2,
        sampling_ratio: rng.gen_range(1..=2),
        canonical_box_size: 6.0,
        ..DetectorConfig::toy()
    })
}

fn tiny_bert(vocab: usize) -> Result<BertEncoder> {
    BertEncoder::new(EncoderConfig {
        dropout: 0.0,
        max_positions: 8,
        ..EncoderConfig::toy(vocab, 4, 1, 2)
    })
}

fn tiny_ban(rng: &mut ChaCha8Rng, visual: usize, question: usize) -> Result<Ban> {
    Ban::new(BanConfig {
        glimpses: rng.gen_range(1..=3),
        dropout: 0.0,
        ..BanConfig::new(visual, question, 4, 5)
    })
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(3..vocab)).collect()
}

fn instance(op: &str, rng: &mut ChaCha8Rng, cfg: &SuiteConfig) -> Result<CheckReport> {
    let mut s = ParamStore::<f64>::new();
    match op {
        "matmul" => {
            let (n, k, m) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            s.insert("a", normal(rng, &[n, k]));
            s.insert("b", normal(rng, &[k, m]));
            s.insert("c", normal(rng, &[m, k]));
            let (w1, w2, w3) = (normal(rng, &[n, m]), normal(rng, &[n, m]), normal(rng, &[k, n]));
            check(
                |g, st| {
                    let (a, b, c) = (g.param(st, "a")?, g.param(st, "b")?, g.param(st, "c")?);
                    let ab = g.matmul(a, b)?;
                    let act = g.matmul_bt(a, c)?;
                    let at = g.transpose(a)?;
                    let parts = [weighted(g, ab, &w1)?, weighted(g, act, &w2)?, weighted(g, at, &w3)?];
                    let x = g.add(parts[0], parts[1])?;
                    g.add(x, parts[2])
                },
                &s,
                cfg,
            )
        }
        "softmax" => {
            let (n, m) = (rng.gen_range(1..5), rng.gen_range(1..6));
            s.insert("x", normal(rng, &[n, m]));
            let rows = rng.gen_bool(0.5);
            let valid: Vec<bool> = if rows {
                (0..n).flat_map(|_| mask(rng, m)).collect()
            } else {
                mask(rng, n * m)
            };
            let w = normal(rng, &[n, m]);
            let domain = if rows { SoftmaxDomain::Rows } else { SoftmaxDomain::All };
            let use_mask = rng.gen_bool(0.5);
            check(
                |g, st| {
                    let x = g.param(st, "x")?;
                    let y = g.softmax(x, domain, use_mask.then_some(&valid[..]))?;
                    weighted(g, y, &w)
                },
                &s,
                cfg,
            )
        }
        "layer_norm" => {
            let (n, d) = (rng.gen_range(1..5), rng.gen_range(2..7));
            s.insert("x", normal(rng, &[n, d]));
            s.insert("gamma", normal(rng, &[d]));
            s.insert("beta", normal(rng, &[d]));
            let w = normal(rng, &[n, d]);
            check(
                |g, st| {
                    let (x, ga, be) = (g.param(st, "x")?, g.param(st, "gamma")?, g.param(st, "beta")?);
                    let y = g.layer_norm(x, ga, be, 1e-12)?;
                    weighted(g, y, &w)
                },
                &s,
                cfg,
            )
        }
        "activations" => {
            let (n, m) = (rng.gen_range(1..5), rng.gen_range(1..5));
            s.insert("x", away_from_zero(rng, &[n, m]));
            let ws: Vec<Tensor<f64>> = Activation::ALL.iter().map(|_| normal(rng, &[n, m])).collect();
            check(
                |g, st| {
                    let x = g.param(st, "x")?;
                    let mut total = None;
                    for (kind, w) in Activation::ALL.iter().zip(&ws) {
                        let y = g.activation(x, *kind);
                        let l = weighted(g, y, w)?;
                        total = Some(match total {
                            Some(t) => g.add(t, l)?,
                            None => l,
                        });
                    }
                    Ok(total.expect("four activations"))
                },
                &s,
                cfg,
            )
        }
        "roi_align" => {
            let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(3..9), rng.gen_range(3..9));
            s.insert("feat", normal(rng, &[c, h, w]));
            let n = rng.gen_range(1..4);
            let rois: Vec<MapRoi<f64>> = (0..n)
                .map(|_| {
                    let x1 = rng.gen_range(-0.5..w as f64 - 1.0);
                    let y1 = rng.gen_range(-0.5..h as f64 - 1.0);
                    MapRoi {
                        x1,
                        y1,
                        x2: rng.gen_range(x1 + 0.1..w as f64),
                        y2: rng.gen_range(y1 + 0.1..h as f64),
                    }
                })
                .collect();
            let (oh, ow, sampling) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..3));
            let wt = normal(rng, &[n, c * oh * ow]);
            check(
                |g, st| {
                    let f = g.param(st, "feat")?;
                    let y = g.roi_align(f, &rois, oh, ow, sampling)?;
                    weighted(g, y, &wt)
                },
                &s,
                cfg,
            )
        }
        "conv_fpn" => {
            let levels = rng.gen_range(1..4);
            let chans: Vec<usize> = (0..levels).map(|_| rng.gen_range(1..3)).collect();
            let fpn_dim = rng.gen_range(1..3);
            let mut side = rng.gen_range(3..7);
            let mut shapes = Vec::new();
            for (i, &c) in chans.iter().enumerate() {
                shapes.push([fpn_dim, side, side]);
                s.insert(format!("in{i}"), normal(rng, &[c, side, side]));
                side = side.div_ceil(2);
            }
            crate::region::pyramid::init_fpn(&mut s, "fpn", &chans, fpn_dim, rng.gen());
            randomize_constants(&mut s, rng);
            let ws: Vec<Tensor<f64>> = shapes.iter().map(|sh| normal(rng, sh)).collect();
            check(
                |g, st| {
                    let ins = (0..levels).map(|i| g.param(st, &format!("in{i}"))).collect::<Result<Vec<_>>>()?;
                    let outs = fpn_fuse(g, st, "fpn", &ins, fpn_dim)?;
                    let mut total = weighted(g, outs[0], &ws[0])?;
                    for (o, w) in outs.iter().zip(&ws).skip(1) {
                        let l = weighted(g, *o, w)?;
                        total = g.add(total, l)?;
                    }
                    Ok(total)
                },
                &s,
                cfg,
            )
        }
        "region_embed" => {
            let det = tiny_detector(rng)?;
            let mut s = det.init_params::<f64>(rng.gen());
            randomize_constants(&mut s, rng);
            let n = rng.gen_range(1..5);
            s.insert("pooled", normal(rng, &[n, det.config().pooled_dim()]));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=3)).collect();
            let attrs: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let names: Vec<String> = all_names(&s)
                .into_iter()
                .filter(|n| !n.contains("backbone") && !n.contains("fpn"))
                .collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            check_params(
                |g, st| {
                    let p = g.param(st, "pooled")?;
                    let f = det.embed_regions(g, st, p)?;
                    let cl = det.class_logits(g, st, f)?;
                    let mut loss = g.softmax_cross_entropy(cl, &labels)?;
                    if det.config().attribute_head {
                        let al = det.attribute_logits(g, st, f)?;
                        let ce = g.softmax_cross_entropy(al, &attrs)?;
                        let ce = g.scale(ce, 0.5);
                        loss = g.add(loss, ce)?;
                    }
                    Ok(loss)
                },
                &s,
                &names,
                cfg.step,
                cfg.tol,
            )
        }
        "detector" => {
            let det = tiny_detector(rng)?;
            let mut s = det.init_params::<f64>(rng.gen());
            randomize_constants(&mut s, rng);
            let side = rng.gen_range(8..13);
            s.insert("image", normal(rng, &[3, side, side]));
            let n = rng.gen_range(1..4);
            let cands: Vec<LabeledCandidate> = (0..n)
                .map(|_| {
                    let x1 = rng.gen_range(0.0..side as f64 - 3.0);
                    let y1 = rng.gen_range(0.0..side as f64 - 3.0);
                    let bw = rng.gen_range(2.0..side as f64 - x1);
                    let bh = rng.gen_range(2.0..side as f64 - y1);
                    LabeledCandidate {
                        bbox: BBox::new(x1 as f32, y1 as f32, (x1 + bw) as f32, (y1 + bh) as f32, 1.0, 0)
                            .expect("valid box"),
                        category: rng.gen_bool(0.7).then(|| rng.gen_range(0..3)),
                        attribute: rng.gen_bool(0.7).then(|| rng.gen_range(0..2)),
                    }
                })
                .collect();
            check(
                |g, st| {
                    let img = g.param(st, "image")?;
                    det.detection_loss(g, st, img, &cands)
                },
                &s,
                cfg,
            )
        }
        "attention_block" => {
            let bert = tiny_bert(6)?;
            let mut s = bert.init_params::<f64>(rng.gen());
            randomize_constants(&mut s, rng);
            let t = rng.gen_range(1..6);
            s.insert("x", normal(rng, &[t, 4]));
            let m = mask(rng, t);
            let w = normal(rng, &[t, 4]);
            let names: Vec<String> = all_names(&s).into_iter().filter(|n| !n.contains(".emb.")).collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            check_params(
                |g, st| {
                    let x = g.param(st, "x")?;
                    let out = bert.transformer_block(g, st, 0, x, &m)?;
                    weighted(g, out.out, &w)
                },
                &s,
                &names,
                cfg.step,
                cfg.tol,
            )
        }
        "encoder" => {
            let bert = tiny_bert(7)?;
            let mut s = bert.init_params::<f64>(rng.gen());
            randomize_constants(&mut s, rng);
            let len = rng.gen_range(1..5);
            let mut seq = encode_question(&random_tokens(rng, 7, len), bert.config())?;
            let padded = seq.len() + rng.gen_range(0..2);
            seq.pad_to(padded, 0);
            let w = normal(rng, &[padded, 4]);
            check(
                |g, st| {
                    let out = bert.encode(g, st, &seq)?;
                    weighted(g, out.states, &w)
                },
                &s,
                cfg,
            )
        }
        "gru" => {
            let gru = GruEncoder::new(GruConfig {
                vocab_size: 6,
                embed_dim: 3,
                hidden: 4,
            })?;
            let mut s = gru.init_params::<f64>(rng.gen());
            randomize_constants(&mut s, rng);
            let len = rng.gen_range(1..5);
            let seq = encode_question(&random_tokens(rng, 6, len), &EncoderConfig::toy(6, 4, 1, 1))?;
            let w = normal(rng, &[seq.len(), 4]);
            check(
                |g, st| {
                    let h = gru.encode(g, st, &seq)?;
                    weighted(g, h, &w)
                },
                &s,
                cfg,
            )
        }
        "bilinear_attention" | "glimpse_join" => {
            let ban = tiny_ban(rng, 3, 2)?;
            let mut s = ban.init_params::<f64>(rng.gen());
            randomize_constants(&mut s, rng);
            let (n, t) = (rng.gen_range(1..5), rng.gen_range(1..5));
            s.insert("v", normal(rng, &[n, 3]));
            s.insert("q", normal(rng, &[t, 2]));
            let m = mask(rng, t);
            let glimpse = rng.gen_range(0..ban.config().glimpses);
            let join = op == "glimpse_join";
            if join {
                let mut a = normal(rng, &[n, t]);
                for v in a.data_mut() {
                    *v = v.abs();
                }
                s.insert("att", a);
            }
            let w = normal(rng, &[if join { 1 } else { n }, if join { 4 } else { t }]);
            check(
                |g, st| {
                    let (v, q) = (g.param(st, "v")?, g.param(st, "q")?);
                    let y = if join {
                        let a = g.param(st, "att")?;
                        ban.glimpse_join(g, st, v, q, a, glimpse)?
                    } else {
                        ban.bilinear_attention_map(g, st, v, q, &m, glimpse)?
                    };
                    weighted(g, y, &w)
                },
                &s,
                cfg,
            )
        }
        "classifier" => {
            let ban = tiny_ban(rng, 3, 2)?;
            let mut s = ban.init_params::<f64>(rng.gen());
            randomize_constants(&mut s, rng);
            s.insert("fused", away_from_zero(rng, &[1, 4]));
            let w = normal(rng, &[1, 5]);
            let names: Vec<String> = all_names(&s)
                .into_iter()
                .filter(|n| n == "fused" || n.starts_with("cls."))
                .collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            check_params(
                |g, st| {
                    let f = g.param(st, "fused")?;
                    let l = ban.answer_logits(g, st, f)?;
                    weighted(g, l, &w)
                },
                &s,
                &names,
                cfg.step,
                cfg.tol,
            )
        }
        "losses" => {
            let (n, a) = (rng.gen_range(1..4), rng.gen_range(2..6));
            s.insert("x", normal(rng, &[n, a]));
            let targets: Vec<f64> = (0..n * a)
                .map(|_| match rng.gen_range(0..3) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.gen_range(0.0..1.0),
                })
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..a)).collect();
            check(
                |g, st| {
                    let x = g.param(st, "x")?;
                    let bce = g.bce_soft_loss(x, &targets)?;
                    let ce = g.softmax_cross_entropy(x, &labels)?;
                    g.add(bce, ce)
                },
                &s,
                cfg,
            )
        }
        "end_to_end" => {
            let det = tiny_detector(rng)?;
            let bert = tiny_bert(7)?;
            let ban = tiny_ban(rng, 3, 4)?;
            let seed: u64 = rng.gen();
            let mut s = det.init_params::<f64>(seed);
            let names: Vec<String> = all_names(&s)
                .into_iter()
                .filter(|n| n.contains(".embed."))
                .collect();
            let keep = s.clone();
            s = ParamStore::new();
            for n in &names {
                s.insert(n.clone(), keep.require(n)?.clone());
            }
            for (n, t) in bert.init_params::<f64>(seed ^ 1).iter() {
                s.insert(n, t.clone());
            }
            for (n, t) in ban.init_params::<f64>(seed ^ 2).iter() {
                s.insert(n, t.clone());
            }
            randomize_constants(&mut s, rng);
            let k = rng.gen_range(1..4);
            s.insert("pooled", normal(rng, &[k, det.config().pooled_dim()]));
            let len = rng.gen_range(1..4);
            let seq = encode_question(&random_tokens(rng, 7, len), bert.config())?;
            let qmask = seq.fusion_mask(true);
            let targets: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
            check(
                |g, st| {
                    let p = g.param(st, "pooled")?;
                    let v = det.embed_regions(g, st, p)?;
                    let q = bert.encode(g, st, &seq)?.states;
                    let out = ban.forward(g, st, v, q, &qmask)?;
                    let l = ban.answer_logits(g, st, out.fused)?;
                    g.bce_soft_loss(l, &targets)
                },
                &s,
                cfg,
            )
        }
        other => Err(Error::InvalidInput(format!("unknown gradient check op {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_instances() {
        let cfg = SuiteConfig {
            instances: 3,
            ..SuiteConfig::default()
        };
        let report = run_suite(&cfg).unwrap();
        for r in &report.results {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(run_op("nope", &SuiteConfig::default()).is_err());
    }
}
