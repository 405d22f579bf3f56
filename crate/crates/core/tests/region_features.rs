use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regionvqa::numerics::{
    matmul, softmax, Graph, ParamStore, SoftmaxDomain, Tensor,
};
use regionvqa::region::detector::PREFIX;
use regionvqa::region::pyramid::{backbone, fpn_fuse};
use regionvqa::region::{
    iou, nms_per_category, roi_align, select_top_k, BBox, Detector, DetectorConfig,
    DetectorTrainConfig, DetectionSample, ExtractionStatus, LabeledCandidate,
};
use regionvqa::Error;

fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut s = ParamStore::<f32>::new();
    s.init_normal("img", &[c, h, w], 1.0, seed);
    s.get("img").unwrap().clone()
}

fn random_boxes(n: usize, size: f32, seed: u64) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let w = rng.gen_range(2.0..size / 2.0);
            let h = rng.gen_range(2.0..size / 2.0);
            let x = rng.gen_range(0.0..size - w);
            let y = rng.gen_range(0.0..size - h);
            BBox::region(x, y, x + w, y + h).unwrap()
        })
        .collect()
}

fn toy(k: usize, d: usize) -> DetectorConfig {
    DetectorConfig {
        max_regions: k,
        embed_dim: d,
        ..DetectorConfig::toy()
    }
}

/// Brute force: repeatedly take the best remaining box of each category and
/// drop everything in that category overlapping it beyond the threshold.
fn nms_oracle(boxes: &[BBox], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| boxes[i].score > boxes[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for j in 0..boxes.len() {
            if alive[j] && boxes[j].category == boxes[b].category && iou(&boxes[b], &boxes[j]) > thr {
                alive[j] = false;
            }
        }
    }
    kept
}

#[test]
fn nms_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..300 {
        let n = rng.gen_range(0..=50);
        let boxes: Vec<BBox> = (0..n)
            .map(|_| {
                let x = rng.gen_range(0.0..40.0f32);
                let y = rng.gen_range(0.0..40.0f32);
                let w = rng.gen_range(1.0..20.0f32);
                let h = rng.gen_range(1.0..20.0f32);
                BBox::new(x, y, x + w, y + h, rng.gen_range(0.0..1.0), rng.gen_range(0..5)).unwrap()
            })
            .collect();
        let thr = [0.3, 0.5, 0.7][trial % 3];
        assert_eq!(nms_per_category(&boxes, thr), nms_oracle(&boxes, thr), "trial {trial}");
    }
}

#[test]
fn level_assignment_follows_box_size() {
    let det = Detector::new(DetectorConfig::toy()).unwrap();
    let at = |s: f32| det.level_for(&BBox::region(0.0, 0.0, s, s).unwrap());
    assert_eq!(at(4.0), 0);
    assert_eq!(at(8.0), 1);
    assert_eq!(at(15.0), 1);
    assert_eq!(at(16.0), 2);
    assert_eq!(at(200.0), 2);
    assert_eq!(at(0.5), 0);
}

#[test]
fn attribute_head_disabled_is_a_config_error() {
    let cfg = DetectorConfig {
        attribute_head: false,
        ..DetectorConfig::toy()
    };
    let det = Detector::new(cfg).unwrap();
    let store = det.init_params::<f64>(0);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 16]));
    assert!(matches!(det.attribute_logits(&mut g, &store, x), Err(Error::Config(_))));
}

#[test]
fn attribute_logits_shapes_and_zero_weights() {
    let det = Detector::new(DetectorConfig::toy()).unwrap();
    let mut store = det.init_params::<f64>(0);
    store.get_mut("det.attr.w").unwrap().data_mut().fill(0.0);
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[3, 16], 0.4));
    let y = det.attribute_logits(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(y), &[3, 4]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let full = Detector::new(DetectorConfig {
        fpn_dim: 4,
        roi_size: 1,
        embed_dim: 8,
        ..DetectorConfig::full_scale()
    })
    .unwrap();
    let fs = full.init_params::<f32>(0);
    assert_eq!(fs.get("det.attr.w").unwrap().shape(), &[8, 400]);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[100, 8]));
    let y = full.attribute_logits(&mut g, &fs, x).unwrap();
    assert_eq!(g.shape(y), &[100, 400]);
}

#[test]
fn embed_regions_zero_and_identity() {
    let cfg = DetectorConfig {
        fpn_dim: 2,
        roi_size: 1,
        embed_dim: 2,
        ..DetectorConfig::toy()
    };
    let det = Detector::new(cfg).unwrap();
    let mut store = det.init_params::<f64>(3);
    for b in ["det.embed.fc1.b", "det.embed.fc2.b"] {
        store.get_mut(b).unwrap().data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let zero = g.input(Tensor::zeros(&[1, 2]));
    let y = det.embed_regions(&mut g, &store, zero).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    store.insert("det.embed.fc1.w", Tensor::eye(2));
    store.insert("det.embed.fc2.w", Tensor::eye(2));
    let mut g = Graph::new();
    let x = g.input(Tensor::from_f64(&[1, 2], &[0.25, 1.5]).unwrap());
    let y = det.embed_regions(&mut g, &store, x).unwrap();
    assert_eq!(g.value(y).data(), &[0.25, 1.5]);
}

#[test]
fn zero_candidates_give_empty_set_with_warning_status() {
    let det = Detector::new(DetectorConfig::toy()).unwrap();
    let store = det.init_params::<f32>(0);
    let out = det.extract(&store, &random_image(3, 32, 32, 1), &[]).unwrap();
    assert_eq!(out.status, ExtractionStatus::NoCandidates);
    assert!(out.regions.is_empty());
}

#[test]
fn extraction_ignores_attribute_head() {
    let on = Detector::new(toy(5, 16)).unwrap();
    let off = Detector::new(DetectorConfig {
        attribute_head: false,
        ..toy(5, 16)
    })
    .unwrap();
    let img = random_image(3, 32, 32, 2);
    let cands = random_boxes(30, 32.0, 3);
    let a = on.extract(&on.init_params::<f32>(7), &img, &cands).unwrap();
    let b = off.extract(&off.init_params::<f32>(7), &img, &cands).unwrap();
    assert_eq!(a.regions.len(), 5);
    let bits = |s: &[f32]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.regions.features()), bits(b.regions.features()));
    assert_eq!(a.regions.boxes, b.regions.boxes);
}

#[test]
fn extraction_matches_step_by_step_composition() {
    let cfg = toy(5, 16);
    let det = Detector::new(cfg.clone()).unwrap();
    let store = det.init_params::<f64>(21);
    let img = random_image(3, 32, 32, 5).cast::<f64>();
    let cands = random_boxes(40, 32.0, 6);
    let out = det.extract(&store, &img, &cands).unwrap();
    assert_eq!(out.regions.len(), 5);
    assert_eq!(out.regions.dim(), 16);

    // backbone + FPN
    let mut g = Graph::new();
    let x = g.input(img.clone());
    let stages = backbone(&mut g, &store, &format!("{PREFIX}.backbone"), x, 3).unwrap();
    let fused = fpn_fuse(&mut g, &store, &format!("{PREFIX}.fpn"), &stages, cfg.fpn_dim).unwrap();
    let levels: Vec<Tensor<f64>> = fused.iter().map(|&id| g.value(id).clone()).collect();

    // per-candidate RoIAlign → FC → ReLU → FC → class softmax
    let p = |n: &str| store.get(n).unwrap().clone();
    let fc = |x: &Tensor<f64>, w: &str, b: &str| {
        let mut y = matmul(x, &p(w)).unwrap();
        let n = y.shape()[1];
        let bias = p(b);
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += bias.data()[i % n];
        }
        y
    };
    let mut embeds = Vec::new();
    let mut scored = Vec::new();
    for b in &cands {
        let lvl = det.level_for(b);
        let stride = 2usize << lvl;
        let pooled = roi_align(&levels[lvl], b, (cfg.roi_size, cfg.roi_size), 2, 1.0 / stride as f64).unwrap();
        let flat = pooled.reshape(&[1, cfg.pooled_dim()]).unwrap();
        let h = fc(&flat, "det.embed.fc1.w", "det.embed.fc1.b");
        let h = Tensor::new(&[1, 16], h.data().iter().map(|v| v.max(0.0)).collect()).unwrap();
        let e = fc(&h, "det.embed.fc2.w", "det.embed.fc2.b");
        let probs = softmax(&fc(&e, "det.cls.w", "det.cls.b"), SoftmaxDomain::Rows).unwrap();
        let obj = &probs.data()[..cfg.num_object_classes];
        let cat = regionvqa::numerics::argmax(obj);
        scored.push(BBox { score: obj[cat] as f32, category: cat as u32, ..*b });
        embeds.push(e);
    }
    let kept = nms_per_category(&scored, cfg.iou_threshold);
    let kept_boxes: Vec<BBox> = kept.iter().map(|&i| scored[i]).collect();
    let top = select_top_k(&kept_boxes, 5);
    assert_eq!(top, out.regions.boxes);
    for (r, &i) in kept.iter().take(5).enumerate() {
        for (a, b) in embeds[i].data().iter().zip(out.regions.row(r)) {
            assert!((*a as f32 - b).abs() <= 1e-5 * (1.0 + a.abs() as f32));
        }
    }
}

#[test]
fn attribute_loss_gradient_reaches_embedding() {
    let cfg = DetectorConfig {
        backbone_channels: vec![2, 2, 2],
        fpn_dim: 2,
        embed_dim: 3,
        roi_size: 2,
        num_object_classes: 2,
        num_attribute_classes: 3,
        ..DetectorConfig::toy()
    };
    let det = Detector::new(cfg).unwrap();
    let store = det.init_params::<f64>(1);
    let img = random_image(3, 16, 16, 9).cast::<f64>();
    let cands = vec![
        LabeledCandidate { bbox: BBox::region(1.0, 1.0, 9.0, 7.0).unwrap(), category: Some(1), attribute: Some(2) },
        LabeledCandidate { bbox: BBox::region(4.0, 3.0, 15.0, 14.0).unwrap(), category: None, attribute: None },
    ];
    let names = ["det.embed.fc1.w", "det.embed.fc2.w", "det.attr.w"];
    let mut g = Graph::new();
    let x = g.input(img.clone());
    let loss = det.detection_loss(&mut g, &store, x, &cands).unwrap();
    g.backward(loss).unwrap();
    let grads: std::collections::HashMap<&str, Vec<f64>> =
        g.param_grads().into_iter().map(|(n, v)| (n, v.to_vec())).collect();
    for n in names {
        let gr = &grads[n];
        assert!(gr.iter().any(|&v| v != 0.0), "{n} has no gradient");
        // central differences on a few entries
        for idx in [0, gr.len() / 2, gr.len() - 1] {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(n).unwrap().data_mut()[idx] += delta;
                let mut g = Graph::new();
                let x = g.input(img.clone());
                let l = det.detection_loss(&mut g, &s, x, &cands).unwrap();
                g.scalar(l)
            };
            let num = (eval(1e-5) - eval(-1e-5)) / 2e-5;
            let rel = (num - gr[idx]).abs() / num.abs().max(gr[idx].abs()).max(1.0);
            assert!(rel < 1e-4, "{n}[{idx}]: analytic {} numeric {num}", gr[idx]);
        }
    }
}

#[test]
fn detector_training_reduces_loss_and_is_deterministic() {
    let cfg = DetectorConfig {
        multiscale: true,
        ..DetectorConfig::toy()
    };
    let det = Detector::new(cfg).unwrap();
    let samples: Vec<DetectionSample<f32>> = (0..4)
        .map(|i| DetectionSample {
            image: random_image(3, 16, 16, 100 + i),
            candidates: random_boxes(6, 16.0, 200 + i)
                .into_iter()
                .enumerate()
                .map(|(j, b)| LabeledCandidate {
                    bbox: b,
                    category: (j % 2 == 0).then_some((j % 4) as u32),
                    attribute: (j % 2 == 0).then_some(1),
                })
                .collect(),
        })
        .collect();
    let cfg = DetectorTrainConfig { epochs: 8, lr: 5e-3, seed: 4, freeze_backbone: false };
    let (_, losses) = det.train(&samples, &cfg).unwrap();
    let (_, again) = det.train(&samples, &cfg).unwrap();
    assert_eq!(losses, again);
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
}
