use proptest::prelude::*;
use regionvqa::ban::{Ban, BanConfig, FusedInit};
use regionvqa::numerics::{check_params, Graph, ParamStore, Tensor};
use regionvqa::Error;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = ParamStore::<f64>::new();
    s.init_normal("x", shape, 1.0, seed);
    s.get("x").unwrap().clone()
}

fn set(store: &mut ParamStore<f64>, name: &str, shape: &[usize], data: &[f64]) {
    store.insert(name, Tensor::from_f64(shape, data).unwrap());
}

fn toy(glimpses: usize) -> BanConfig {
    BanConfig {
        glimpses,
        dropout: 0.0,
        ..BanConfig::new(3, 2, 4, 5)
    }
}

fn relu_proj(x: &[Vec<f64>], w: &[f64], k: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| (0..k).map(|j| r.iter().enumerate().map(|(i, v)| v * w[i * k + j]).sum::<f64>().max(0.0)).collect())
        .collect()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

#[test]
fn zero_projections_give_uniform_map() {
    let ban = Ban::new(toy(2)).unwrap();
    let mut s = ban.init_params::<f64>(0);
    s.get_mut("ban.att.v.w").unwrap().data_mut().fill(0.0);
    let mut g = Graph::new();
    let v = g.input(rand_tensor(&[4, 3], 1));
    let q = g.input(rand_tensor(&[5, 2], 2));
    let a = ban.bilinear_attention_map(&mut g, &s, v, q, &[true; 5], 1).unwrap();
    for &x in g.value(a).data() {
        assert!((x - 1.0 / 20.0).abs() < 1e-15);
    }
}

#[test]
fn single_pair_map_is_one() {
    let ban = Ban::new(toy(1)).unwrap();
    let s = ban.init_params::<f64>(0);
    let mut g = Graph::new();
    let v = g.input(rand_tensor(&[1, 3], 1));
    let q = g.input(rand_tensor(&[1, 2], 2));
    let a = ban.bilinear_attention_map(&mut g, &s, v, q, &[true], 0).unwrap();
    assert_eq!(g.value(a).data(), &[1.0]);
}

#[test]
fn two_by_two_map_matches_hand_bilinear_form() {
    let cfg = BanConfig {
        rank: 2,
        ..toy(2)
    };
    let ban = Ban::new(cfg).unwrap();
    let mut s = ban.init_params::<f64>(0);
    let u = [0.5, -0.3, 0.2, 0.8, -0.1, 0.4];
    let w = [1.0, 0.2, -0.5, 0.6];
    let h = [0.0, 0.0, 1.5, -0.7];
    set(&mut s, "ban.att.v.w", &[3, 2], &u);
    set(&mut s, "ban.att.q.w", &[2, 2], &w);
    set(&mut s, "ban.att.h", &[2, 2], &h);
    let v = vec![vec![1.0, 0.5, -0.2], vec![0.3, -1.0, 2.0]];
    let q = vec![vec![0.7, 0.1], vec![-0.4, 0.9]];
    let vp = relu_proj(&v, &u, 2);
    let qp = relu_proj(&q, &w, 2);
    let logits: Vec<f64> = (0..2)
        .flat_map(|n| {
            let (vp, qp) = (&vp, &qp);
            (0..2).map(move |t| (0..2).map(|k| vp[n][k] * h[2 + k] * qp[t][k]).sum::<f64>())
        })
        .collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let mut g = Graph::new();
    let vi = g.input(Tensor::from_rows(&v).unwrap());
    let qi = g.input(Tensor::from_rows(&q).unwrap());
    let a = ban.bilinear_attention_map(&mut g, &s, vi, qi, &[true, true], 1).unwrap();
    for (got, l) in g.value(a).data().iter().zip(&logits) {
        assert!((got - l.exp() / z).abs() < 1e-14);
    }
}

#[test]
fn one_hot_attention_picks_one_pair() {
    let ban = Ban::new(toy(1)).unwrap();
    let s = ban.init_params::<f64>(3);
    let (v, q) = (rand_tensor(&[3, 3], 4), rand_tensor(&[2, 2], 5));
    let mut onehot = Tensor::zeros(&[3, 2]);
    onehot.data_mut()[2 * 2 + 1] = 1.0;
    let mut g = Graph::new();
    let (vi, qi, ai) = (g.input(v.clone()), g.input(q.clone()), g.input(onehot));
    let j = ban.glimpse_join(&mut g, &s, vi, qi, ai, 0).unwrap();
    let vj = relu_proj(&rows(&v), s.get("ban.g0.v.w").unwrap().data(), 4);
    let qj = relu_proj(&rows(&q), s.get("ban.g0.q.w").unwrap().data(), 4);
    for k in 0..4 {
        assert!((g.value(j).data()[k] - vj[2][k] * qj[1][k]).abs() < 1e-14);
    }
}

#[test]
fn zero_regions_give_zero_join() {
    let ban = Ban::new(toy(1)).unwrap();
    let s = ban.init_params::<f64>(3);
    let mut g = Graph::new();
    let vi = g.input(Tensor::zeros(&[3, 3]));
    let qi = g.input(rand_tensor(&[2, 2], 5));
    let ai = g.input(Tensor::full(&[3, 2], 1.0 / 6.0));
    let j = ban.glimpse_join(&mut g, &s, vi, qi, ai, 0).unwrap();
    assert!(g.value(j).data().iter().all(|&x| x == 0.0));
}

#[test]
fn join_matches_triple_loop() {
    let ban = Ban::new(toy(1)).unwrap();
    let s = ban.init_params::<f64>(6);
    let (v, q) = (rand_tensor(&[2, 3], 7), rand_tensor(&[2, 2], 8));
    let a = Tensor::from_f64(&[2, 2], &[0.1, 0.2, 0.3, 0.4]).unwrap();
    let vj = relu_proj(&rows(&v), s.get("ban.g0.v.w").unwrap().data(), 4);
    let qj = relu_proj(&rows(&q), s.get("ban.g0.q.w").unwrap().data(), 4);
    let mut want = [0.0; 4];
    for (k, w) in want.iter_mut().enumerate() {
        for n in 0..2 {
            for t in 0..2 {
                *w += a.at2(n, t) * vj[n][k] * qj[t][k];
            }
        }
    }
    let mut g = Graph::new();
    let (vi, qi, ai) = (g.input(v), g.input(q), g.input(a));
    let j = ban.glimpse_join(&mut g, &s, vi, qi, ai, 0).unwrap();
    for (x, y) in g.value(j).data().iter().zip(want) {
        assert!((x - y).abs() < 1e-14);
    }
}

fn affine(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let n = w.shape()[1];
    (0..n).map(|j| b.data()[j] + x.iter().enumerate().map(|(i, v)| v * w.at2(i, j)).sum::<f64>()).collect()
}

#[test]
fn single_glimpse_is_one_projected_join() {
    let ban = Ban::new(toy(1)).unwrap();
    let mut s = ban.init_params::<f64>(9);
    set(&mut s, "ban.g0.proj.b", &[4], &[0.1, 0.2, -0.3, 0.0]);
    let mut g = Graph::new();
    let vi = g.input(rand_tensor(&[3, 3], 10));
    let qi = g.input(rand_tensor(&[4, 2], 11));
    let out = ban.forward(&mut g, &s, vi, qi, &[true; 4]).unwrap();
    assert_eq!(out.joins.len(), 1);
    let want = affine(g.value(out.joins[0]).data(), s.get("ban.g0.proj.w").unwrap(), s.get("ban.g0.proj.b").unwrap());
    for (x, y) in g.value(out.fused).data().iter().zip(want) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn eight_glimpses_by_default() {
    let cfg = BanConfig::new(3, 2, 4, 5);
    assert_eq!(cfg.glimpses, 8);
    let ban = Ban::new(cfg).unwrap();
    let s = ban.init_params::<f64>(1);
    let mut g = Graph::new();
    let vi = g.input(rand_tensor(&[6, 3], 12));
    let qi = g.input(rand_tensor(&[4, 2], 13));
    let out = ban.forward(&mut g, &s, vi, qi, &[true, true, true, false]).unwrap();
    assert_eq!(out.maps.len(), 8);
    assert_eq!(out.joins.len(), 8);
    for &m in &out.maps {
        assert_eq!(g.shape(m), &[6, 4]);
        let sum: f64 = g.value(m).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn two_glimpses_compose_with_residual() {
    let ban = Ban::new(toy(2)).unwrap();
    let s = ban.init_params::<f64>(14);
    let (v, q) = (rand_tensor(&[3, 3], 15), rand_tensor(&[2, 2], 16));
    let mask = [true, true];
    let mut g = Graph::new();
    let (vi, qi) = (g.input(v.clone()), g.input(q.clone()));
    let out = ban.forward(&mut g, &s, vi, qi, &mask).unwrap();

    let mut f = vec![0.0; 4];
    for gl in 0..2 {
        let mut h = Graph::new();
        let (vi, qi) = (h.input(v.clone()), h.input(q.clone()));
        let a = ban.bilinear_attention_map(&mut h, &s, vi, qi, &mask, gl).unwrap();
        let j = ban.glimpse_join(&mut h, &s, vi, qi, a, gl).unwrap();
        let p = affine(
            h.value(j).data(),
            s.get(&format!("ban.g{gl}.proj.w")).unwrap(),
            s.get(&format!("ban.g{gl}.proj.b")).unwrap(),
        );
        for (fi, pi) in f.iter_mut().zip(p) {
            *fi += pi;
        }
    }
    for (x, y) in g.value(out.fused).data().iter().zip(&f) {
        assert!((x - y).abs() < 1e-13);
    }

    let first = Ban::new(BanConfig { init: FusedInit::FirstJoin, ..toy(2) }).unwrap();
    let mut g2 = Graph::new();
    let (vi, qi) = (g2.input(v), g2.input(q));
    let out2 = first.forward(&mut g2, &s, vi, qi, &mask).unwrap();
    let j0 = g2.value(out2.joins[0]).data().to_vec();
    for ((x, y), j) in g2.value(out2.fused).data().iter().zip(&f).zip(j0) {
        assert!((x - (y + j)).abs() < 1e-13);
    }
}

#[test]
fn classifier_zero_and_identity_heads() {
    let cfg = BanConfig {
        classifier_hidden: 4,
        num_answers: 3,
        ..toy(1)
    };
    let ban = Ban::new(cfg).unwrap();
    let mut s = ban.init_params::<f64>(0);
    s.get_mut("cls.fc2.w").unwrap().data_mut().fill(0.0);
    let mut g = Graph::new();
    let f = g.input(Tensor::from_f64(&[1, 4], &[0.5, 2.0, 0.25, 1.0]).unwrap());
    let l = ban.answer_logits(&mut g, &s, f).unwrap();
    assert_eq!(g.value(l).data(), &[0.0, 0.0, 0.0]);

    s.insert("cls.fc1.w", Tensor::eye(4));
    let mut trunc = Tensor::zeros(&[4, 3]);
    for i in 0..3 {
        trunc.data_mut()[i * 3 + i] = 1.0;
    }
    s.insert("cls.fc2.w", trunc);
    let mut g = Graph::new();
    let f = g.input(Tensor::from_f64(&[1, 4], &[0.5, 2.0, 0.25, 1.0]).unwrap());
    let l = ban.answer_logits(&mut g, &s, f).unwrap();
    assert_eq!(g.value(l).data(), &[0.5, 2.0, 0.25]);
    let probs = regionvqa::numerics::softmax(g.value(l), regionvqa::numerics::SoftmaxDomain::Rows).unwrap();
    assert!((probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn masked_slot_order_and_region_order_do_not_matter() {
    let ban = Ban::new(toy(2)).unwrap();
    let s = ban.init_params::<f64>(20);
    let v = rand_tensor(&[4, 3], 21);
    let q = rand_tensor(&[5, 2], 22);
    let mask = [true, true, true, false, false];
    let base = ban.logits(&s, &v, &q, &mask).unwrap();

    let mut q2 = q.clone();
    let (a, b) = q2.data_mut().split_at_mut(8);
    a[6..8].swap_with_slice(&mut b[..2]);
    let swapped = ban.logits(&s, &v, &q2, &mask).unwrap();
    assert_eq!(base, swapped);

    let perm = [2usize, 0, 3, 1];
    let vr: Vec<Vec<f64>> = perm.iter().map(|&i| v.row(i).to_vec()).collect();
    let permuted = ban.logits(&s, &Tensor::from_rows(&vr).unwrap(), &q, &mask).unwrap();
    for (x, y) in base.data().iter().zip(permuted.data()) {
        assert!((x - y).abs() <= 1e-6);
    }
}

#[test]
fn fully_masked_question_is_an_error() {
    let ban = Ban::new(toy(1)).unwrap();
    let s = ban.init_params::<f64>(0);
    let r = ban.logits(&s, &rand_tensor(&[2, 3], 1), &rand_tensor(&[2, 2], 2), &[false, false]);
    assert!(matches!(r, Err(Error::InvalidInput(_))));
}

#[test]
fn fusion_gradients_match_finite_differences() {
    let ban = Ban::new(toy(2)).unwrap();
    let s = ban.init_params::<f64>(30);
    let (v, q) = (rand_tensor(&[3, 3], 31), rand_tensor(&[3, 2], 32));
    let names: Vec<String> = s.names().map(str::to_string).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let report = check_params(
        |g, store| {
            let (vi, qi) = (g.input(v.clone()), g.input(q.clone()));
            let out = ban.forward(g, store, vi, qi, &[true, true, false])?;
            let l = ban.answer_logits(g, store, out.fused)?;
            g.bce_soft_loss(l, &[1.0, 0.0, 0.3, 0.0, 0.6])
        },
        &s,
        &names,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn maps_lie_on_the_simplex(n in 1usize..6, t in 1usize..6, seed in any::<u64>(), drop in 0usize..6) {
        let ban = Ban::new(toy(3)).unwrap();
        let s = ban.init_params::<f64>(seed);
        let mut mask = vec![true; t];
        if drop < t && t > 1 {
            mask[drop] = false;
        }
        let mut g = Graph::new();
        let vi = g.input(rand_tensor(&[n, 3], seed ^ 1));
        let qi = g.input(rand_tensor(&[t, 2], seed ^ 2));
        let out = ban.forward(&mut g, &s, vi, qi, &mask).unwrap();
        for &m in &out.maps {
            let a = g.value(m);
            prop_assert!(a.data().iter().all(|&x| x >= 0.0));
            prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}
