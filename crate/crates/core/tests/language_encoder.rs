use proptest::prelude::*;
use regionvqa::checkpoint::save_rvqw;
use regionvqa::language::{
    encode_question, param_count, BertEncoder, EncoderConfig, GruConfig, GruEncoder, TokenSequence,
};
use regionvqa::numerics::{check_params, Graph, ParamStore, Tensor};
use regionvqa::Error;

fn set(store: &mut ParamStore<f64>, name: &str, shape: &[usize], data: &[f64]) {
    store.insert(name, Tensor::from_f64(shape, data).unwrap());
}

fn embed(enc: &BertEncoder, store: &ParamStore<f64>, seq: &TokenSequence) -> Tensor<f64> {
    let mut g = Graph::new();
    let id = enc.embed_tokens(&mut g, store, seq).unwrap();
    g.value(id).clone()
}

fn encode(enc: &BertEncoder, store: &ParamStore<f64>, seq: &TokenSequence) -> Tensor<f64> {
    let mut g = Graph::new();
    let out = enc.encode(&mut g, store, seq).unwrap();
    g.value(out.states).clone()
}

fn oracle_layer_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

fn mat_vec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    (0..cols).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i * cols + j]).sum()).collect()
}

#[test]
fn zero_tables_give_beta_rows() {
    let cfg = EncoderConfig::toy(8, 3, 0, 1);
    let enc = BertEncoder::new(cfg.clone()).unwrap();
    let mut s = enc.init_params::<f64>(0);
    for t in ["lang.emb.token", "lang.emb.position", "lang.emb.segment"] {
        s.get_mut(t).unwrap().data_mut().fill(0.0);
    }
    set(&mut s, "lang.emb.ln.b", &[3], &[0.5, -1.0, 2.0]);
    let seq = encode_question(&[4, 5, 6], &cfg).unwrap();
    let y = embed(&enc, &s, &seq);
    for r in 0..seq.len() {
        assert_eq!(y.row(r), &[0.5, -1.0, 2.0]);
    }
}

#[test]
fn same_token_rows_differ_only_through_positions() {
    let cfg = EncoderConfig::toy(8, 4, 0, 1);
    let enc = BertEncoder::new(cfg.clone()).unwrap();
    let mut s = enc.init_params::<f64>(1);
    let seq = encode_question(&[5, 5], &cfg).unwrap();
    let y = embed(&enc, &s, &seq);
    assert_ne!(y.row(1), y.row(2));
    let pos = s.get_mut("lang.emb.position").unwrap().data_mut();
    let (r1, r2) = pos.split_at_mut(8);
    r2[..4].copy_from_slice(&r1[4..8]);
    let y = embed(&enc, &s, &seq);
    assert_eq!(y.row(1), y.row(2));
}

#[test]
fn embedding_matches_hand_summed_tables() {
    let cfg = EncoderConfig {
        max_positions: 4,
        layer_norm_eps: 1e-6,
        ..EncoderConfig::toy(4, 2, 0, 1)
    };
    let enc = BertEncoder::new(cfg.clone()).unwrap();
    let mut s = enc.init_params::<f64>(0);
    set(&mut s, "lang.emb.token", &[4, 2], &[0.0, 0.0, 1.0, 3.0, -2.0, 0.5, 4.0, 1.0]);
    set(&mut s, "lang.emb.position", &[4, 2], &[0.1, 0.2, 0.3, -0.4, 1.5, 0.0, 0.0, 2.0]);
    set(&mut s, "lang.emb.segment", &[2, 2], &[0.25, -0.25, 9.0, 9.0]);
    set(&mut s, "lang.emb.ln.g", &[2], &[2.0, 0.5]);
    set(&mut s, "lang.emb.ln.b", &[2], &[0.0, 1.0]);
    let seq = encode_question(&[3, 3], &cfg).unwrap();
    assert_eq!(seq.ids, vec![1, 3, 3, 2]);
    let tok = [[1.0, 3.0], [4.0, 1.0], [4.0, 1.0], [-2.0, 0.5]];
    let pos = [[0.1, 0.2], [0.3, -0.4], [1.5, 0.0], [0.0, 2.0]];
    let y = embed(&enc, &s, &seq);
    for t in 0..4 {
        let sum = [tok[t][0] + pos[t][0] + 0.25, tok[t][1] + pos[t][1] - 0.25];
        let n = oracle_layer_norm(&sum, 1e-6);
        let want = [2.0 * n[0], 0.5 * n[1] + 1.0];
        for (a, b) in y.row(t).iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "row {t}: {:?} vs {want:?}", y.row(t));
        }
    }
}

#[test]
fn single_token_attends_to_itself() {
    let cfg = EncoderConfig::toy(8, 4, 1, 2);
    let enc = BertEncoder::new(cfg).unwrap();
    let s = enc.init_params::<f64>(0);
    let mut g = Graph::new();
    let x = g.input(Tensor::from_f64(&[1, 4], &[0.1, -0.3, 0.7, 0.2]).unwrap());
    let b = enc.transformer_block(&mut g, &s, 0, x, &[true]).unwrap();
    for h in b.attention {
        assert_eq!(g.value(h).data(), &[1.0]);
    }
}

#[test]
fn padding_slots_get_no_attention_and_full_mask_errors() {
    let cfg = EncoderConfig::toy(8, 4, 1, 2);
    let enc = BertEncoder::new(cfg.clone()).unwrap();
    let s = enc.init_params::<f64>(0);
    let mut seq = encode_question(&[4, 5], &cfg).unwrap();
    seq.pad_to(7, cfg.pad_id);
    let mut g = Graph::new();
    let out = enc.encode(&mut g, &s, &seq).unwrap();
    for head in &out.attention[0] {
        let a = g.value(*head);
        for q in 0..7 {
            for k in 4..7 {
                assert_eq!(a.at2(q, k), 0.0);
            }
        }
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 4]));
    let err = enc.transformer_block(&mut g, &s, 0, x, &[false, false]).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)));
}

#[test]
fn two_token_block_matches_hand_evaluation() {
    let cfg = EncoderConfig {
        ffn_size: 3,
        layer_norm_eps: 1e-5,
        ..EncoderConfig::toy(8, 2, 1, 1)
    };
    let enc = BertEncoder::new(cfg).unwrap();
    let mut s = enc.init_params::<f64>(0);
    let wq = [0.5, -0.2, 0.1, 0.3];
    let wk = [0.4, 0.0, -0.3, 0.2];
    let wv = [1.0, 0.5, -0.5, 0.25];
    let wo = [0.2, 0.1, 0.0, -0.4];
    let bq = [0.05, -0.1];
    let w1 = [0.3, -0.6, 0.2, 0.1, 0.4, -0.5];
    let b1 = [0.0, 0.1, -0.1];
    let w2 = [0.5, -0.3, 0.2, 0.7, -0.1, 0.05];
    let g1 = [1.5, 0.5];
    let be2 = [0.1, -0.2];
    set(&mut s, "lang.layer0.attn.q.w", &[2, 2], &wq);
    set(&mut s, "lang.layer0.attn.q.b", &[2], &bq);
    set(&mut s, "lang.layer0.attn.k.w", &[2, 2], &wk);
    set(&mut s, "lang.layer0.attn.v.w", &[2, 2], &wv);
    set(&mut s, "lang.layer0.attn.o.w", &[2, 2], &wo);
    set(&mut s, "lang.layer0.attn.ln.g", &[2], &g1);
    set(&mut s, "lang.layer0.ffn.in.w", &[2, 3], &w1);
    set(&mut s, "lang.layer0.ffn.in.b", &[3], &b1);
    set(&mut s, "lang.layer0.ffn.out.w", &[3, 2], &w2);
    set(&mut s, "lang.layer0.ffn.ln.b", &[2], &be2);
    let x = [[0.9, -0.4], [0.2, 0.6]];

    let q: Vec<Vec<f64>> = x.iter().map(|r| mat_vec(r, &wq, 2).iter().zip(bq).map(|(a, b)| a + b).collect()).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| mat_vec(r, &wk, 2)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| mat_vec(r, &wv, 2)).collect();
    let scale = 1.0 / 2f64.sqrt();
    let mut want_attn = [[0.0; 2]; 2];
    let mut want = vec![];
    for i in 0..2 {
        let l: Vec<f64> = (0..2).map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) * scale).collect();
        let z = l[0].exp() + l[1].exp();
        let a = [l[0].exp() / z, l[1].exp() / z];
        want_attn[i] = a;
        let ctx = [a[0] * v[0][0] + a[1] * v[1][0], a[0] * v[0][1] + a[1] * v[1][1]];
        let o = mat_vec(&ctx, &wo, 2);
        let h1: Vec<f64> = oracle_layer_norm(&[x[i][0] + o[0], x[i][1] + o[1]], 1e-5)
            .iter()
            .zip(g1)
            .map(|(n, g)| n * g)
            .collect();
        let f: Vec<f64> = mat_vec(&h1, &w1, 3)
            .iter()
            .zip(b1)
            .map(|(u, b)| {
                let u = u + b;
                0.5 * u * (1.0 + libm::erf(u / 2f64.sqrt()))
            })
            .collect();
        let f2 = mat_vec(&f, &w2, 2);
        let out = oracle_layer_norm(&[h1[0] + f2[0], h1[1] + f2[1]], 1e-5);
        want.push([out[0] + be2[0], out[1] + be2[1]]);
    }

    let mut g = Graph::new();
    let xi = g.input(Tensor::from_f64(&[2, 2], &[0.9, -0.4, 0.2, 0.6]).unwrap());
    let b = enc.transformer_block(&mut g, &s, 0, xi, &[true, true]).unwrap();
    let attn = g.value(b.attention[0]);
    let out = g.value(b.out);
    for i in 0..2 {
        for j in 0..2 {
            assert!((attn.at2(i, j) - want_attn[i][j]).abs() < 1e-12);
            assert!((out.at2(i, j) - want[i][j]).abs() < 1e-9, "{:?} vs {want:?}", out.data());
        }
    }
}

#[test]
fn zero_layers_return_embeddings() {
    let cfg = EncoderConfig::toy(8, 4, 0, 2);
    let enc = BertEncoder::new(cfg.clone()).unwrap();
    let s = enc.init_params::<f64>(3);
    let seq = encode_question(&[3, 4, 5], &cfg).unwrap();
    assert_eq!(encode(&enc, &s, &seq), embed(&enc, &s, &seq));
}

#[test]
fn base_config_emits_768_wide_states() {
    let enc = BertEncoder::new(EncoderConfig::base()).unwrap();
    let s = enc.init_params::<f32>(0);
    let seq = encode_question(&[2054, 2003, 1996], enc.config()).unwrap();
    let mut g = Graph::new();
    let out = enc.encode(&mut g, &s, &seq).unwrap();
    assert_eq!(g.shape(out.states), &[5, 768]);
    assert!(g.value(out.states).is_finite());
    assert_eq!(out.attention.len(), 12);
    assert_eq!(out.attention[0].len(), 12);
}

#[test]
fn padding_ids_do_not_leak_into_valid_rows() {
    let cfg = EncoderConfig::toy(16, 8, 2, 2);
    let enc = BertEncoder::new(cfg.clone()).unwrap();
    let s = enc.init_params::<f64>(5);
    let mut a = encode_question(&[4, 9, 11], &cfg).unwrap();
    a.pad_to(8, cfg.pad_id);
    let mut b = a.clone();
    b.ids[6] = 13;
    b.ids[7] = 3;
    let (ya, yb) = (encode(&enc, &s, &a), encode(&enc, &s, &b));
    for r in 0..5 {
        let bits = |t: &Tensor<f64>| t.row(r).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ya), bits(&yb));
    }
}

#[test]
fn training_mode_encoding_is_reproducible() {
    let cfg = EncoderConfig::toy(16, 8, 2, 2);
    let enc = BertEncoder::new(cfg.clone()).unwrap();
    let s = enc.init_params::<f32>(5);
    let seq = encode_question(&[4, 9, 11], &cfg).unwrap();
    let run = |seed| {
        let mut g = Graph::training(seed);
        let out = enc.encode(&mut g, &s, &seq).unwrap();
        g.value(out.states).clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn attention_rows_sum_to_one(
        tokens in prop::collection::vec(3usize..16, 0..10),
        pad in 0usize..4,
        seed in any::<u64>(),
    ) {
        let cfg = EncoderConfig::toy(16, 8, 2, 2);
        let enc = BertEncoder::new(cfg.clone()).unwrap();
        let s = enc.init_params::<f64>(seed);
        let mut seq = encode_question(&tokens, &cfg).unwrap();
        let valid = seq.len();
        seq.pad_to(valid + pad, cfg.pad_id);
        let mut g = Graph::new();
        let out = enc.encode(&mut g, &s, &seq).unwrap();
        prop_assert_eq!(g.shape(out.states), &[valid + pad, 8]);
        for layer in &out.attention {
            for &h in layer {
                let a = g.value(h);
                for q in 0..valid {
                    let sum: f64 = a.row(q).iter().sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-6);
                }
            }
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = EncoderConfig {
        max_positions: 6,
        ..EncoderConfig::toy(6, 4, 1, 2)
    };
    let enc = BertEncoder::new(cfg.clone()).unwrap();
    let mut s = enc.init_params::<f64>(8);
    for n in ["lang.layer0.attn.ln.b", "lang.layer0.ffn.in.b", "lang.emb.ln.g"] {
        let t = s.get_mut(n).unwrap();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.1 * (i as f64 + 1.0);
        }
    }
    let mut seq = encode_question(&[3, 4], &cfg).unwrap();
    seq.pad_to(5, cfg.pad_id);
    let names: Vec<String> = s.names().map(str::to_string).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let target: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect();
    let report = check_params(
        |g, store| {
            let out = enc.encode(g, store, &seq)?;
            let t = g.input(Tensor::from_f64(&[5, 4], &target).unwrap());
            let d = g.sub(out.states, t)?;
            let sq = g.mul(d, d)?;
            Ok(g.sum(sq))
        },
        &s,
        &names,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn toy_param_count_by_enumeration() {
    let cfg = EncoderConfig {
        num_layers: 1,
        hidden_size: 4,
        num_heads: 2,
        vocab_size: 8,
        max_positions: 8,
        ffn_size: 8,
        ..EncoderConfig::toy(8, 4, 1, 2)
    };
    let embeddings = 8 * 4 + 8 * 4 + 2 * 4 + 2 * 4;
    let attention = 4 * (4 * 4 + 4) + 2 * 4;
    let ffn = (4 * 8 + 8) + (8 * 4 + 4) + 2 * 4;
    assert_eq!(embeddings + attention + ffn, 252);
    assert_eq!(param_count(&cfg), 252);
    let enc = BertEncoder::new(cfg).unwrap();
    let store = enc.init_params::<f32>(0);
    let enumerated: usize = store.iter().map(|(_, t)| t.shape().iter().product::<usize>()).sum();
    assert_eq!(enumerated, 252);
}

#[test]
fn pretrained_hook_loads_matching_tensors() {
    let cfg = EncoderConfig::toy(8, 4, 1, 2);
    let enc = BertEncoder::new(cfg).unwrap();
    let donor = enc.init_params::<f32>(99);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.rvqw");
    save_rvqw(&path, &donor).unwrap();
    let loaded = enc.load_pretrained::<f32>(&path, 0).unwrap();
    assert_eq!(loaded.get("lang.emb.token"), donor.get("lang.emb.token"));

    let mut alien = ParamStore::<f32>::new();
    alien.init_const("lang.emb.token", &[3, 3], 0.0);
    save_rvqw(&path, &alien).unwrap();
    assert!(matches!(enc.load_pretrained::<f32>(&path, 0), Err(Error::Format(_))));
}

fn gru_states(enc: &GruEncoder, s: &ParamStore<f64>, ids: &[usize]) -> Tensor<f64> {
    let seq = TokenSequence {
        ids: ids.to_vec(),
        segments: vec![0; ids.len()],
        positions: (0..ids.len()).collect(),
        mask: vec![true; ids.len()],
        truncated: false,
    };
    let mut g = Graph::new();
    let id = enc.encode(&mut g, s, &seq).unwrap();
    g.value(id).clone()
}

#[test]
fn gru_zero_weights_give_zero_states() {
    let enc = GruEncoder::new(GruConfig { vocab_size: 5, embed_dim: 3, hidden: 6 }).unwrap();
    let mut s = enc.init_params::<f64>(0);
    for n in ["lang.gru.w_ih", "lang.gru.w_hh"] {
        s.get_mut(n).unwrap().data_mut().fill(0.0);
    }
    assert!(gru_states(&enc, &s, &[1, 2, 3]).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_standard_width_is_1280() {
    let enc = GruEncoder::new(GruConfig::standard(20)).unwrap();
    let s = enc.init_params::<f64>(0);
    let y = gru_states(&enc, &s, &[4, 7, 9]);
    assert_eq!(y.shape(), &[3, 1280]);
    assert!(y.is_finite());
}

#[test]
fn one_dim_gru_matches_unrolled_recurrence() {
    let enc = GruEncoder::new(GruConfig { vocab_size: 3, embed_dim: 1, hidden: 1 }).unwrap();
    let mut s = enc.init_params::<f64>(0);
    let emb = [0.5, -1.0, 2.0];
    let (wi, wh, bi, bh) = ([0.7, -0.4, 1.1], [0.3, 0.9, -0.6], [0.1, 0.0, -0.2], [0.0, 0.2, 0.05]);
    set(&mut s, "lang.gru.emb", &[3, 1], &emb);
    set(&mut s, "lang.gru.w_ih", &[1, 3], &wi);
    set(&mut s, "lang.gru.w_hh", &[1, 3], &wh);
    set(&mut s, "lang.gru.b_ih", &[3], &bi);
    set(&mut s, "lang.gru.b_hh", &[3], &bh);
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let ids = [2, 0, 1, 1];
    let mut h = 0.0;
    let mut want = vec![];
    for &t in &ids {
        let x = emb[t];
        let r = sig(x * wi[0] + bi[0] + h * wh[0] + bh[0]);
        let z = sig(x * wi[1] + bi[1] + h * wh[1] + bh[1]);
        let n = (x * wi[2] + bi[2] + r * (h * wh[2] + bh[2])).tanh();
        h = (1.0 - z) * n + z * h;
        want.push(h);
    }
    let got = gru_states(&enc, &s, &ids);
    for (a, b) in got.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gru_gradients_match_finite_differences() {
    let enc = GruEncoder::new(GruConfig { vocab_size: 4, embed_dim: 2, hidden: 3 }).unwrap();
    let s = enc.init_params::<f64>(4);
    let seq = encode_question(&[3], &EncoderConfig::toy(4, 2, 0, 1)).unwrap();
    let names = ["lang.gru.emb", "lang.gru.w_ih", "lang.gru.w_hh", "lang.gru.b_ih", "lang.gru.b_hh"];
    let report = check_params(
        |g, store| {
            let h = enc.encode(g, store, &seq)?;
            let sq = g.mul(h, h)?;
            let w = g.input(Tensor::from_f64(&[3, 3], &[1., -2., 3., 0.5, 1., -1., 2., 0., 1.]).unwrap());
            let p = g.mul(sq, w)?;
            Ok(g.sum(p))
        },
        &s,
        &names,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}
