//! Structural invariants of the encoder, the affordance query module and the
//! heads.

mod oracles;

use lmad_core::aqm;
use lmad_core::autograd::Graph;
use lmad_core::encoder::{encode, encode_batch};
use lmad_core::geometry::PointCloud;
use lmad_core::head::{self, AffordancePrediction, HeadVariant};
use lmad_core::lm;
use lmad_core::model::{Model, ModelConfig};
use lmad_core::nn::{self, Mode};
use lmad_core::params::ParamStore;
use lmad_core::tensor::{Element, Tensor};
use lmad_core::text::{TokenizedText, Vocabulary};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn vocab() -> Vocabulary {
    Vocabulary::from_words(&lmad_core::dataset::AFFORDANCES[..]).unwrap()
}

/// Adds Gaussian noise to every tensor so that no layer sits at its
/// initial (often symmetric or zero) value.
fn jitter<T: Element>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, std: f64) {
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    let normal = Normal::new(0.0, std).unwrap();
    for n in names {
        for v in ps.tensor_mut(&n).unwrap().data_mut() {
            *v += T::from_f64(normal.sample(rng));
        }
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab_size: usize, max_len: usize) -> TokenizedText {
    let live = rng.random_range(1..=max_len);
    let ids = (0..max_len).map(|_| rng.random_range(0..vocab_size as u32)).collect();
    let attention_mask = (0..max_len).map(|i| i < live).collect();
    TokenizedText { ids, attention_mask }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f32> {
    Tensor::from_fn(&[r, c], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn encoder_rows_follow_input_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut model = Model::<f32>::new(ModelConfig::desk(vocab(), HeadVariant::Aqm), 3).unwrap();
    jitter(&mut model.params, &mut rng, 0.05);
    let cfg = &model.config.encoder;
    for _ in 0..50 {
        let n = rng.random_range(cfg.min_points()..=200);
        let pc = oracles::distinct_cloud(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted = pc.select(&perm);

        let mut g = Graph::inference();
        let a = encode(&mut g, &model.params, cfg, &pc, Mode::Eval).unwrap();
        let b = encode(&mut g, &model.params, cfg, &permuted, Mode::Eval).unwrap();
        let expect = g.value(a.h_c).select_rows(&perm).unwrap();
        assert!(expect.bit_eq(g.value(b.h_c)));
        let expect = g.value(a.h_p).select_rows(&perm).unwrap();
        assert!(expect.bit_eq(g.value(b.h_p)));
    }
}

#[test]
fn batched_eval_encoding_equals_single_cloud_encoding() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut model = Model::<f32>::new(ModelConfig::desk(vocab(), HeadVariant::Aqm), 4).unwrap();
    jitter(&mut model.params, &mut rng, 0.05);
    let cfg = &model.config.encoder;
    let clouds: Vec<PointCloud> = (0..3).map(|i| oracles::distinct_cloud(&mut rng, 128 + 20 * i)).collect();
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let mut g = Graph::inference();
    let batch = encode_batch(&mut g, &model.params, cfg, &refs, Mode::Eval).unwrap();
    for (pc, out) in clouds.iter().zip(batch) {
        let single = encode(&mut g, &model.params, cfg, pc, Mode::Eval).unwrap();
        assert!(g.value(single.h_c).bit_eq(g.value(out.h_c)));
    }
}

fn micro_aqm(rng: &mut ChaCha8Rng, zero_out: bool) -> Model<f32> {
    let mut model = Model::<f32>::new(ModelConfig::desk(vocab(), HeadVariant::Aqm), rng.random()).unwrap();
    jitter(&mut model.params, rng, 0.2);
    if zero_out {
        aqm::zero_cross_attention(&mut model.params, &model.config.aqm()).unwrap();
    }
    model
}

#[test]
fn zeroed_cross_attention_reproduces_the_plain_lm() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let model = micro_aqm(&mut rng, true);
        let cfg = model.config.aqm();
        let tokens = random_tokens(&mut rng, cfg.lm.vocab_size, cfg.lm.max_len);
        let n = rng.random_range(1..40);
        let mut g = Graph::inference();
        let h_c = g.constant(random_matrix(&mut rng, n, cfg.d_p)).unwrap();
        let kv = aqm::project_point_keys(&mut g, &model.params, &cfg, h_c).unwrap();
        let trace = aqm::aqm_forward(&mut g, &model.params, &cfg, &tokens, &kv).unwrap();
        let plain = lm::lm_forward(&mut g, &model.params, &cfg.lm, &tokens).unwrap();
        assert!(g.value(trace.g).bit_eq(g.value(plain)));
        for i in 1..trace.xs.len() {
            assert_eq!(trace.xs[i], trace.gs[i - 1]);
        }
        assert_eq!(trace.g, *trace.gs.last().unwrap());
    }
}

#[test]
fn aqm_ignores_point_order_but_not_point_content() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..20 {
        let mut model = Model::<f64>::new(ModelConfig::desk(vocab(), HeadVariant::Aqm), rng.random()).unwrap();
        jitter(&mut model.params, &mut rng, 0.2);
        let cfg = model.config.aqm();
        let tokens = random_tokens(&mut rng, cfg.lm.vocab_size, cfg.lm.max_len);
        let n = rng.random_range(2..60);
        let feats: Tensor<f64> = Tensor::from_fn(&[n, cfg.d_p], |_| rng.random_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut changed = feats.clone();
        changed.data_mut()[0] += 1.0;

        let run = |h: Tensor<f64>| {
            let mut g = Graph::inference();
            let h_c = g.constant(h).unwrap();
            let kv = aqm::project_point_keys(&mut g, &model.params, &cfg, h_c).unwrap();
            let t = aqm::aqm_forward(&mut g, &model.params, &cfg, &tokens, &kv).unwrap();
            g.value(t.g).clone()
        };
        let base = run(feats.clone());
        let diff = base.max_abs_diff(&run(feats.select_rows(&perm).unwrap()));
        assert!(diff <= 1e-6, "{diff}");
        assert!(base.max_abs_diff(&run(changed)) > 0.0);
    }
}

#[test]
fn plain_xattn_with_zero_outputs_decodes_raw_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..10 {
        let mut model = Model::<f32>::new(ModelConfig::desk(vocab(), HeadVariant::Xattn), rng.random()).unwrap();
        jitter(&mut model.params, &mut rng, 0.2);
        let lm_cfg = model.config.lm.clone();
        for i in 0..lm_cfg.n_layers {
            for part in ["weight", "bias"] {
                let name = format!("{}.o.{part}", head::xattn_layer_prefix(i));
                model.params.tensor_mut(&name).unwrap().data_mut().fill(0.0);
            }
        }
        let tokens = random_tokens(&mut rng, lm_cfg.vocab_size, lm_cfg.max_len);
        let mut g = Graph::inference();
        let h_c = g.constant(random_matrix(&mut rng, 30, model.config.d_p())).unwrap();
        let via_head = head::plain_xattn_head(&mut g, &model.params, &lm_cfg, &tokens, h_c).unwrap();
        let emb = lm::embed(&mut g, &model.params, &lm_cfg, &tokens).unwrap();
        let direct = head::decode(&mut g, &model.params, h_c, emb, &tokens.attention_mask, lm_cfg.n_heads).unwrap();
        assert!(g.value(via_head).bit_eq(g.value(direct)));
    }
}

#[test]
fn identical_values_give_query_independent_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let mut ps = ParamStore::<f64>::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(1);
    let mut init = lmad_core::params::Init { rng: &mut init_rng };
    nn::init_attention(&mut ps, &mut init, "x", 6, 4, 8, 6, 0.5, false);
    let row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::<f64>::inference();
    let kv = g.constant(Tensor::from_rows(&vec![row; 5]).unwrap()).unwrap();
    let q = g.constant(Tensor::from_fn(&[3, 6], |_| rng.random_range(-3.0..3.0))).unwrap();
    let att = nn::cross_attention(&mut g, &ps, "x", q, kv, 2, None).unwrap();
    let out = g.value(att.out);
    for r in 1..3 {
        for c in 0..6 {
            assert!((out.at2(r, c) - out.at2(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn cosine_scores_of_parallel_and_orthogonal_rows() {
    let mut g = Graph::<f64>::inference();
    let h = g.constant(Tensor::from_rows(&[vec![2.0, 4.0, 0.0], vec![-2.0, 1.0, 5.0], vec![0.0; 3]]).unwrap()).unwrap();
    let t = g.constant(Tensor::from_rows(&[vec![0.5, 1.0, 0.0]]).unwrap()).unwrap();
    let s = head::cosine_scores(&mut g, h, t).unwrap();
    let v = g.value(s).data();
    assert!((v[0] - 1.0).abs() < 1e-6);
    assert!(v[1].abs() < 1e-6);
    assert!(v[2].is_finite() && v[2].abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cosine_scores_match_scalar_oracle(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..8), t in prop::collection::vec(-3.0f64..3.0, 4)) {
        let mut g = Graph::<f64>::inference();
        let h = g.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let tv = g.constant(Tensor::from_rows(&[t.clone()]).unwrap()).unwrap();
        let s = head::cosine_scores(&mut g, h, tv).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (r, &got) in rows.iter().zip(g.value(s).data()) {
            let dot: f64 = r.iter().zip(&t).map(|(a, b)| a * b).sum();
            let want = dot / ((norm(r) + 1e-8) * (norm(&t) + 1e-8));
            prop_assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_matches_scalar_oracle(logits in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20), bits in prop::collection::vec(0u8..2, 20)) {
        let n = logits.len();
        let mask = &bits[..n];
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::from_rows(&logits.iter().map(|&(a, b)| vec![a, b]).collect::<Vec<_>>()).unwrap()).unwrap();
        let loss = head::loss(&mut g, l, mask).unwrap();
        let want: f64 = logits
            .iter()
            .zip(mask)
            .map(|(&(a, b), &y)| {
                let z = if y == 1 { b } else { a };
                (a.exp() + b.exp()).ln() - z
            })
            .sum::<f64>()
            / n as f64;
        let got = g.value(loss).item().unwrap();
        prop_assert!((got - want).abs() < 1e-6);
        prop_assert!(got > 0.0);
    }

    #[test]
    fn predictions_are_shift_invariant(logits in prop::collection::vec((-30.0f64..30.0, -30.0f64..30.0), 1..20), shift in -50.0f64..50.0) {
        let rows = |s: f64| Tensor::from_rows(&logits.iter().map(|&(a, b)| vec![a + s, b + s]).collect::<Vec<_>>()).unwrap();
        let p = AffordancePrediction::from_logits(&rows(0.0)).unwrap();
        let q = AffordancePrediction::from_logits(&rows(shift)).unwrap();
        prop_assert_eq!(&p.labels, &q.labels);
        for (&(a, b), (&pr, &l)) in logits.iter().zip(p.probs.iter().zip(&p.labels)) {
            prop_assert!((0.0..=1.0).contains(&pr));
            prop_assert_eq!(l, b > a);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..10), 1..6), shift in -100.0f64..100.0) {
        let w = rows.iter().map(Vec::len).min().unwrap();
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r[..w].to_vec()).collect();
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let shifted = g.constant(Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect::<Vec<_>>()).unwrap()).unwrap();
        let s = g.softmax(x, 1).unwrap();
        let t = g.softmax(shifted, 1).unwrap();
        for r in 0..rows.len() {
            let row = g.value(s).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!(g.value(s).max_abs_diff(g.value(t)) < 1e-9);
    }

    #[test]
    fn attention_weights_sum_to_one(seed in any::<u64>(), a in 1usize..6, b in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::inference();
        let mut m = |r: usize| Tensor::from_fn(&[r, 8], |_| rng.random_range(-4.0..4.0));
        let (q, k, v) = (m(a), m(b), m(b));
        let (q, k, v) = (g.constant(q).unwrap(), g.constant(k).unwrap(), g.constant(v).unwrap());
        let att = nn::attention(&mut g, q, k, v, 2, None).unwrap();
        for w in att.weights {
            for r in 0..a {
                prop_assert!((g.value(w).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn confident_correct_logits_cost_almost_nothing() {
    let mut g = Graph::<f64>::new();
    let l = g.input(Tensor::from_rows(&[vec![20.0, -20.0], vec![-20.0, 20.0]]).unwrap()).unwrap();
    let loss = head::loss(&mut g, l, &[0, 1]).unwrap();
    assert!(g.value(loss).item().unwrap() < 1e-3);
}
