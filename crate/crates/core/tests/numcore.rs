mod common;

use fsdm::numcore::{
    adam_step, attention, copy_combine, dropout, gru_cell, init_uniform, AdamConfig, AttnParams, GruParams, NumError,
    OptimizerState, ParamStore, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar_gru(store: &mut ParamStore<f64>, vals: [f64; 9]) -> GruParams {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gru = GruParams::register(store, "g", 1, 1, &mut rng).unwrap();
    let ids = [gru.w_z, gru.w_r, gru.w_n, gru.u_z, gru.u_r, gru.u_n, gru.b_z, gru.b_r, gru.b_n];
    for (id, v) in ids.into_iter().zip(vals) {
        store.get_mut(id).data_mut()[0] = v;
    }
    gru
}

fn zero_params(store: &mut ParamStore<f64>) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
}

#[test]
fn gru_with_zero_weights_halves_previous_state() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gru = GruParams::register(&mut store, "g", 3, 2, &mut rng).unwrap();
    zero_params(&mut store);
    let mut tape = Tape::new(&store);
    let x = tape.vector(vec![0.3, -2.0, 7.0]);
    let h = tape.vector(vec![1.0, 1.0]);
    let out = gru_cell(&mut tape, x, h, &gru).unwrap();
    assert_eq!(tape.value(out), &[0.5, 0.5]);
}

#[test]
fn gru_with_zero_candidate_keeps_zero_state() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gru = GruParams::register(&mut store, "g", 2, 3, &mut rng).unwrap();
    for id in [gru.w_n, gru.u_n, gru.b_n] {
        store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut tape = Tape::new(&store);
    let x = tape.vector(vec![0.9, -0.4]);
    let h = tape.zeros(3);
    let out = gru_cell(&mut tape, x, h, &gru).unwrap();
    assert_eq!(tape.value(out), &[0.0, 0.0, 0.0]);
}

#[test]
fn gru_scalar_matches_hand_evaluation() {
    // w_z, w_r, w_n, u_z, u_r, u_n, b_z, b_r, b_n
    let mut store = ParamStore::new();
    let gru = scalar_gru(&mut store, [0.5, 0.2, 0.7, -0.3, 0.4, -0.6, 0.1, -0.1, 0.05]);
    let mut tape = Tape::new(&store);
    let x = tape.vector(vec![1.0]);
    let h = tape.vector(vec![0.5]);
    let out = gru_cell(&mut tape, x, h, &gru).unwrap();
    // z = σ(0.45), r = σ(0.3), n = tanh(0.75 − 0.3 r), h' = (1 − z) n + 0.5 z
    assert!((tape.scalar(out) - 0.508164065151587).abs() < 1e-14);
}

#[test]
fn gru_rejects_mismatched_dims() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gru = GruParams::register(&mut store, "g", 2, 2, &mut rng).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.vector(vec![1.0, 2.0, 3.0]);
    let h = tape.zeros(2);
    assert!(matches!(gru_cell(&mut tape, x, h, &gru), Err(NumError::Shape { .. })));
}

fn scalar_attention(store: &mut ParamStore<f64>) -> AttnParams {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = AttnParams::register(store, "a", 1, 1, 1, &mut rng).unwrap();
    for id in [p.query_proj, p.key_proj, p.score_vector] {
        store.get_mut(id).data_mut()[0] = 1.0;
    }
    p
}

#[test]
fn attention_over_single_key_returns_it() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = AttnParams::register(&mut store, "a", 3, 2, 4, &mut rng).unwrap();
    let mut tape = Tape::new(&store);
    let k = tape.vector(vec![0.25, -1.5]);
    let keys = p.project_keys(&mut tape, &[k]).unwrap();
    let q = tape.vector(vec![1.0, 2.0, 3.0]);
    let (ctx, w) = attention(&mut tape, q, &keys, &p).unwrap();
    assert_eq!(tape.value(w), &[1.0]);
    assert_eq!(tape.value(ctx), &[0.25, -1.5]);
}

#[test]
fn attention_over_identical_keys_splits_evenly() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = AttnParams::register(&mut store, "a", 2, 2, 3, &mut rng).unwrap();
    let mut tape = Tape::new(&store);
    let k1 = tape.vector(vec![0.4, 0.6]);
    let k2 = tape.vector(vec![0.4, 0.6]);
    let keys = p.project_keys(&mut tape, &[k1, k2]).unwrap();
    let q = tape.vector(vec![-1.0, 0.5]);
    let (ctx, w) = attention(&mut tape, q, &keys, &p).unwrap();
    assert_eq!(tape.value(w), &[0.5, 0.5]);
    assert!(tape.value(ctx).iter().zip([0.4f64, 0.6]).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn attention_scalar_matches_hand_softmax() {
    let mut store = ParamStore::new();
    let p = scalar_attention(&mut store);
    let mut tape = Tape::new(&store);
    let k1 = tape.vector(vec![1.0]);
    let k2 = tape.vector(vec![-1.0]);
    let keys = p.project_keys(&mut tape, &[k1, k2]).unwrap();
    let q = tape.vector(vec![0.5]);
    let (ctx, w) = attention(&mut tape, q, &keys, &p).unwrap();
    // scores tanh(1.5), tanh(−0.5)
    assert!((tape.value(w)[0] - 0.7969379802553438).abs() < 1e-14);
    assert!((tape.value(w)[1] - 0.2030620197446562).abs() < 1e-14);
    assert!((tape.scalar(ctx) - 0.5938759605106876).abs() < 1e-14);
}

#[test]
fn attention_requires_keys() {
    let mut store = ParamStore::<f64>::new();
    let p = scalar_attention(&mut store);
    let mut tape = Tape::new(&store);
    assert!(matches!(p.project_keys(&mut tape, &[]), Err(NumError::EmptySource { .. })));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![2, 3], vec![1.0f64, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap()).unwrap();
    let mut tape = Tape::new(&store);
    let wv = tape.param(w);
    let loss = tape.sum(wv);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_self_dot_is_twice_input() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![3], vec![1.5f64, -2.0, 0.25]).unwrap()).unwrap();
    let mut tape = Tape::new(&store);
    let wv = tape.param(w);
    let loss = tape.dot(wv, wv).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[3.0, -4.0, 0.5]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap()).unwrap();
    let mut tape = Tape::new(&store);
    let wv = tape.param(w);
    let y = tape.tanh(wv);
    assert!(matches!(tape.backward(y), Err(NumError::NonScalarLoss(_))));
}

/// GRU step → attention over a small memory → joint generate/copy NLL.
fn composite_loss(
    tape: &mut Tape<'_, f64>,
    gru: &GruParams,
    attn: &AttnParams,
    gen_w: fsdm::numcore::ParamId,
    copy_w: fsdm::numcore::ParamId,
) -> Var {
    let mems: Vec<Var> = [[0.3, -0.2, 0.8], [-0.5, 0.1, 0.05], [0.9, 0.4, -0.7]]
        .iter()
        .map(|m| tape.vector(m.to_vec()))
        .collect();
    let keys = attn.project_keys(tape, &mems).unwrap();
    let h0 = tape.vector(vec![0.1, -0.3, 0.2]);
    let (ctx, _) = attention(tape, h0, &keys, attn).unwrap();
    let x = tape.vector(vec![0.7, -0.1]);
    let input = tape.concat(&[ctx, x]).unwrap();
    let h1 = gru_cell(tape, input, h0, gru).unwrap();
    let h2 = gru_cell(tape, input, h1, gru).unwrap();
    let gw = tape.param(gen_w);
    let gen = tape.linear(gw, h2, None).unwrap();
    let cw = tape.param(copy_w);
    let proj = tape.matmul_nt(keys.rows, cw).unwrap();
    let proj = tape.tanh(proj);
    let copy = tape.linear(proj, h2, None).unwrap();
    // target token 1 is generable and also sits at copy positions 0 and 2
    tape.copy_nll(gen, Some(copy), None, None, Some(1), vec![0, 2]).unwrap()
}

#[test]
fn composite_graph_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let gru = GruParams::register(&mut store, "gru", 5, 3, &mut rng).unwrap();
    let attn = AttnParams::register(&mut store, "attn", 3, 3, 4, &mut rng).unwrap();
    let gen_w = store.add("gen", init_uniform(vec![4, 3], 0.5, &mut rng)).unwrap();
    let copy_w = store.add("copy", init_uniform(vec![3, 3], 0.5, &mut rng)).unwrap();
    // give biases non-zero values so their gradients are exercised away from 0
    for id in [gru.b_z, gru.b_r, gru.b_n] {
        store.get_mut(id).data_mut().iter_mut().for_each(|b| *b = 0.1);
    }
    let report = common::check_all_params(&store, |t| composite_loss(t, &gru, &attn, gen_w, copy_w));
    assert!(report.max_rel_err < 1e-4, "max rel err {} at {}", report.max_rel_err, report.worst);
    assert_eq!(report.checked, store.num_scalars());
}

#[test]
fn bce_and_mean_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", init_uniform(vec![4], 1.0, &mut rng)).unwrap();
    let m = store.add("m", init_uniform(vec![4, 4], 1.0, &mut rng)).unwrap();
    let report = common::check_all_params(&store, |t| {
        let (wv, mv) = (t.param(w), t.param(m));
        let x = t.vector(vec![0.5, -1.0, 2.0, 0.1]);
        let h = t.linear(mv, x, None).unwrap();
        let h = t.tanh(h);
        let s = t.softmax(h);
        let logit = t.dot(wv, s).unwrap();
        let a = t.bce_with_logit(logit, 1.0).unwrap();
        let b = t.bce_with_logit(logit, 0.0).unwrap();
        let y = t.sigmoid(logit);
        let c = t.affine(&[(a, 1.5), (b, 0.25), (y, -2.0)]).unwrap();
        t.mean(&[c, a]).unwrap()
    });
    assert!(report.max_rel_err < 1e-4, "max rel err {} at {}", report.max_rel_err, report.worst);
}

#[test]
fn unreachable_target_is_clamped_and_flagged() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let gen = tape.vector(vec![0.0, 0.0]);
    let loss = tape.copy_nll(gen, None, None, None, None, vec![]).unwrap();
    assert!((tape.scalar(loss) - (1e10f64).ln()).abs() < 1e-9);
    assert_eq!(tape.unreachable_targets(), 1);
}

#[test]
fn nan_scores_give_a_nan_loss() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let gen = tape.vector(vec![f64::NAN, f64::NAN]);
    let copy = tape.vector(vec![f64::NAN]);
    let loss = tape.copy_nll(gen, Some(copy), None, None, Some(0), vec![]).unwrap();
    assert!(tape.scalar(loss).is_nan());
}

#[test]
fn copy_nll_agrees_with_copy_combine() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let gen_scores = vec![0.2, -1.0, 0.7];
    let copy_scores = vec![1.1, -0.3, 0.4];
    let alignment = [1, 4, 1];
    let gen = tape.vector(gen_scores.clone());
    let copy = tape.vector(copy_scores.clone());
    let p = copy_combine(&gen_scores, &copy_scores, &alignment).unwrap();
    let nll_vocab = tape.copy_nll(gen, Some(copy), None, None, Some(1), vec![0, 2]).unwrap();
    let nll_oov = tape.copy_nll(gen, Some(copy), None, None, None, vec![1]).unwrap();
    assert!((tape.scalar(nll_vocab) + p[1].ln()).abs() < 1e-12);
    assert!((tape.scalar(nll_oov) + p[4].ln()).abs() < 1e-12);
}

#[test]
fn adam_first_step_moves_by_learning_rate_against_gradient_sign() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![3], vec![0.0f64, 0.0, 0.0]).unwrap()).unwrap();
    let config = AdamConfig { learning_rate: 0.01, epsilon: 1e-12, ..AdamConfig::default() };
    let mut state = OptimizerState::new(config, &store).unwrap();
    let mut tape = Tape::new(&store);
    let wv = tape.param(w);
    let c = tape.vector(vec![3.0, -0.001, 250.0]);
    let loss = tape.dot(wv, c).unwrap();
    let grads = tape.backward(loss).unwrap();
    adam_step(&mut store, &grads, &mut state).unwrap();
    let got = store.get(w).data();
    for (g, expected) in got.iter().zip([-0.01, 0.01, -0.01]) {
        assert!((g - expected).abs() < 1e-8, "{got:?}");
    }
    assert_eq!(state.step_count, 1);
}

#[test]
fn adam_zero_gradient_keeps_params_and_decays_moments() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![2], vec![1.0f64, -1.0]).unwrap()).unwrap();
    let mut state = OptimizerState::new(AdamConfig::default(), &store).unwrap();
    state.first_moment[0] = vec![0.5, 0.5];
    state.second_moment[0] = vec![0.25, 0.25];
    let mut zero = fsdm::numcore::Gradients::new(1);
    {
        let mut tape = Tape::new(&store);
        let wv = tape.param(w);
        let s = tape.sum(wv);
        let l = tape.scale(s, 0.0);
        zero = tape.backward(l).unwrap_or(zero);
    }
    let before = store.get(w).data().to_vec();
    let mut fresh = OptimizerState::new(AdamConfig::default(), &store).unwrap();
    adam_step(&mut store, &zero, &mut fresh).unwrap();
    assert_eq!(store.get(w).data(), before.as_slice());
    adam_step(&mut store.clone(), &zero, &mut state).unwrap();
    assert!((state.first_moment[0][0] - 0.45).abs() < 1e-15);
    assert!((state.second_moment[0][0] - 0.24975).abs() < 1e-15);
}

#[test]
fn adam_two_steps_follow_hand_recurrence() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![1], vec![1.0f64]).unwrap()).unwrap();
    let config = AdamConfig { learning_rate: 0.1, ..AdamConfig::default() };
    let mut state = OptimizerState::new(config, &store).unwrap();
    let expected = [0.9000000009999999, 0.8000000020000005];
    for want in expected {
        let grads = {
            let mut tape = Tape::new(&store);
            let wv = tape.param(w);
            let loss = tape.sum(wv);
            tape.backward(loss).unwrap()
        };
        adam_step(&mut store, &grads, &mut state).unwrap();
        assert!((store.get(w).data()[0] - want).abs() < 1e-15);
    }
    assert!(state.second_moment[0][0] >= 0.0);
}

#[test]
fn adam_aborts_on_nan_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("emb", Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap()).unwrap();
    let mut state = OptimizerState::new(AdamConfig::default(), &store).unwrap();
    let grads = {
        let mut tape = Tape::new(&store);
        let wv = tape.param(w);
        let nan = tape.vector(vec![0.0, f64::NAN]);
        let l = tape.dot(wv, nan).unwrap();
        tape.backward(l).unwrap()
    };
    let err = adam_step(&mut store, &grads, &mut state).unwrap_err();
    assert!(matches!(err, NumError::NonFinite { ref param, index: 1, .. } if param == "emb"), "{err}");
    assert_eq!(store.get(w).data(), &[1.0, 2.0]);
    assert_eq!(state.step_count, 0);
}

#[test]
fn dropout_identity_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::new(vec![4], vec![1.0f32, -2.0, 3.0, 4.0]).unwrap();
    assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(dropout(&x, 0.7, false, &mut rng).unwrap(), x);
    assert!(matches!(dropout(&x, 1.0, true, &mut rng), Err(NumError::Config(_))));
}

#[test]
fn dropout_preserves_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::new(vec![100_000], vec![1.0f64; 100_000]).unwrap();
    let y = dropout(&x, 0.5, true, &mut rng).unwrap();
    let mean = y.data().iter().sum::<f64>() / y.len() as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f32>::new();
        let gru = GruParams::register(&mut store, "g", 4, 4, &mut rng).unwrap();
        (store, gru)
    };
    let run = |store: &ParamStore<f32>, gru: &GruParams| {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tape = Tape::new(store);
        let x = tape.vector(vec![0.1, 0.2, -0.3, 0.4]);
        let x = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let h0 = tape.zeros(4);
        let h = gru_cell(&mut tape, x, h0, gru).unwrap();
        let l = tape.sum(h);
        let g = tape.backward(l).unwrap();
        (tape.value(h).to_vec(), g)
    };
    let (s1, g1) = build();
    let (s2, g2) = build();
    let (v1, gr1) = run(&s1, &g1);
    let (v2, gr2) = run(&s2, &g2);
    assert_eq!(v1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v2.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(gr1, gr2);
}

proptest! {
    #[test]
    fn gru_output_is_convex_combination(seed in 0u64..1000, h in proptest::collection::vec(-1.0f64..1.0, 3), x in proptest::collection::vec(-2.0f64..2.0, 2)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gru = GruParams::register(&mut store, "g", 2, 3, &mut rng).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
        let mut tape = Tape::new(&store);
        let xv = tape.vector(x.clone());
        let hv = tape.vector(h.clone());
        let out = gru_cell(&mut tape, xv, hv, &gru).unwrap();
        // independent evaluation of the candidate state n
        let mat = |id, r: usize, c: usize, v: &[f64]| -> f64 { (0..c).map(|j| store.get(id).data()[r * c + j] * v[j]).sum() };
        for i in 0..3 {
            let r = 1.0 / (1.0 + (-(mat(gru.w_r, i, 2, &x) + mat(gru.u_r, i, 3, &h) + store.get(gru.b_r).data()[i])).exp());
            let n = (mat(gru.w_n, i, 2, &x) + store.get(gru.b_n).data()[i] + r * mat(gru.u_n, i, 3, &h)).tanh();
            let (lo, hi) = if n < h[i] { (n, h[i]) } else { (h[i], n) };
            let o = tape.value(out)[i];
            prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12, "{} not in [{}, {}]", o, lo, hi);
        }
    }

    #[test]
    fn attention_weights_form_distribution(seed in 0u64..1000, keys in proptest::collection::vec(-3.0f64..3.0, 1..8), q in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = AttnParams::register(&mut store, "a", 1, 1, 3, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let kv: Vec<Var> = keys.iter().map(|&k| tape.vector(vec![k])).collect();
        let ks = p.project_keys(&mut tape, &kv).unwrap();
        let qv = tape.vector(vec![q]);
        let (ctx, w) = attention(&mut tape, qv, &ks, &p).unwrap();
        let sum: f64 = tape.value(w).iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(tape.value(w).iter().all(|&x| x >= 0.0));
        let lo = keys.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = keys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let c = tape.scalar(ctx);
        prop_assert!(c >= lo - 1e-12 && c <= hi + 1e-12);
    }

    #[test]
    fn copy_combine_is_a_distribution(
        gen in proptest::collection::vec(-20.0f32..20.0, 1..30),
        copy in proptest::collection::vec((-20.0f32..20.0, 0usize..40), 0..20),
    ) {
        let (scores, align): (Vec<f32>, Vec<usize>) = copy.into_iter().unzip();
        let p = copy_combine(&gen, &scores, &align).unwrap();
        let sum: f32 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6, "sum {}", sum);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }
}
