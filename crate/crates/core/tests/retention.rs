use hesrn_core::params::ParamStore;
use hesrn_core::retention::{
    decay_mask, decay_masks, gamma_schedule, he_retention, hesrn_layer, retention_parallel, retention_recurrent,
    rotation_table, LayerParams, RetentionConfig, SequenceContext, SequenceMixing,
};
use hesrn_core::{HeSRN, ModelConfig, RotationTable, Tape, Tensor};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let cols = w.shape()[1];
    (0..cols).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w.at(&[i, j])).sum()).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Feature pairs as complex numbers, rotated by `pos·θ_j`; an odd trailing
/// feature is kept as a real part.
fn rotate_complex(x: &[f64], pos: usize, thetas: &[f64]) -> Vec<Complex64> {
    let mut out: Vec<Complex64> = thetas
        .iter()
        .enumerate()
        .map(|(j, &t)| Complex64::new(x[2 * j], x[2 * j + 1]) * Complex64::from_polar(1.0, pos as f64 * t))
        .collect();
    if x.len() % 2 == 1 {
        out.push(Complex64::new(x[x.len() - 1], 0.0));
    }
    out
}

fn complex_inner(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y.conj()).re).sum()
}

fn thetas(width: usize) -> Vec<f64> {
    (0..width / 2).map(|j| 10000f64.powf(-2.0 * j as f64 / width as f64)).collect()
}

fn parallel(h: &Tensor, w: [&Tensor; 3], gamma: f64) -> Tensor {
    let (l, d) = (h.shape()[0], h.shape()[1]);
    let dh = w[0].shape()[1];
    let mut tape = Tape::new();
    let x = tape.leaf(h.clone().reshape(&[1, l, d]).unwrap());
    let [q, k, v] = w.map(|t| tape.leaf(t.clone()));
    let mask = tape.constant(decay_masks(gamma, &[vec![true; l]]).unwrap());
    let out = retention_parallel(&mut tape, x, q, k, v, &rotation_table(l, dh), mask).unwrap();
    tape.value(out).clone().reshape(&[l, dh]).unwrap()
}

#[test]
fn single_token_retention_is_qk_times_v() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = random(&[1, 6], &mut rng);
    let w: Vec<Tensor> = (0..3).map(|_| random(&[6, 4], &mut rng)).collect();
    let out = parallel(&h, [&w[0], &w[1], &w[2]], 0.9);
    let (q, k, v) = (vecmat(h.data(), &w[0]), vecmat(h.data(), &w[1]), vecmat(h.data(), &w[2]));
    let s: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
    let want: Vec<f64> = v.iter().map(|x| s * x).collect();
    assert!(max_diff(out.data(), &want) < 1e-15);
    let rec = retention_recurrent(&h, &w[0], &w[1], &w[2], 0.9, &rotation_table(1, 4)).unwrap();
    assert!(max_diff(rec.data(), &want) < 1e-15);

    let zero = Tensor::zeros(&[6, 4]);
    let h = random(&[5, 6], &mut rng);
    assert!(parallel(&h, [&w[0], &w[1], &zero], 0.9).data().iter().all(|&x| x == 0.0));
}

#[test]
fn parallel_equals_recurrent_up_to_128_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &l in &[1, 2, 16, 64, 128] {
        for &dh in &[2, 8, 32] {
            let h = random(&[l, 16], &mut rng);
            let w: Vec<Tensor> = (0..3).map(|_| random(&[16, dh], &mut rng)).collect();
            for gamma in gamma_schedule(3) {
                let a = parallel(&h, [&w[0], &w[1], &w[2]], gamma);
                let b = retention_recurrent(&h, &w[0], &w[1], &w[2], gamma, &rotation_table(l, dh)).unwrap();
                assert!(a.max_abs_diff(&b) < 1e-8, "L={l} dh={dh}: {}", a.max_abs_diff(&b));
            }
        }
    }
}

#[test]
fn decay_contribution_falls_geometrically() {
    // One-dimensional unit q, k, v with no rotation: out_n = Σ_m γ^(n−m).
    let h = Tensor::full(&[6, 2], 1.0);
    let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
    let table = RotationTable::new(6, &[0.0]);
    let out = retention_recurrent(&h, &w, &w, &w, 0.7, &table).unwrap();
    let mut expected = 0.0;
    for n in 0..6 {
        expected = expected * 0.7 + 1.0;
        assert!((out.at(&[n, 0]) - expected).abs() < 1e-14);
    }
}

#[test]
fn xpos_pairwise_products_match_complex_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (l, theta, gamma) = (4, 0.5, 0.9);
    let table = Arc::new(RotationTable::new(l, &[theta]));
    let q = random(&[1, l, 2], &mut rng);
    let k = random(&[1, l, 2], &mut rng);
    let mut tape = Tape::new();
    let (qv, kv) = (tape.leaf(q.clone()), tape.leaf(k.clone()));
    let (qr, kr) = (tape.rotate(qv, &table).unwrap(), tape.rotate(kv, &table).unwrap());
    let scores = tape.bmm(qr, kr, true).unwrap();
    let mask = decay_mask(gamma, &[true; 4]).unwrap();
    for n in 0..l {
        for m in 0..l {
            let zq = Complex64::new(q.data()[2 * n], q.data()[2 * n + 1]);
            let zk = Complex64::new(k.data()[2 * m], k.data()[2 * m + 1]);
            let rel = Complex64::from_polar(1.0, (n as f64 - m as f64) * theta);
            let want = (zq * zk.conj() * rel).re;
            let got = tape.value(scores).at(&[0, n, m]);
            assert!((got - want).abs() < 1e-10);
            if n >= m {
                let decayed = got * mask.at(&[n, m]);
                assert!((decayed - want * gamma.powi((n - m) as i32)).abs() < 1e-10);
            } else {
                assert_eq!(mask.at(&[n, m]), 0.0);
            }
        }
    }
}

fn he_setup(c: usize, type_xpos: bool, beta_t: f64) -> RetentionConfig {
    RetentionConfig {
        hidden: 8,
        heads: 2,
        ffn_dim: 4,
        num_types: c,
        beta_t,
        type_xpos,
        mixing: SequenceMixing::Retention,
    }
}

/// `((QKᵀ + β Q_T K_Tᵀ) ⊙ D) V` for one sequence, built from complex
/// rotations and explicit loops.
fn he_oracle(x: &Tensor, t: &Tensor, w: &[Tensor], beta: f64, gamma: f64, type_xpos: bool) -> Vec<f64> {
    let (l, dh, c) = (x.shape()[0], w[0].shape()[1], t.shape()[1]);
    let th = thetas(dh);
    let th_t = thetas(c);
    let rq: Vec<_> = (0..l).map(|n| rotate_complex(&vecmat(x.row(n), &w[0]), n, &th)).collect();
    let rk: Vec<_> = (0..l).map(|n| rotate_complex(&vecmat(x.row(n), &w[1]), n, &th)).collect();
    let tq: Vec<_> = (0..l).map(|n| vecmat(t.row(n), &w[3])).collect();
    let tk: Vec<_> = (0..l).map(|n| vecmat(t.row(n), &w[4])).collect();
    let mut out = vec![0.0; l * dh];
    for n in 0..l {
        for m in 0..=n {
            let type_score = if type_xpos {
                complex_inner(&rotate_complex(&tq[n], n, &th_t), &rotate_complex(&tk[m], m, &th_t))
            } else {
                tq[n].iter().zip(&tk[m]).map(|(a, b)| a * b).sum()
            };
            let s = (complex_inner(&rq[n], &rk[m]) + beta * type_score) * gamma.powi((n - m) as i32);
            let v = vecmat(x.row(m), &w[2]);
            for j in 0..dh {
                out[n * dh + j] += s * v[j];
            }
        }
    }
    out
}

fn run_he(cfg: &RetentionConfig, x: &Tensor, t: &Tensor, w: &[Tensor], head: usize) -> Vec<f64> {
    let (l, d, c) = (x.shape()[0], x.shape()[1], t.shape()[1]);
    let ctx = SequenceContext::new(cfg, &[vec![true; l]]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().reshape(&[1, l, d]).unwrap());
    let tv = tape.leaf(t.clone().reshape(&[1, l, c]).unwrap());
    let wv: Vec<_> = w.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = he_retention(&mut tape, cfg, &ctx, head, xv, tv, [wv[0], wv[1], wv[2], wv[3], wv[4]]).unwrap();
    tape.value(out).data().to_vec()
}

fn type_inputs(c: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Vec<Tensor>) {
    let x = random(&[8, 8], rng);
    let t = random(&[8, c], rng);
    let w = vec![
        random(&[8, 4], rng),
        random(&[8, 4], rng),
        random(&[8, 4], rng),
        random(&[c, c], rng),
        random(&[c, c], rng),
    ];
    (x, t, w)
}

#[test]
fn he_retention_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (c, type_xpos) in [(3, true), (3, false), (4, true)] {
        let (x, t, w) = type_inputs(c, &mut rng);
        let cfg = he_setup(c, type_xpos, 0.2);
        for (head, gamma) in gamma_schedule(2).into_iter().enumerate() {
            let got = run_he(&cfg, &x, &t, &w, head);
            let want = he_oracle(&x, &t, &w, 0.2, gamma, type_xpos);
            assert!(max_diff(&got, &want) < 1e-12, "C={c} xpos={type_xpos}");
        }
    }
}

#[test]
fn zero_beta_is_plain_retention_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, t, w) = type_inputs(3, &mut rng);
    let got = run_he(&he_setup(3, true, 0.0), &x, &t, &w, 1);
    let plain = parallel(&x, [&w[0], &w[1], &w[2]], gamma_schedule(2)[1]);
    assert_eq!(got, plain.data());
}

#[test]
fn same_type_tokens_add_a_constant_type_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (x, _, mut w) = type_inputs(3, &mut rng);
    let mut t = Tensor::zeros(&[8, 3]);
    for n in 0..8 {
        t.data_mut()[n * 3 + 1] = 1.0;
    }
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    w[3] = eye.clone();
    w[4] = eye;
    let beta = 0.5;
    let gamma = gamma_schedule(2)[0];
    let got = run_he(&he_setup(3, false, beta), &x, &t, &w, 0);
    let mut want = vec![0.0; 8 * 4];
    for n in 0..8 {
        let q = vecmat(x.row(n), &w[0]);
        for m in 0..=n {
            let k = vecmat(x.row(m), &w[1]);
            let qk: f64 = rotate_complex(&q, n, &thetas(4))
                .iter()
                .zip(rotate_complex(&k, m, &thetas(4)))
                .map(|(a, b)| (a * b.conj()).re)
                .sum();
            let s = (qk + beta * 1.0) * gamma.powi((n - m) as i32);
            let v = vecmat(x.row(m), &w[2]);
            for j in 0..4 {
                want[n * 4 + j] += s * v[j];
            }
        }
    }
    assert!(max_diff(&got, &want) < 1e-12);
}

#[test]
fn gamma_schedule_by_direct_evaluation() {
    let g = gamma_schedule(4);
    let (a, b) = ((1.0f64 / 32.0).ln(), (1.0f64 / 512.0).ln());
    for (i, &gi) in g.iter().enumerate() {
        let want = 1.0 - (a + (b - a) * i as f64 / 3.0).exp();
        assert!((gi - want).abs() < 1e-15);
        assert!(gi > 0.0 && gi < 1.0);
    }
}

#[test]
fn zero_output_projections_make_the_layer_an_identity() {
    let cfg = he_setup(3, true, 0.5);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = LayerParams::init(&mut store, &cfg, 0, &mut rng);
    *store.get_mut(p.w_o) = Tensor::zeros(&[8, 8]);
    *store.get_mut(p.w2) = Tensor::zeros(&[4, 8]);
    let x = random(&[2, 5, 8], &mut rng);
    let t = random(&[2, 5, 3], &mut rng);
    let ctx = SequenceContext::new(&cfg, &[vec![true; 5], vec![true, true, true, false, false]]).unwrap();
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let (xv, tv) = (tape.leaf(x.clone()), tape.leaf(t));
    let out = hesrn_layer(&mut tape, &vars, &p, &cfg, &ctx, xv, tv).unwrap();
    assert_eq!(tape.value(out).data(), x.data());
}

fn causal_model(beta_t: f64) -> HeSRN {
    let cfg = ModelConfig {
        hidden: 8,
        heads: 2,
        ffn_dim: 6,
        seq_len: 10,
        beta_t,
        retentive_layers: 2,
        ..ModelConfig::default()
    };
    HeSRN::new(cfg, vec![3, 3], 2).unwrap()
}

fn states(model: &HeSRN, h: &Tensor, types: &Tensor, seqs: &[Vec<Option<usize>>]) -> Tensor {
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let (hv, tv) = (tape.constant(h.clone()), tape.constant(types.clone()));
    let out = model.sequence_states(&mut tape, &vars, hv, tv, seqs).unwrap();
    tape.value(out).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parallel_and_recurrent_agree(seed in any::<u64>(), l in 1usize..48, half in 1usize..9, gamma in 0.3f64..0.999) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dh = 2 * half;
        let h = random(&[l, 12], &mut rng);
        let w: Vec<Tensor> = (0..3).map(|_| random(&[12, dh], &mut rng)).collect();
        let a = parallel(&h, [&w[0], &w[1], &w[2]], gamma);
        let b = retention_recurrent(&h, &w[0], &w[1], &w[2], gamma, &rotation_table(l, dh)).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-8);
    }

    #[test]
    fn same_position_rotation_preserves_inner_products(seed in any::<u64>(), n in 0usize..200, half in 1usize..17) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = 2 * half;
        let table = rotation_table(n + 1, w);
        let q = random(&[1, n + 1, w], &mut rng);
        let k = random(&[1, n + 1, w], &mut rng);
        let mut tape = Tape::new();
        let (qv, kv) = (tape.leaf(q.clone()), tape.leaf(k.clone()));
        let (qr, kr) = (tape.rotate(qv, &table).unwrap(), tape.rotate(kv, &table).unwrap());
        let row = |t: &Tensor| t.data()[n * w..(n + 1) * w].to_vec();
        let before: f64 = row(&q).iter().zip(row(&k)).map(|(a, b)| a * b).sum();
        let after: f64 = row(tape.value(qr)).iter().zip(row(tape.value(kr))).map(|(a, b)| a * b).sum();
        prop_assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn decay_masks_compose(gamma in 0.01f64..0.99, l in 1usize..12) {
        let d = decay_mask(gamma, &vec![true; l]).unwrap();
        for n in 0..l {
            prop_assert_eq!(d.at(&[n, n]), 1.0);
            for m in 0..=n {
                for p in 0..=m {
                    prop_assert!((d.at(&[n, m]) * d.at(&[m, p]) - d.at(&[n, p])).abs() < 1e-14);
                }
            }
            for m in n + 1..l {
                prop_assert_eq!(d.at(&[n, m]), 0.0);
            }
        }
    }

    #[test]
    fn future_tokens_never_reach_the_past(seed in any::<u64>(), cut in 0usize..9, beta in prop_oneof![Just(0.0), Just(0.5)]) {
        let model = causal_model(beta);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random(&[20, 8], &mut rng);
        let types = random(&[20, 2], &mut rng);
        let seqs = vec![(0..10).map(Some).collect::<Vec<_>>(), (10..20).map(Some).collect()];
        let base = states(&model, &h, &types, &seqs);

        let mut h2 = h.clone();
        let mut t2 = types.clone();
        for b in 0..2 {
            for pos in cut + 1..10 {
                let node = b * 10 + pos;
                for j in 0..8 {
                    h2.data_mut()[node * 8 + j] = rng.random_range(-5.0..5.0);
                }
                t2.data_mut()[node * 2] = rng.random_range(-5.0..5.0);
            }
        }
        let moved = states(&model, &h2, &t2, &seqs);
        for b in 0..2 {
            for pos in 0..=cut {
                let off = (b * 10 + pos) * 8;
                prop_assert!(max_diff(&base.data()[off..off + 8], &moved.data()[off..off + 8]) < 1e-14);
            }
        }
    }
}
