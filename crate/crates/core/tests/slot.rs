use hesrn_core::graph::{synth_graph, GraphTensors, SynthSpec};
use hesrn_core::params::ParamStore;
use hesrn_core::slot::{
    align_slots, build_slots, encode_structure, fuse_slots, project_types, slot_retention, SlotConfig, SlotMixing,
    SlotParams,
};
use hesrn_core::tensor::gelu_scalar;
use hesrn_core::{grad_check, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let cols = w.shape()[1];
    (0..cols).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w.at(&[i, j])).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-node `x + α·((QKᵀ) ⊙ mask) V` with an explicit `C × C` mask.
fn slot_mix_oracle(x: &Tensor, w: [&Tensor; 3], mask: &[f64], alpha: f64) -> Vec<f64> {
    let (n, c, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = x.data().to_vec();
    for v in 0..n {
        let row = |s: usize| &x.data()[(v * c + s) * d..(v * c + s + 1) * d];
        let q: Vec<Vec<f64>> = (0..c).map(|s| vecmat(row(s), w[0])).collect();
        let k: Vec<Vec<f64>> = (0..c).map(|s| vecmat(row(s), w[1])).collect();
        let val: Vec<Vec<f64>> = (0..c).map(|s| vecmat(row(s), w[2])).collect();
        for s1 in 0..c {
            for s2 in 0..c {
                let score = dot(&q[s1], &k[s2]) * mask[s1 * c + s2];
                for j in 0..d {
                    out[(v * c + s1) * d + j] += alpha * score * val[s2][j];
                }
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn retain(x: &Tensor, w: [&Tensor; 3], gamma: f64, alpha: f64) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let [q, k, v] = w.map(|t| tape.leaf(t.clone()));
    let g = tape.leaf(Tensor::new(&[1], vec![gamma]).unwrap());
    let a = tape.leaf(Tensor::new(&[1], vec![alpha]).unwrap());
    let out = slot_retention(&mut tape, xv, q, k, v, g, a).unwrap();
    tape.value(out).clone()
}

#[test]
fn slot_retention_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[4, 3, 5], &mut rng);
    let w: Vec<Tensor> = (0..3).map(|_| random(&[5, 5], &mut rng)).collect();
    let mask = [1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.25, 0.5, 1.0];
    let got = retain(&x, [&w[0], &w[1], &w[2]], 0.5, 0.7);
    let want = slot_mix_oracle(&x, [&w[0], &w[1], &w[2]], &mask, 0.7);
    assert!(max_diff(got.data(), &want) < 1e-12);
}

#[test]
fn single_slot_retention_scales_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 1, 4], &mut rng);
    let w: Vec<Tensor> = (0..3).map(|_| random(&[4, 4], &mut rng)).collect();
    let got = retain(&x, [&w[0], &w[1], &w[2]], 0.3, 0.4);
    for v in 0..3 {
        let h = x.row(v);
        let (q, k, val) = (vecmat(h, &w[0]), vecmat(h, &w[1]), vecmat(h, &w[2]));
        let s = dot(&q, &k);
        let want: Vec<f64> = (0..4).map(|j| h[j] + 0.4 * s * val[j]).collect();
        assert!(max_diff(&got.data()[v * 4..(v + 1) * 4], &want) < 1e-14);
    }
}

#[test]
fn reversed_slot_order_sees_the_transposed_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 4], &mut rng);
    let w: Vec<Tensor> = (0..3).map(|_| random(&[4, 4], &mut rng)).collect();
    let mut rev = vec![0.0; x.numel()];
    for v in 0..2 {
        for s in 0..3 {
            let src = &x.data()[(v * 3 + s) * 4..(v * 3 + s + 1) * 4];
            rev[(v * 3 + 2 - s) * 4..(v * 3 + 3 - s) * 4].copy_from_slice(src);
        }
    }
    let rev = Tensor::new(&[2, 3, 4], rev).unwrap();
    // With γ = 1 the mask is the full lower triangle; reversing the slots is
    // the same as keeping them and using the upper triangle.
    let got = retain(&rev, [&w[0], &w[1], &w[2]], 1.0, 0.5);
    let upper = [1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
    let want = slot_mix_oracle(&x, [&w[0], &w[1], &w[2]], &upper, 0.5);
    for v in 0..2 {
        for s in 0..3 {
            let a = &got.data()[(v * 3 + 2 - s) * 4..(v * 3 + 3 - s) * 4];
            let b = &want[(v * 3 + s) * 4..(v * 3 + s + 1) * 4];
            assert!(max_diff(a, b) < 1e-12);
        }
    }
}

fn fuse(x: &Tensor, w_a: &Tensor, b_a: &Tensor, p: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let [xv, wv, bv, pv] = [x, w_a, b_a, p].map(|t| tape.leaf(t.clone()));
    let (f, w) = fuse_slots(&mut tape, xv, wv, bv, pv).unwrap();
    (tape.value(f).clone(), tape.value(w).clone())
}

#[test]
fn fusion_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, c, d, a) = (2, 3, 4, 3);
    let x = random(&[n, c, d], &mut rng);
    let w_a = random(&[d, a], &mut rng);
    let b_a = random(&[a], &mut rng);
    let p = random(&[a, 1], &mut rng);
    let (fused, weights) = fuse(&x, &w_a, &b_a, &p);
    for v in 0..n {
        let slot = |s: usize| &x.data()[(v * c + s) * d..(v * c + s + 1) * d];
        let scores: Vec<f64> = (0..c)
            .map(|s| {
                let z = vecmat(slot(s), &w_a);
                (0..a).map(|j| p.data()[j] * (z[j] + b_a.data()[j]).tanh()).sum()
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let beta: Vec<f64> = e.iter().map(|x| x / z).collect();
        assert!(max_diff(weights.row(v), &beta) < 1e-14);
        let want: Vec<f64> = (0..d).map(|j| (0..c).map(|s| beta[s] * slot(s)[j]).sum()).collect();
        assert!(max_diff(&fused.data()[v * d..(v + 1) * d], &want) < 1e-14);
    }
}

#[test]
fn single_slot_fusion_is_the_slot() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[3, 1, 4], &mut rng);
    let (fused, weights) = fuse(&x, &random(&[4, 2], &mut rng), &random(&[2], &mut rng), &random(&[2, 1], &mut rng));
    assert_eq!(weights.data(), &[1.0; 3]);
    assert_eq!(fused.data(), x.data());
}

#[test]
fn fusion_weights_stay_on_the_simplex_for_1000_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[1000, 4, 6], &mut rng);
    let w_a = random(&[6, 5], &mut rng);
    let b_a = random(&[5], &mut rng);
    let p = Tensor::new(&[5, 1], (0..5).map(|_| rng.random_range(-30.0..30.0)).collect()).unwrap();
    let (_, weights) = fuse(&x, &w_a, &b_a, &p);
    for v in 0..1000 {
        let row = weights.row(v);
        assert!(row.iter().all(|&b| b >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn projection_slots_and_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = random(&[3, 2], &mut rng);
    let x1 = random(&[2, 3], &mut rng);
    let w0 = random(&[2, 4], &mut rng);
    let w1 = random(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let [a, b, c, d] = [&x0, &x1, &w0, &w1].map(|t| tape.leaf(t.clone()));
    let proj = project_types(&mut tape, &[a, b], &[c, d]).unwrap();
    for r in 0..3 {
        assert!(max_diff(tape.value(proj[0]).row(r), &vecmat(x0.row(r), &w0)) < 1e-15);
    }
    assert!(project_types(&mut tape, &[a, b], &[d, c]).is_err());

    // node types [0, 1, 0, 1, 0]
    let rows = vec![
        vec![Some(0), None, Some(1), None, Some(2)],
        vec![None, Some(0), None, Some(1), None],
    ];
    let slots = build_slots(&mut tape, &proj, &rows).unwrap();
    let s = tape.value(slots).clone();
    assert_eq!(s.shape(), &[5, 2, 4]);
    for v in 0..5 {
        let nonzero = s.data()[v * 8..(v + 1) * 8].iter().filter(|&&x| x != 0.0).count();
        assert_eq!(nonzero, 4);
        let foreign = if v % 2 == 0 { 1 } else { 0 };
        assert!(s.data()[(v * 2 + foreign) * 4..(v * 2 + foreign + 1) * 4].iter().all(|&x| x == 0.0));
    }
    let bad_rows = vec![vec![Some(0), None], vec![Some(0), None]];
    assert!(build_slots(&mut tape, &proj, &bad_rows).is_err());

    let u: Vec<Var> = (0..2).map(|_| tape.leaf(random(&[4, 4], &mut rng))).collect();
    let bias: Vec<Var> = (0..2).map(|_| tape.leaf(random(&[4], &mut rng))).collect();
    let aligned = align_slots(&mut tape, slots, &u, &bias).unwrap();
    for v in 0..5 {
        for slot in 0..2 {
            let h = &s.data()[(v * 2 + slot) * 4..(v * 2 + slot + 1) * 4];
            let z: Vec<f64> = vecmat(h, tape.value(u[slot])).iter().zip(tape.value(bias[slot]).data()).map(|(a, b)| a + b).collect();
            let mean = z.iter().sum::<f64>() / 4.0;
            let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            let want: Vec<f64> = z.iter().map(|x| gelu_scalar((x - mean) / (var + 1e-5).sqrt())).collect();
            let got = &tape.value(aligned).data()[(v * 2 + slot) * 4..(v * 2 + slot + 1) * 4];
            assert!(max_diff(got, &want) < 1e-12);
        }
    }
}

#[test]
fn identity_alignment_of_a_constant_row_is_zero() {
    let mut tape = Tape::new();
    let slots = tape.leaf(Tensor::full(&[2, 1, 3], 0.5));
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    let u = tape.leaf(eye);
    let b = tape.leaf(Tensor::zeros(&[3]));
    let out = align_slots(&mut tape, slots, &[u], &[b]).unwrap();
    assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
}

fn pipeline(types: usize, hidden: usize, seed: u64) -> (SlotConfig, ParamStore, SlotParams, GraphTensors) {
    let spec = SynthSpec {
        nodes_per_type: vec![2; types],
        feature_dims: (0..types).map(|t| 2 + t).collect(),
        avg_degree: 1.5,
        ..SynthSpec::uniform(types, 2, seed)
    };
    let g = synth_graph(&spec).unwrap();
    let cfg = SlotConfig {
        hidden,
        feature_dims: spec.feature_dims.clone(),
        attn_dim: 3,
        layers: 2,
        use_slots: true,
        align: true,
        mixing: SlotMixing::Retention,
    };
    let mut store = ParamStore::new();
    let params = SlotParams::init(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    (cfg, store, params, GraphTensors::new(&g))
}

#[test]
fn full_slot_pipeline_passes_grad_check() {
    let (cfg, store, params, inputs) = pipeline(3, 4, 9);
    let report = grad_check(
        |tape, vars| {
            let out = encode_structure(tape, vars, &params, &cfg, &inputs)?;
            let y = tape.tanh(out.encoded)?;
            tape.sum(y)
        },
        store.tensors(),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{:e}", report.max_rel_error);
}

#[test]
fn single_type_pipeline_collapses() {
    let (cfg, store, params, inputs) = pipeline(1, 4, 10);
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let out = encode_structure(&mut tape, &vars, &params, &cfg, &inputs).unwrap();
    let trace = out.trace.unwrap();
    let w = tape.value(trace.weights).clone();
    assert!(w.data().iter().all(|&b| b == 1.0));
    assert_eq!(tape.value(trace.fused).data(), tape.value(trace.retained).data());

    let get = |name: &str| store.get(store.find(name).unwrap()).clone();
    let (wq, wk, wv) = (get("slot.wq"), get("slot.wk"), get("slot.wv"));
    let alpha = get("slot.alpha").data()[0];
    let aligned = tape.value(trace.aligned).clone();
    for v in 0..aligned.shape()[0] {
        let h = aligned.row(v);
        let s = dot(&vecmat(h, &wq), &vecmat(h, &wk));
        let val = vecmat(h, &wv);
        let want: Vec<f64> = (0..4).map(|j| h[j] + alpha * s * val[j]).collect();
        assert!(max_diff(&tape.value(trace.fused).data()[v * 4..(v + 1) * 4], &want) < 1e-14);
    }
}

proptest! {
    #[test]
    fn zero_alpha_is_the_identity(seed in any::<u64>(), c in 1usize..5, gamma in 0.01f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[3, c, 4], &mut rng);
        let w: Vec<Tensor> = (0..3).map(|_| random(&[4, 4], &mut rng)).collect();
        let out = retain(&x, [&w[0], &w[1], &w[2]], gamma, 0.0);
        prop_assert_eq!(out.data(), x.data());
    }

    #[test]
    fn identical_slots_fuse_to_the_common_vector(seed in any::<u64>(), c in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = random(&[4], &mut rng);
        let x = Tensor::new(&[1, c, 4], base.data().repeat(c)).unwrap();
        let (fused, weights) = fuse(&x, &random(&[4, 3], &mut rng), &random(&[3], &mut rng), &random(&[3, 1], &mut rng));
        for &b in weights.data() {
            prop_assert!((b - 1.0 / c as f64).abs() < 1e-15);
        }
        prop_assert!(max_diff(fused.data(), base.data()) < 1e-14);
    }
}
