//! `hesrn check`: property suites with one PASS/FAIL line per property.
//!
//! Suites:
//! - `grad`: analytic against central-difference gradients of a 2-layer
//!   model on a 30-node graph, one line per parameter tensor.
//! - `equivalence`: parallel against recurrent retention for
//!   `L ∈ {1,2,16,64,128}`, `d_h ∈ {2,8,32}`, 5 seeds each.
//! - `invariants`: ablation identities, simplex constraints, causality,
//!   xPos identities and the F1 enumeration oracle.
//! - `learnability`: the synthetic majority-neighbor-type task, full model
//!   against every single ablation over 5 seeds.

use std::sync::Arc;
use std::time::Instant;

use hesrn_core::graph::{synth_graph, SynthSpec};
use hesrn_core::metrics::f1_scores;
use hesrn_core::retention::{decay_mask, decay_masks, gamma_schedule, retention_parallel, retention_recurrent, rotation_table};
use hesrn_core::slot::{fuse_slots, slot_retention};
use hesrn_core::train::{batch_labels, loss, Prepared};
use hesrn_core::{grad_check, Ablations, HeSRN, ModelConfig, RotationTable, Tape, Tensor};
use num_complex::Complex64;
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::report::Report;
use crate::Result;

type CoreResult<T> = hesrn_core::Result<T>;

pub const EQUIV_LENGTHS: [usize; 5] = [1, 2, 16, 64, 128];
pub const EQUIV_HEAD_DIMS: [usize; 3] = [2, 8, 32];
pub const EQUIV_SEEDS: usize = 5;
pub const CAUSALITY_TRIALS: usize = 20;
pub const CAUSALITY_TOL: f64 = 1e-14;
pub const SIMPLEX_NODES: usize = 1000;
pub const SIMPLEX_TOL: f64 = 1e-12;
pub const XPOS_SAME_TOL: f64 = 1e-12;
pub const XPOS_CROSS_TOL: f64 = 1e-10;
pub const LEARN_SEEDS: u64 = 5;
pub const LEARN_TARGET: f64 = 0.95;

pub fn run(cfg: &RunConfig) -> Result<Report> {
    let mut report = Report::new("check", cfg.format);
    let start = Instant::now();
    for suite in &cfg.suite {
        let t = Instant::now();
        let outcome = match suite.as_str() {
            "grad" => grad(cfg, &mut report),
            "equivalence" => {
                equivalence(cfg, &mut report);
                Ok(())
            }
            "invariants" => {
                invariants(cfg, &mut report);
                Ok(())
            }
            "learnability" => learnability(&mut report),
            other => unreachable!("suite {other} passed config validation"),
        };
        if let Err(e) = outcome {
            report.check(suite, false, format!("error: {e}"));
        }
        report.line(format!("{suite}_seconds"), t.elapsed().as_secs_f64());
    }
    let checks = report.lines().iter().filter(|(k, _)| k.starts_with("check.")).count();
    let failed = report.failures().len();
    report.summary("checks_run", checks);
    report.summary("checks_failed", failed);
    report.summary("failed", if failed == 0 { "-".into() } else { report.failures().join(",") });
    report.summary("total_seconds", start.elapsed().as_secs_f64());
    report.summary("status", if failed == 0 { "ok" } else { "failed" });
    Ok(report)
}

fn record(report: &mut Report, name: &str, outcome: CoreResult<(bool, String)>) {
    match outcome {
        Ok((pass, detail)) => report.check(name, pass, detail),
        Err(e) => report.check(name, false, format!("error: {e}")),
    }
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches data")
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- grad

/// The model and graph used by the gradient suite: 30 nodes of 3 types,
/// hidden 8, 2 heads, length-6 sequences, 2 encoder and 2 retentive layers.
pub fn grad_fixture(seed: u64) -> CoreResult<(HeSRN, hesrn_core::HeteroGraph)> {
    let spec = SynthSpec {
        nodes_per_type: vec![10, 10, 10],
        feature_dims: vec![4, 3, 5],
        avg_degree: 3.0,
        ..SynthSpec::uniform(3, 10, seed)
    };
    let g = synth_graph(&spec)?;
    let cfg = ModelConfig {
        hidden: 8,
        heads: 2,
        seq_len: 6,
        ffn_dim: 16,
        encoder_layers: 2,
        retentive_layers: 2,
        beta_t: 0.5,
        seed,
        ..ModelConfig::default()
    };
    let model = HeSRN::new(cfg, spec.feature_dims.clone(), g.num_classes())?;
    Ok((model, g))
}

fn grad(cfg: &RunConfig, report: &mut Report) -> CoreResult<()> {
    let (model, g) = grad_fixture(cfg.model.seed)?;
    let prep = Prepared::new(&model, &g)?;
    let ids = g.target_nodes();
    let seqs = prep.sequences(&ids)?;
    let labels = batch_labels(&g, &ids, model.config().loss_mode)?;
    let result = grad_check(
        |tape, vars| {
            let logits = model.forward(tape, vars, &prep.inputs, &prep.types, &seqs)?;
            loss(tape, logits, &labels, 1e-4)
        },
        model.params().tensors(),
        cfg.grad_eps,
    )?;
    report.line("grad.nodes", g.num_nodes());
    report.line("grad.param_tensors", result.per_param.len());
    report.line("grad.max_rel_error", result.max_rel_error);
    for (name, &err) in model.params().names().iter().zip(&result.per_param) {
        report.check(
            &format!("grad.{name}"),
            err < cfg.grad_tol,
            format!("rel_error={err:e} tol={:e}", cfg.grad_tol),
        );
    }
    Ok(())
}

// --------------------------------------------------------- equivalence

fn parallel_form(h: &Tensor, w: &[Tensor], gamma: f64) -> CoreResult<Tensor> {
    let (l, d) = (h.shape()[0], h.shape()[1]);
    let dh = w[0].shape()[1];
    let mut tape = Tape::new();
    let x = tape.constant(h.clone().reshape(&[1, l, d])?);
    let q = tape.constant(w[0].clone());
    let k = tape.constant(w[1].clone());
    let v = tape.constant(w[2].clone());
    let mask = tape.constant(decay_masks(gamma, &[vec![true; l]])?);
    let out = retention_parallel(&mut tape, x, q, k, v, &rotation_table(l, dh), mask)?;
    tape.value(out).clone().reshape(&[l, dh])
}

fn equivalence(cfg: &RunConfig, report: &mut Report) {
    const WIDTH: usize = 16;
    let gammas = gamma_schedule(EQUIV_SEEDS);
    for &l in &EQUIV_LENGTHS {
        for &dh in &EQUIV_HEAD_DIMS {
            let outcome = (|| {
                let mut worst: f64 = 0.0;
                for s in 0..EQUIV_SEEDS {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed.wrapping_mul(1000) + (l * 100 + dh * 10 + s) as u64);
                    let gamma = cfg.check_gamma.unwrap_or(gammas[s]);
                    let h = random(&[l, WIDTH], 1.0, &mut rng);
                    let w: Vec<Tensor> = (0..3).map(|_| random(&[WIDTH, dh], 1.0, &mut rng)).collect();
                    let a = parallel_form(&h, &w, gamma)?;
                    let b = retention_recurrent(&h, &w[0], &w[1], &w[2], gamma, &rotation_table(l, dh))?;
                    worst = worst.max(a.max_abs_diff(&b));
                }
                Ok((worst < cfg.equiv_tol, format!("max_abs_diff={worst:e} tol={:e}", cfg.equiv_tol)))
            })();
            record(report, &format!("equivalence.L{l}.dh{dh}"), outcome);
        }
    }
}

// ---------------------------------------------------------- invariants

fn invariants(cfg: &RunConfig, report: &mut Report) {
    let seed = cfg.model.seed;
    record(report, "ablation.beta_zero", beta_zero_identity(seed));
    record(report, "ablation.alpha_zero", alpha_zero_identity(seed));
    record(report, "simplex.fusion", fusion_simplex(seed));
    record(report, "simplex.softmax", softmax_simplex(seed));
    record(report, "causality", causality(seed));
    record(report, "xpos.same_position", xpos_same_position(seed));
    record(report, "xpos.cross_position", xpos_cross_position(seed));
    record(report, "metric.f1_enumeration", f1_enumeration());
}

fn small_model(beta_t: f64, ablations: Ablations, seed: u64) -> CoreResult<HeSRN> {
    let cfg = ModelConfig {
        hidden: 8,
        heads: 2,
        ffn_dim: 8,
        seq_len: 10,
        beta_t,
        seed,
        ablations,
        ..ModelConfig::default()
    };
    HeSRN::new(cfg, vec![4, 3, 5], 3)
}

/// `β_T = 0` and the He-Retention ablation give bit-identical logits.
fn beta_zero_identity(seed: u64) -> CoreResult<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB7A);
    let mut differing = 0;
    const TRIALS: usize = 3;
    for trial in 0..TRIALS {
        let spec = SynthSpec {
            nodes_per_type: vec![16, 8, 8],
            feature_dims: vec![4, 3, 5],
            avg_degree: 4.0,
            ..SynthSpec::uniform(3, 8, seed + trial as u64)
        };
        let g = synth_graph(&spec)?;
        let beta = rng.random_range(0.1..2.0);
        let model_seed = rng.random();
        let ablations = Ablations {
            no_he_retention: true,
            ..Ablations::default()
        };
        let ablated = small_model(beta, ablations, model_seed)?;
        let zero = small_model(0.0, Ablations::default(), model_seed)?;
        let prep = Prepared::new(&zero, &g)?;
        let seqs = prep.sequences(&g.target_nodes())?;
        let a = ablated.infer(&prep.inputs, &prep.types, &seqs, 8)?;
        let b = zero.infer(&prep.inputs, &prep.types, &seqs, 8)?;
        if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            differing += 1;
        }
    }
    Ok((differing == 0, format!("bit-identical in {}/{TRIALS} random instances", TRIALS - differing)))
}

/// With `α_s = 0` slot retention returns its input bit for bit.
fn alpha_zero_identity(seed: u64) -> CoreResult<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA1F);
    let mut differing = 0;
    const TRIALS: usize = 5;
    for _ in 0..TRIALS {
        let c = rng.random_range(1..6);
        let d = 2 * rng.random_range(1..6);
        let x = random(&[50, c, d], 3.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let [wq, wk, wv] = [0, 1, 2].map(|_| tape.constant(random(&[d, d], 1.0, &mut rng)));
        let gamma = tape.constant(Tensor::new(&[1], vec![rng.random_range(0.05..0.95)])?);
        let alpha = tape.constant(Tensor::new(&[1], vec![0.0])?);
        let out = slot_retention(&mut tape, xv, wq, wk, wv, gamma, alpha)?;
        if tape.value(out).data().iter().zip(x.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            differing += 1;
        }
    }
    Ok((differing == 0, format!("identity in {}/{TRIALS} random instances", TRIALS - differing)))
}

fn simplex_violation(rows: &[f64], width: usize) -> (f64, bool) {
    let worst = rows
        .chunks(width)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    (worst, rows.iter().all(|&w| w >= 0.0))
}

/// Slot fusion weights over 1000 random nodes lie on the simplex.
fn fusion_simplex(seed: u64) -> CoreResult<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF05);
    let (c, d, a) = (4, 8, 6);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[SIMPLEX_NODES, c, d], 5.0, &mut rng));
    let w_a = tape.constant(random(&[d, a], 2.0, &mut rng));
    let b_a = tape.constant(random(&[a], 1.0, &mut rng));
    let p = tape.constant(random(&[a, 1], 10.0, &mut rng));
    let (_, weights) = fuse_slots(&mut tape, x, w_a, b_a, p)?;
    let (worst, nonneg) = simplex_violation(tape.value(weights).data(), c);
    Ok((
        worst <= SIMPLEX_TOL && nonneg,
        format!("nodes={SIMPLEX_NODES} max_row_sum_error={worst:e} nonnegative={nonneg}"),
    ))
}

/// Softmax rows with logits up to ±700 lie on the simplex.
fn softmax_simplex(seed: u64) -> CoreResult<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x50F);
    let width = 7;
    let mut tape = Tape::new();
    let x = tape.constant(random(&[SIMPLEX_NODES, width], 700.0, &mut rng));
    let s = tape.softmax(x)?;
    let (worst, nonneg) = simplex_violation(tape.value(s).data(), width);
    Ok((
        worst <= SIMPLEX_TOL && nonneg,
        format!("rows={SIMPLEX_NODES} max_row_sum_error={worst:e} nonnegative={nonneg}"),
    ))
}

fn sequence_states(model: &HeSRN, h: &Tensor, types: &Tensor, seqs: &[Vec<Option<usize>>]) -> CoreResult<Tensor> {
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let hv = tape.constant(h.clone());
    let tv = tape.constant(types.clone());
    let out = model.sequence_states(&mut tape, &vars, hv, tv, seqs)?;
    Ok(tape.value(out).clone())
}

/// Changing tokens after position `n` leaves states at positions `≤ n`
/// untouched.
fn causality(seed: u64) -> CoreResult<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCA5);
    let (nodes, len, batch) = (40, 10, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..CAUSALITY_TRIALS {
        let model = small_model(rng.random_range(0.0..2.0), Ablations::default(), rng.random())?;
        let d = model.config().hidden;
        let h = random(&[nodes, d], 2.0, &mut rng);
        let types = random(&[nodes, 3], 1.0, &mut rng);
        let token = |rng: &mut ChaCha8Rng| (rng.random_range(0.0..1.0) > 0.15).then(|| rng.random_range(0..nodes));
        let seqs: Vec<Vec<Option<usize>>> = (0..batch)
            .map(|_| {
                let mut s: Vec<Option<usize>> = (0..len).map(|_| token(&mut rng)).collect();
                s[0] = Some(rng.random_range(0..nodes));
                s
            })
            .collect();
        let n = rng.random_range(0..len - 1);
        let mut perturbed = seqs.clone();
        for s in &mut perturbed {
            for t in s.iter_mut().skip(n + 1) {
                *t = token(&mut rng);
            }
        }
        let a = sequence_states(&model, &h, &types, &seqs)?;
        let b = sequence_states(&model, &h, &types, &perturbed)?;
        for i in 0..batch {
            for p in 0..=n {
                let lo = (i * len + p) * d;
                worst = worst.max(max_diff(&a.data()[lo..lo + d], &b.data()[lo..lo + d]));
            }
        }
    }
    Ok((
        worst < CAUSALITY_TOL,
        format!("trials={CAUSALITY_TRIALS} max_abs_diff={worst:e} tol={CAUSALITY_TOL:e}"),
    ))
}

fn rotated(q: &Tensor, table: &Arc<RotationTable>) -> CoreResult<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(q.clone());
    let r = tape.rotate(x, table)?;
    Ok(tape.value(r).clone())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `⟨R_n q, R_n k⟩ = ⟨q, k⟩` for even and odd widths.
fn xpos_same_position(seed: u64) -> CoreResult<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A3);
    let len = 64;
    let mut worst: f64 = 0.0;
    for width in [2, 15, 16, 32] {
        let table = rotation_table(len, width);
        let q = random(&[1, len, width], 2.0, &mut rng);
        let k = random(&[1, len, width], 2.0, &mut rng);
        let (qr, kr) = (rotated(&q, &table)?, rotated(&k, &table)?);
        for n in 0..len {
            let span = n * width..(n + 1) * width;
            let before = dot(&q.data()[span.clone()], &k.data()[span.clone()]);
            let after = dot(&qr.data()[span.clone()], &kr.data()[span]);
            worst = worst.max((before - after).abs());
        }
    }
    Ok((worst < XPOS_SAME_TOL, format!("max_abs_diff={worst:e} tol={XPOS_SAME_TOL:e}")))
}

fn as_complex(x: &[f64]) -> Vec<Complex64> {
    x.chunks(2)
        .map(|p| Complex64::new(p[0], p.get(1).copied().unwrap_or(0.0)))
        .collect()
}

/// Decayed, rotated scores against `Re Σ_j q_j conj(k_j) (γ e^{iθ_j})^(n−m)`
/// written with complex numbers; an odd trailing feature is a real part
/// with `θ = 0`.
fn xpos_cross_position(seed: u64) -> CoreResult<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC05);
    let (len, gamma) = (32, 0.95);
    let mut worst: f64 = 0.0;
    for width in [2, 9, 16] {
        let table = rotation_table(len, width);
        let thetas: Vec<f64> = (0..width / 2)
            .map(|j| 10000f64.powf(-2.0 * j as f64 / width as f64))
            .chain((width % 2 == 1).then_some(0.0))
            .collect();
        let q = random(&[1, len, width], 1.0, &mut rng);
        let k = random(&[1, len, width], 1.0, &mut rng);
        let mask = decay_mask(gamma, &vec![true; len])?;
        let (qr, kr) = (rotated(&q, &table)?, rotated(&k, &table)?);
        for n in 0..len {
            let qc = as_complex(&q.data()[n * width..(n + 1) * width]);
            for m in 0..=n {
                let kc = as_complex(&k.data()[m * width..(m + 1) * width]);
                let rel = (n - m) as i32;
                let want: f64 = qc
                    .iter()
                    .zip(&kc)
                    .zip(&thetas)
                    .map(|((a, b), &t)| (a * b.conj() * Complex64::from_polar(gamma, t).powi(rel)).re)
                    .sum();
                let got = dot(&qr.data()[n * width..(n + 1) * width], &kr.data()[m * width..(m + 1) * width])
                    * mask.at(&[n, m]);
                worst = worst.max((got - want).abs());
            }
        }
    }
    Ok((worst < XPOS_CROSS_TOL, format!("max_abs_diff={worst:e} tol={XPOS_CROSS_TOL:e}")))
}

type Q = Ratio<i64>;

fn ratio(num: usize, den: usize) -> Q {
    if den == 0 {
        Q::from_integer(0)
    } else {
        Q::new(num as i64, den as i64)
    }
}

fn harmonic(p: Q, r: Q) -> Q {
    if p + r == Q::from_integer(0) {
        Q::from_integer(0)
    } else {
        Q::from_integer(2) * p * r / (p + r)
    }
}

fn to_f64(q: Q) -> f64 {
    // Both parts are small integers, so this is one correctly rounded division.
    *q.numer() as f64 / *q.denom() as f64
}

/// Exact micro/macro F1 from precision and recall over a confusion matrix.
pub fn f1_oracle(pred: &[usize], truth: &[usize], classes: usize) -> (f64, f64) {
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    let mut macro_sum = Q::from_integer(0);
    for c in 0..classes {
        let tp = confusion[c][c];
        let predicted: usize = (0..classes).map(|t| confusion[t][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        macro_sum += harmonic(ratio(tp, predicted), ratio(tp, actual));
        tp_all += tp;
        fp_all += predicted - tp;
        fn_all += actual - tp;
    }
    let micro = harmonic(ratio(tp_all, tp_all + fp_all), ratio(tp_all, tp_all + fn_all));
    (to_f64(micro), to_f64(macro_sum / Q::from_integer(classes as i64)))
}

fn decode(mut code: usize, len: usize, base: usize) -> Vec<usize> {
    (0..len)
        .map(|_| {
            let d = code % base;
            code /= base;
            d
        })
        .collect()
}

/// Every prediction/truth pair of length 1..=6 over 3 classes, compared bit
/// for bit with the exact rational value.
fn f1_enumeration() -> CoreResult<(bool, String)> {
    let (classes, max_len) = (3usize, 6);
    let (mut pairs, mut mismatches) = (0usize, 0usize);
    for len in 1..=max_len {
        let total = classes.pow(len as u32);
        let vectors: Vec<Vec<usize>> = (0..total).map(|c| decode(c, len, classes)).collect();
        for pred in &vectors {
            for truth in &vectors {
                let got = f1_scores(pred, truth, classes)?;
                let (micro, macro_f1) = f1_oracle(pred, truth, classes);
                if got.micro.to_bits() != micro.to_bits() || got.macro_f1.to_bits() != macro_f1.to_bits() {
                    mismatches += 1;
                }
                pairs += 1;
            }
        }
    }
    Ok((mismatches == 0, format!("pairs={pairs} mismatches={mismatches}")))
}

// -------------------------------------------------------- learnability

/// Graph for one learnability seed: 600 nodes, 3 types, majority rule.
pub fn learn_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        nodes_per_type: vec![300, 150, 150],
        feature_dims: vec![8, 8, 8],
        feature_noise: 0.3,
        pref_strength: 0.9,
        ..SynthSpec::uniform(3, 150, seed)
    }
}

/// Model and optimizer settings for one learnability seed.
pub fn learn_config(seed: u64, ablations: Ablations) -> ModelConfig {
    ModelConfig {
        hidden: 32,
        heads: 2,
        ffn_dim: 32,
        seq_len: 20,
        encoder_layers: 1,
        lr: 5e-3,
        epochs: 60,
        batch_size: 32,
        seed,
        ablations,
        ..ModelConfig::default()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn learnability(report: &mut Report) -> CoreResult<()> {
    let variants: Vec<(&str, Ablations)> = std::iter::once(("full", Ablations::default()))
        .chain(Ablations::NAMES.iter().map(|&n| (n, Ablations::single(n).expect("known ablation"))))
        .collect();
    let mut means = Vec::new();
    for (name, ablations) in &variants {
        let mut scores = Vec::new();
        for seed in 0..LEARN_SEEDS {
            let g = synth_graph(&learn_spec(seed))?;
            let cfg = learn_config(seed, *ablations);
            let (_, result) = hesrn_core::train(&cfg, &g)?;
            let micro = result.test.micro;
            report.line(format!("learnability.{name}.seed{seed}.test_micro_f1"), micro);
            report.line(format!("learnability.{name}.seed{seed}.best_epoch"), result.best_epoch);
            if *name == "full" {
                report.check(
                    &format!("learnability.full.seed{seed}"),
                    micro >= LEARN_TARGET,
                    format!("test_micro_f1={micro} target={LEARN_TARGET} epochs={}", cfg.epochs),
                );
            }
            scores.push(micro);
        }
        let m = mean(&scores);
        report.line(format!("learnability.{name}.mean_test_micro_f1"), m);
        means.push(m);
    }
    for ((name, _), &m) in variants.iter().zip(&means).skip(1) {
        report.check(
            &format!("learnability.full_vs_{name}"),
            means[0] >= m,
            format!("full_mean={} ablated_mean={m}", means[0]),
        );
    }
    Ok(())
}
