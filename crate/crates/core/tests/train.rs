use hesrn_core::checkpoint::{parse_checkpoint, write_checkpoint};
use hesrn_core::graph::{synth_graph, GraphParts, LabelRule, Splits, SynthSpec};
use hesrn_core::metrics::f1_scores;
use hesrn_core::model::{predict, readout};
use hesrn_core::train::{loss, BatchLabels, Prepared};
use hesrn_core::{train, Ablations, Error, HeSRN, HeteroGraph, LossMode, ModelConfig, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn graph(seed: u64) -> HeteroGraph {
    let spec = SynthSpec {
        nodes_per_type: vec![24, 12, 12],
        feature_dims: vec![4, 3, 5],
        avg_degree: 4.0,
        ..SynthSpec::uniform(3, 12, seed)
    };
    synth_graph(&spec).unwrap()
}

fn config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        ffn_dim: 8,
        seq_len: 6,
        encoder_layers: 1,
        lr: 1e-2,
        epochs: 3,
        batch_size: 5,
        seed: 3,
        ..ModelConfig::default()
    }
}

#[test]
fn zero_epochs_reports_initial_metrics() {
    let g = graph(1);
    let cfg = ModelConfig { epochs: 0, ..config() };
    let (model, report) = train(&cfg, &g).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(report.best_epoch, 0);
    assert_eq!(report.best_val, report.initial_val);
    assert_eq!(report.param_count, model.params().num_scalars());
    let fresh = HeSRN::new(cfg, vec![4, 3, 5], 3).unwrap();
    assert_eq!(model.params(), fresh.params());
}

#[test]
fn same_seed_gives_identical_runs() {
    let g = graph(2);
    let (m1, r1) = train(&config(), &g).unwrap();
    let (m2, r2) = train(&config(), &g).unwrap();
    assert_eq!(r1.epochs.len(), 3);
    assert_eq!(r1.metric_log(), r2.metric_log());
    for (a, b) in r1.epochs.iter().zip(&r2.epochs) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
    }
    assert_eq!(write_checkpoint(&m1), write_checkpoint(&m2));

    let (_, r3) = train(&ModelConfig { seed: 4, ..config() }, &g).unwrap();
    assert_ne!(r1.metric_log(), r3.metric_log());
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let g = graph(3);
    let cfg = ModelConfig { lr: 0.0, ..config() };
    let (model, report) = train(&cfg, &g).unwrap();
    let fresh = HeSRN::new(cfg, vec![4, 3, 5], 3).unwrap();
    assert_eq!(model.params(), fresh.params());
    assert!(report.epochs.iter().all(|e| e.val == report.initial_val));
}

#[test]
fn checkpoint_reproduces_test_metrics() {
    let g = graph(4);
    let (model, report) = train(&config(), &g).unwrap();
    let back = parse_checkpoint(&write_checkpoint(&model)).unwrap();
    let prep = Prepared::new(&back, &g).unwrap();
    let again = hesrn_core::train::evaluate(&back, &prep, &g, &g.splits().test).unwrap();
    assert_eq!(again, report.test);
}

#[test]
fn batched_inference_matches_one_tape_forward() {
    let g = graph(5);
    let model = HeSRN::new(config(), vec![4, 3, 5], 3).unwrap();
    let prep = Prepared::new(&model, &g).unwrap();
    let ids = g.target_nodes();
    let seqs = prep.sequences(&ids).unwrap();
    let batched = model.infer(&prep.inputs, &prep.types, &seqs, 7).unwrap();
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let logits = model.forward(&mut tape, &vars, &prep.inputs, &prep.types, &seqs).unwrap();
    assert!(batched.max_abs_diff(tape.value(logits)) < 1e-12);
}

#[test]
fn he_retention_ablation_equals_zero_beta() {
    let g = graph(6);
    let mut ablated = config();
    ablated.ablations.no_he_retention = true;
    let zero_beta = ModelConfig { beta_t: 0.0, ..config() };
    let a = HeSRN::new(ablated, vec![4, 3, 5], 3).unwrap();
    let b = HeSRN::new(zero_beta, vec![4, 3, 5], 3).unwrap();
    let prep = Prepared::new(&a, &g).unwrap();
    let seqs = prep.sequences(&g.target_nodes()).unwrap();
    let la = a.infer(&prep.inputs, &prep.types, &seqs, 16).unwrap();
    let lb = b.infer(&prep.inputs, &prep.types, &seqs, 16).unwrap();
    assert_eq!(la.data(), lb.data());
}

#[test]
fn every_ablation_trains() {
    let g = graph(7);
    for name in Ablations::NAMES {
        let cfg = ModelConfig {
            ablations: Ablations::single(name).unwrap(),
            epochs: 1,
            ..config()
        };
        let (_, report) = train(&cfg, &g).unwrap();
        assert!(report.epochs[0].train_loss.is_finite(), "{name}");
    }
    assert!(Ablations::single("no_such_thing").is_err());
}

#[test]
fn multilabel_graphs_train_with_sigmoid_loss() {
    let spec = SynthSpec {
        label_rule: LabelRule::NeighborTypePresence,
        ..SynthSpec::uniform(3, 16, 8)
    };
    let g = synth_graph(&spec).unwrap();
    let cfg = ModelConfig {
        loss_mode: LossMode::Multilabel,
        ..config()
    };
    let (_, report) = train(&cfg, &g).unwrap();
    assert!(report.test.micro >= 0.0 && report.test.micro <= 1.0);
    assert!(matches!(train(&config(), &g), Err(Error::Validation(_))));
}

#[test]
fn missing_splits_are_rejected() {
    let g = graph(9);
    let mut parts: GraphParts = g.to_parts();
    parts.splits = Splits {
        train: parts.splits.train.clone(),
        val: vec![],
        test: parts.splits.test.clone(),
    };
    let g = HeteroGraph::new(parts).unwrap();
    assert!(matches!(train(&config(), &g), Err(Error::Validation(_))));
}

#[test]
fn runaway_learning_rate_is_reported_as_divergence() {
    let g = graph(10);
    let cfg = ModelConfig { lr: 1e300, ..config() };
    match train(&cfg, &g) {
        Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|(_, r)| r.test)),
    }
}

#[test]
fn readout_and_head_match_slicing_and_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = Tensor::new(&[2, 4, 3], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w = Tensor::new(&[3, 2], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let b = Tensor::new(&[2], vec![0.5, -0.25]).unwrap();
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let r = readout(&mut tape, hv).unwrap();
    assert_eq!(tape.value(r).data(), [&h.data()[0..3], &h.data()[12..15]].concat());
    let (wv, bv) = (tape.leaf(w.clone()), tape.leaf(b.clone()));
    let logits = predict(&mut tape, r, wv, bv).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let want: f64 = (0..3).map(|k| tape.value(r).at(&[i, k]) * w.at(&[k, j])).sum::<f64>() + b.data()[j];
            assert!((tape.value(logits).at(&[i, j]) - want).abs() < 1e-15);
        }
    }
    let zw = tape.leaf(Tensor::zeros(&[3, 2]));
    let zb = tape.leaf(Tensor::zeros(&[2]));
    let zero = predict(&mut tape, r, zw, zb).unwrap();
    assert!(tape.value(zero).data().iter().all(|&x| x == 0.0));

    let single = tape.leaf(Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let r1 = readout(&mut tape, single).unwrap();
    assert_eq!(tape.value(r1).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn cross_entropy_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits = Tensor::new(&[4, 3], (0..12).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    let labels = vec![2, 0, 1, 1];
    let lambda = 0.03;
    let mut tape = Tape::new();
    let lv = tape.leaf(logits.clone());
    let l = loss(&mut tape, lv, &BatchLabels::Classes(labels.clone()), lambda).unwrap();
    let mut ce = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        ce -= (row[y].exp() / z).ln();
    }
    let penalty = lambda * logits.data().iter().map(|x| x * x).sum::<f64>() / 12.0;
    assert!((tape.value(l).item().unwrap() - (ce / 4.0 + penalty)).abs() < 1e-14);
}

fn brute_force_f1(pred: &[usize], truth: &[usize]) -> (f64, f64) {
    let mut per_class = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for c in 0..3 {
        let tp = pred.iter().zip(truth).filter(|(&p, &t)| p == c && t == c).count();
        let fp = pred.iter().zip(truth).filter(|(&p, &t)| p == c && t != c).count();
        let fn_ = pred.iter().zip(truth).filter(|(&p, &t)| p != c && t == c).count();
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        per_class.push(if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        });
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
    }
    let p = tp_all as f64 / (tp_all + fp_all) as f64;
    let r = tp_all as f64 / (tp_all + fn_all) as f64;
    let micro = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (micro, per_class.iter().sum::<f64>() / 3.0)
}

fn decode(mut code: usize, len: usize) -> Vec<usize> {
    (0..len)
        .map(|_| {
            let d = code % 3;
            code /= 3;
            d
        })
        .collect()
}

#[test]
fn f1_matches_enumeration_up_to_length_four() {
    // Lengths 5 and 6 are covered by the acceptance run.
    for len in 1..=4 {
        let total = 3usize.pow(len as u32);
        for a in 0..total {
            for b in 0..total {
                let (pred, truth) = (decode(a, len), decode(b, len));
                let got = f1_scores(&pred, &truth, 3).unwrap();
                let (micro, macro_f1) = brute_force_f1(&pred, &truth);
                assert!((got.micro - micro).abs() < 1e-15 && (got.macro_f1 - macro_f1).abs() < 1e-15);
            }
        }
    }
}
