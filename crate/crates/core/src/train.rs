//! Loss, evaluation and the training loop.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{sample_sequence, GraphTensors, HeteroGraph, Label};
use crate::metrics::{f1_multilabel, f1_scores, F1Scores};
use crate::model::{HeSRN, LossMode, ModelConfig};
use crate::params::Adam;
use crate::tensor::Tensor;

/// Targets for one batch, aligned with its logits rows.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchLabels {
    Classes(Vec<usize>),
    /// Row-major 0/1 indicators, `B × classes`.
    Multi(Vec<f64>),
}

/// Mean cross-entropy (softmax or per-label sigmoid) plus
/// `lambda · mean(logits²)`.
pub fn loss(tape: &mut Tape, logits: Var, labels: &BatchLabels, lambda: f64) -> Result<Var> {
    let data = match labels {
        BatchLabels::Classes(c) => tape.cross_entropy(logits, c)?,
        BatchLabels::Multi(m) => tape.bce_with_logits(logits, m)?,
    };
    if lambda == 0.0 {
        return Ok(data);
    }
    let sq = tape.mul(logits, logits)?;
    let penalty = tape.mean(sq)?;
    let penalty = tape.scale(penalty, lambda)?;
    tape.add(data, penalty)
}

/// Per-node labels in the form the loss and metrics need.
pub fn batch_labels(g: &HeteroGraph, ids: &[usize], mode: LossMode) -> Result<BatchLabels> {
    let classes = g.num_classes();
    match mode {
        LossMode::Multiclass => ids
            .iter()
            .map(|&v| match g.label(v) {
                Some(Label::Class(c)) => Ok(*c),
                _ => Err(Error::Validation(format!("node {v} has no class label"))),
            })
            .collect::<Result<_>>()
            .map(BatchLabels::Classes),
        LossMode::Multilabel => {
            let mut out = Vec::with_capacity(ids.len() * classes);
            for &v in ids {
                match g.label(v) {
                    Some(Label::Multi(bits)) => out.extend(bits.iter().map(|&b| f64::from(u8::from(b)))),
                    _ => return Err(Error::Validation(format!("node {v} has no multi-label"))),
                }
            }
            Ok(BatchLabels::Multi(out))
        }
    }
}

/// Argmax per row, ties to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Scores logits against labels; multi-label predictions use sigmoid ≥ 0.5.
pub fn score(logits: &Tensor, labels: &BatchLabels, num_classes: usize) -> Result<F1Scores> {
    match labels {
        BatchLabels::Classes(truth) => f1_scores(&argmax_rows(logits), truth, num_classes),
        BatchLabels::Multi(bits) => {
            let k = logits.shape()[1];
            let pred: Vec<Vec<bool>> = logits.data().chunks(k).map(|r| r.iter().map(|&x| x >= 0.0).collect()).collect();
            let truth: Vec<Vec<bool>> = bits.chunks(k).map(|r| r.iter().map(|&x| x > 0.5).collect()).collect();
            f1_multilabel(&pred, &truth)
        }
    }
}

/// Graph-derived inputs reused across epochs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub inputs: GraphTensors,
    /// `[N, C]` propagated type embeddings.
    pub types: Tensor,
    seqs: Vec<Option<Vec<Option<usize>>>>,
}

impl Prepared {
    pub fn new(model: &HeSRN, g: &HeteroGraph) -> Result<Self> {
        let inputs = GraphTensors::new(g);
        model.check_inputs(&inputs)?;
        let types = model.type_embeddings(&inputs)?;
        let cfg = model.config();
        let mut seqs = vec![None; g.num_nodes()];
        for v in g.target_nodes() {
            seqs[v] = Some(sample_sequence(g, v, cfg.seq_len, cfg.seed)?);
        }
        Ok(Prepared { inputs, types, seqs })
    }

    pub fn sequences(&self, ids: &[usize]) -> Result<Vec<Vec<Option<usize>>>> {
        ids.iter()
            .map(|&v| {
                self.seqs
                    .get(v)
                    .and_then(Clone::clone)
                    .ok_or_else(|| Error::Validation(format!("node {v} is not a target node")))
            })
            .collect()
    }
}

/// Test-split style evaluation of `ids`.
pub fn evaluate(model: &HeSRN, prep: &Prepared, g: &HeteroGraph, ids: &[usize]) -> Result<F1Scores> {
    Ok(evaluate_with_loss(model, prep, g, ids)?.0)
}

/// Scores of `ids` together with their mean classification loss (no
/// penalty term).
pub fn evaluate_with_loss(model: &HeSRN, prep: &Prepared, g: &HeteroGraph, ids: &[usize]) -> Result<(F1Scores, f64)> {
    let seqs = prep.sequences(ids)?;
    let logits = model.infer(&prep.inputs, &prep.types, &seqs, model.config().batch_size)?;
    let labels = batch_labels(g, ids, model.config().loss_mode)?;
    let scores = score(&logits, &labels, model.num_classes())?;
    let mut tape = Tape::new();
    let lv = tape.constant(logits);
    let l = loss(&mut tape, lv, &labels, 0.0)?;
    let value = tape.value(l).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "validation loss" });
    }
    Ok((scores, value))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: F1Scores,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Validation scores of the initial parameters.
    pub initial_val: F1Scores,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 = initial parameters).
    pub best_epoch: usize,
    pub best_val: F1Scores,
    pub test: F1Scores,
    pub param_count: usize,
    pub total_seconds: f64,
}

impl TrainReport {
    /// Per-epoch metrics as tab-separated lines, without timings.
    pub fn metric_log(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\tval_micro_f1\tval_macro_f1\n");
        let v = &self.initial_val;
        let _ = writeln!(out, "0\t-\t{}\t{}\t{}", self.initial_val_loss, v.micro, v.macro_f1);
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                e.epoch, e.train_loss, e.val_loss, e.val.micro, e.val.macro_f1
            );
        }
        out
    }
}

fn check_graph(config: &ModelConfig, g: &HeteroGraph) -> Result<()> {
    let s = g.splits();
    for (name, ids) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        if ids.is_empty() {
            return Err(Error::Validation(format!("graph has an empty {name} split")));
        }
    }
    let multi = g.is_multilabel();
    if multi != (config.loss_mode == LossMode::Multilabel) {
        return Err(Error::Validation(format!(
            "loss_mode {} does not match the graph's {} labels",
            config.loss_mode,
            if multi { "multi-label" } else { "single-label" }
        )));
    }
    Ok(())
}

fn as_divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            epoch,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// One optimizer pass over the shuffled training nodes; returns the mean
/// training loss.
fn run_epoch(
    model: &mut HeSRN,
    adam: &mut Adam,
    prep: &Prepared,
    g: &HeteroGraph,
    order: &[usize],
    epoch: usize,
) -> Result<f64> {
    let cfg = model.config().clone();
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let seqs = prep.sequences(chunk)?;
        let labels = batch_labels(g, chunk, cfg.loss_mode)?;
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape);
        let logits = model.forward(&mut tape, &vars, &prep.inputs, &prep.types, &seqs)?;
        let l = loss(&mut tape, logits, &labels, cfg.l2)?;
        let value = tape.value(l).item()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("loss became {value}"),
            });
        }
        let grads = tape.backward(l)?;
        let grads = model.params().collect_grads(&grads, &vars);
        adam.step(model.params_mut(), &grads)?;
        total += value * chunk.len() as f64;
    }
    Ok(total / order.len() as f64)
}

/// Trains a fresh model on `g`, keeping the parameters with the best
/// validation micro-F1, ties broken by the lower validation loss.
pub fn train(config: &ModelConfig, g: &HeteroGraph) -> Result<(HeSRN, TrainReport)> {
    let start = Instant::now();
    check_graph(config, g)?;
    let dims = g.types().iter().map(|t| t.feature_dim).collect();
    let mut model = HeSRN::new(config.clone(), dims, g.num_classes())?;
    let prep = Prepared::new(&model, g)?;
    let splits = g.splits();
    let mut adam = Adam::new(model.params(), config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_F42D_4C95_7F2D);

    let (initial_val, initial_val_loss) =
        evaluate_with_loss(&model, &prep, g, &splits.val).map_err(|e| as_divergence(0, e))?;
    let mut best = (0, initial_val, initial_val_loss, model.params().tensors().to_vec());
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut order = splits.train.clone();
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let train_loss = run_epoch(&mut model, &mut adam, &prep, g, &order, epoch).map_err(|e| as_divergence(epoch, e))?;
        let (val, val_loss) = evaluate_with_loss(&model, &prep, g, &splits.val).map_err(|e| as_divergence(epoch, e))?;
        log::info!(
            "epoch {epoch}: loss {train_loss:.6} val loss {val_loss:.6} micro-F1 {:.4} macro-F1 {:.4}",
            val.micro,
            val.macro_f1
        );
        // Small validation sets saturate; ties go to the lower loss.
        if val.micro > best.1.micro || (val.micro == best.1.micro && val_loss < best.2) {
            best = (epoch, val, val_loss, model.params().tensors().to_vec());
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val,
            val_loss,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let (best_epoch, best_val, _, tensors) = best;
    model.params_mut().set_all(tensors)?;
    let test = evaluate(&model, &prep, g, &splits.test)?;
    let report = TrainReport {
        initial_val,
        initial_val_loss,
        epochs,
        best_epoch,
        best_val,
        test,
        param_count: model.params().num_scalars(),
        total_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 3]));
        let l = loss(&mut tape, logits, &BatchLabels::Classes(vec![0, 2]), 0.0).unwrap();
        assert!((tape.value(l).item().unwrap() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_leave_only_penalty() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_rows(&[vec![50.0, 0.0], vec![0.0, 50.0]]));
        let ce = loss(&mut tape, logits, &BatchLabels::Classes(vec![0, 1]), 0.0).unwrap();
        assert!(tape.value(ce).item().unwrap() < 1e-20);
        let full = loss(&mut tape, logits, &BatchLabels::Classes(vec![0, 1]), 0.01).unwrap();
        let penalty = 0.01 * 2500.0 / 2.0;
        assert!((tape.value(full).item().unwrap() - penalty).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            loss(&mut tape, logits, &BatchLabels::Classes(vec![3]), 0.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 2.0, 2.0]]);
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
