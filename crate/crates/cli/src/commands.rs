//! `train`, `eval` and `synth`.

use std::fs;
use std::path::{Path, PathBuf};

use hesrn_core::checkpoint::{load_checkpoint, save_checkpoint};
use hesrn_core::graph::{load_graph, save_graph, synth_graph, SynthSpec};
use hesrn_core::train::{evaluate, Prepared};
use hesrn_core::{HeSRN, HeteroGraph, LossMode};

use crate::config::RunConfig;
use crate::report::Report;
use crate::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const CONFIG_FILE: &str = "config.kv";
pub const REPORT_FILE: &str = "report.txt";
pub const GRAPH_FILE: &str = "graph.hgraph";

fn graph_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.graph
        .as_deref()
        .ok_or_else(|| CliError::Config("no graph file given, pass --graph <path>".into()))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Ok(());
    }
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn describe_graph(report: &mut Report, g: &HeteroGraph) {
    report.line("nodes", g.num_nodes());
    report.line("edges", g.edges().len());
    report.line("node_types", g.num_types());
    report.line("classes", g.num_classes());
    report.line("target_nodes", g.target_nodes().len());
    report.line("train_nodes", g.splits().train.len());
    report.line("val_nodes", g.splits().val.len());
    report.line("test_nodes", g.splits().test.len());
}

pub fn train(cfg: &RunConfig) -> Result<Report> {
    let path = graph_path(cfg)?;
    let g = load_graph(path)?;
    cfg.model.validate()?;
    cfg.model.warn_off_grid();
    let mut report = Report::new("train", cfg.format);
    report.line("graph", path.display());
    describe_graph(&mut report, &g);

    let (model, result) = hesrn_core::train(&cfg.model, &g)?;

    create_dir(&cfg.out)?;
    let ckpt = checkpoint_path(cfg);
    if let Some(parent) = ckpt.parent() {
        create_dir(parent)?;
    }
    save_checkpoint(&model, &ckpt)?;
    let metrics = cfg.out.join(METRICS_FILE);
    write(&metrics, &result.metric_log())?;
    write(&cfg.out.join(CONFIG_FILE), &cfg.emit())?;

    report.line("param_count", result.param_count);
    report.line("initial_val_micro_f1", result.initial_val.micro);
    report.line("initial_val_macro_f1", result.initial_val.macro_f1);
    for e in &result.epochs {
        report.line(format!("epoch.{}.train_loss", e.epoch), e.train_loss);
        report.line(format!("epoch.{}.val_loss", e.epoch), e.val_loss);
        report.line(format!("epoch.{}.val_micro_f1", e.epoch), e.val.micro);
        report.line(format!("epoch.{}.val_macro_f1", e.epoch), e.val.macro_f1);
        report.line(format!("epoch.{}.epoch_seconds", e.epoch), e.seconds);
    }
    report.summary("epochs_run", result.epochs.len());
    report.summary("best_epoch", result.best_epoch);
    report.summary("best_val_micro_f1", result.best_val.micro);
    report.summary("best_val_macro_f1", result.best_val.macro_f1);
    report.summary("test_micro_f1", result.test.micro);
    report.summary("test_macro_f1", result.test.macro_f1);
    report.summary("checkpoint", ckpt.display());
    report.summary("metric_log", metrics.display());
    report.summary("total_seconds", result.total_seconds);
    report.summary("status", "ok");
    write(&cfg.out.join(REPORT_FILE), &report.render())?;
    Ok(report)
}

fn shape_of(types: usize, dims: &[usize], classes: usize, multi: bool) -> String {
    let labels = if multi { "multi-label" } else { "single-label" };
    format!("{types} node types with feature dims {dims:?} and {classes} {labels} classes")
}

/// Fails with [`CliError::Incompatible`] unless `model` can score `g`.
pub fn check_compatible(model: &HeSRN, g: &HeteroGraph) -> Result<()> {
    let dims: Vec<usize> = g.types().iter().map(|t| t.feature_dim).collect();
    let multi = model.config().loss_mode == LossMode::Multilabel;
    if dims != model.feature_dims() || g.num_classes() != model.num_classes() || g.is_multilabel() != multi {
        return Err(CliError::Incompatible {
            checkpoint: shape_of(model.num_types(), model.feature_dims(), model.num_classes(), multi),
            graph: shape_of(g.num_types(), &dims, g.num_classes(), g.is_multilabel()),
        });
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<Report> {
    let ckpt = checkpoint_path(cfg);
    let model = load_checkpoint(&ckpt)?;
    let path = graph_path(cfg)?;
    let g = load_graph(path)?;
    check_compatible(&model, &g)?;
    let prep = Prepared::new(&model, &g)?;
    let test = &g.splits().test;
    if test.is_empty() {
        return Err(hesrn_core::Error::Validation("graph has an empty test split".into()).into());
    }
    let scores = evaluate(&model, &prep, &g, test)?;

    let mut report = Report::new("eval", cfg.format);
    report.line("checkpoint", ckpt.display());
    report.line("graph", path.display());
    report.line("test_nodes", test.len());
    report.summary("test_micro_f1", scores.micro);
    report.summary("test_macro_f1", scores.macro_f1);
    report.summary("status", "ok");
    Ok(report)
}

pub fn synth_spec(cfg: &RunConfig) -> SynthSpec {
    SynthSpec {
        nodes_per_type: cfg.synth_nodes.clone(),
        feature_dims: vec![cfg.synth_feature_dim; cfg.synth_nodes.len()],
        avg_degree: cfg.synth_degree,
        pref_strength: cfg.synth_pref,
        feature_noise: cfg.synth_noise,
        label_rule: cfg.synth_rule,
        train_frac: cfg.synth_train,
        val_frac: cfg.synth_val,
        seed: cfg.model.seed,
    }
}

pub fn synth(cfg: &RunConfig) -> Result<Report> {
    let g = synth_graph(&synth_spec(cfg))?;
    let path = cfg.graph.clone().unwrap_or_else(|| cfg.out.join(GRAPH_FILE));
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    save_graph(&g, &path)?;
    let mut report = Report::new("synth", cfg.format);
    report.line("seed", cfg.model.seed);
    describe_graph(&mut report, &g);
    report.summary("graph", path.display());
    report.summary("status", "ok");
    Ok(report)
}
