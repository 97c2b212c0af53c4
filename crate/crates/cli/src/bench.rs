//! `hesrn bench`: forward-pass scaling of the retention model against dense
//! self-attention over the whole node set.
//!
//! For each size `N` a synthetic graph with `N` target nodes is built. The
//! retention side times a full gradient-free forward pass over every
//! target's length-`L` sequence; the reference side times single-head
//! softmax attention across all `N` encoded target rows, which holds an
//! `N × N` score matrix. Each point reports the median of `bench_reps`
//! timed runs after one warm-up. Slopes are least-squares fits of
//! `log(time)` on `log(N)`.

use std::time::Instant;

use hesrn_core::graph::synth_graph;
use hesrn_core::retention::full_attention;
use hesrn_core::train::Prepared;
use hesrn_core::{HeSRN, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::report::Report;
use crate::{CliError, Result};

const MIN_POINTS: usize = 3;
const MIN_REPS: usize = 5;
const BATCH: usize = 256;

/// One timed size.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchPoint {
    pub n: usize,
    pub retention_seconds: f64,
    /// `None` when the score matrix would exceed the memory budget.
    pub attention_seconds: Option<f64>,
    pub retention_mb: f64,
    pub attention_mb: f64,
}

/// Least-squares slope of `ln y` on `ln x`; `None` below two points.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

fn time_median<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

fn mib(values: f64) -> f64 {
    values * 8.0 / (1024.0 * 1024.0)
}

/// Rough live-tensor footprint of one inference pass: the structure
/// encoding over all nodes plus one batch of sequence activations.
fn retention_estimate(nodes: usize, cfg: &ModelConfig) -> f64 {
    let (d, l, h) = (cfg.hidden as f64, cfg.seq_len as f64, cfg.heads as f64);
    let batch = BATCH.min(nodes) as f64;
    let encoding = nodes as f64 * d * 24.0;
    let sequences = batch * l * (l * h * 6.0 + d * 16.0 + cfg.ffn_dim as f64 * 2.0);
    mib(encoding + sequences)
}

/// Score matrix plus the `[N, d]` projections of the dense reference.
fn attention_estimate(n: usize, d: usize) -> f64 {
    mib(n as f64 * n as f64 * 2.0 + n as f64 * d as f64 * 4.0)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    let sizes = &cfg.bench_sizes;
    if sizes.len() < MIN_POINTS {
        return Err(CliError::Config(format!(
            "bench needs at least {MIN_POINTS} sizes, got {}",
            sizes.len()
        )));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(CliError::Config(format!("bench sizes must be positive and ascending, got {sizes:?}")));
    }
    if cfg.bench_reps < MIN_REPS {
        return Err(CliError::Config(format!(
            "bench_reps must be at least {MIN_REPS}, got {}",
            cfg.bench_reps
        )));
    }
    Ok(())
}

fn bench_model_config(cfg: &RunConfig) -> ModelConfig {
    ModelConfig {
        hidden: cfg.bench_hidden,
        heads: cfg.bench_heads,
        seq_len: cfg.bench_seq_len,
        ffn_dim: cfg.bench_hidden,
        batch_size: BATCH,
        seed: cfg.model.seed,
        ..ModelConfig::default()
    }
}

fn bench_point(cfg: &RunConfig, n: usize) -> Result<BenchPoint> {
    let mut spec = crate::commands::synth_spec(cfg);
    let others = spec.nodes_per_type.len().saturating_sub(1).max(1);
    spec.nodes_per_type = std::iter::once(n)
        .chain(std::iter::repeat_n(n.div_ceil(2 * others).max(1), others))
        .collect();
    spec.feature_dims = vec![cfg.synth_feature_dim; spec.nodes_per_type.len()];
    let g = synth_graph(&spec)?;
    let mcfg = bench_model_config(cfg);
    mcfg.validate()?;
    let model = HeSRN::new(mcfg.clone(), spec.feature_dims.clone(), g.num_classes())?;
    let prep = Prepared::new(&model, &g)?;
    let targets = g.target_nodes();
    let seqs = prep.sequences(&targets)?;

    let retention_seconds = time_median(cfg.bench_reps, || {
        model.infer(&prep.inputs, &prep.types, &seqs, BATCH)?;
        Ok(())
    })?;

    let d = mcfg.hidden;
    let attention_mb = attention_estimate(n, d);
    let attention_seconds = if attention_mb > cfg.bench_memory_mb as f64 {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed ^ n as u64);
        let x = Tensor::new(&[n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let scale = (1.0 / d as f64).sqrt();
        let mut w = || Tensor::new(&[d, d], (0..d * d).map(|_| rng.random_range(-scale..scale)).collect());
        let (wq, wk, wv) = (w()?, w()?, w()?);
        Some(time_median(cfg.bench_reps, || {
            full_attention(&x, &wq, &wk, &wv)?;
            Ok(())
        })?)
    };

    Ok(BenchPoint {
        n,
        retention_seconds,
        attention_seconds,
        retention_mb: retention_estimate(g.num_nodes(), &mcfg),
        attention_mb,
    })
}

/// Peak resident set size of this process in MiB, where the platform
/// reports it.
fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

pub fn run(cfg: &RunConfig) -> Result<Report> {
    validate(cfg)?;
    let start = Instant::now();
    let mut report = Report::new("bench", cfg.format);
    report.line("seq_len", cfg.bench_seq_len);
    report.line("hidden", cfg.bench_hidden);
    report.line("heads", cfg.bench_heads);
    report.line("reps", cfg.bench_reps);
    report.line("memory_budget_mb", cfg.bench_memory_mb);

    let mut points = Vec::new();
    for &n in &cfg.bench_sizes {
        let p = bench_point(cfg, n)?;
        log::info!("bench N={n}: retention {:.4}s attention {:?}", p.retention_seconds, p.attention_seconds);
        report.line(format!("point.{n}.retention_seconds"), p.retention_seconds);
        match p.attention_seconds {
            Some(s) => report.line(format!("point.{n}.attention_seconds"), s),
            None => report.line(format!("point.{n}.attention"), "OOM"),
        }
        report.line(format!("point.{n}.retention_memory_mb"), format!("{:.1}", p.retention_mb));
        report.line(format!("point.{n}.attention_memory_mb"), format!("{:.1}", p.attention_mb));
        points.push(p);
    }

    let retention: Vec<(f64, f64)> = points.iter().map(|p| (p.n as f64, p.retention_seconds)).collect();
    let attention: Vec<(f64, f64)> = points
        .iter()
        .filter_map(|p| p.attention_seconds.map(|s| (p.n as f64, s)))
        .collect();
    let fmt = |s: Option<f64>| s.map_or("NA".to_string(), |v| format!("{v:.4}"));
    report.summary("retention_slope", fmt(loglog_slope(&retention)));
    report.summary("attention_slope", fmt(loglog_slope(&attention)));
    report.summary("attention_points", attention.len());
    if let Some(mb) = peak_rss_mb() {
        report.summary("peak_rss_mb", format!("{mb:.1}"));
    }
    report.summary("total_seconds", start.elapsed().as_secs_f64());
    report.summary("status", "ok");
    Ok(report)
}
