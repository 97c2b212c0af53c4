//! Flat `key=value` run configuration.
//!
//! A config file holds one `key=value` per line; blank lines and lines
//! starting with `#` are ignored. Every key may also be given on the
//! command line as `--key value`, which wins over the file. Unknown keys
//! are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hesrn_core::graph::LabelRule;
use hesrn_core::ModelConfig;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    /// `key<TAB>value`
    Tsv,
    /// `key=value`, reusable as a config file.
    Kv,
}

impl ReportFormat {
    fn as_str(self) -> &'static str {
        match self {
            ReportFormat::Tsv => "tsv",
            ReportFormat::Kv => "kv",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub graph: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub format: ReportFormat,

    /// Comma-separated check suites.
    pub suite: Vec<String>,
    pub grad_tol: f64,
    pub grad_eps: f64,
    pub equiv_tol: f64,
    /// Overrides the decay used by the equivalence suite.
    pub check_gamma: Option<f64>,

    pub bench_sizes: Vec<usize>,
    pub bench_reps: usize,
    pub bench_seq_len: usize,
    pub bench_hidden: usize,
    pub bench_heads: usize,
    /// Memory allowed for the dense attention score matrix, in MiB.
    pub bench_memory_mb: usize,

    /// Node count of each type; the first type holds the labeled targets.
    pub synth_nodes: Vec<usize>,
    pub synth_feature_dim: usize,
    pub synth_degree: f64,
    pub synth_pref: f64,
    pub synth_noise: f64,
    pub synth_rule: LabelRule,
    pub synth_train: f64,
    pub synth_val: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            graph: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            format: ReportFormat::Tsv,
            suite: vec!["grad".into(), "equivalence".into(), "invariants".into()],
            grad_tol: 1e-4,
            grad_eps: 1e-5,
            equiv_tol: 1e-8,
            check_gamma: None,
            bench_sizes: vec![1000, 2000, 4000, 8000],
            bench_reps: 5,
            bench_seq_len: 50,
            bench_hidden: 32,
            bench_heads: 2,
            bench_memory_mb: 2048,
            synth_nodes: vec![300, 150, 150],
            synth_feature_dim: 8,
            synth_degree: 8.0,
            synth_pref: 0.8,
            synth_noise: 1.0,
            synth_rule: LabelRule::MajorityNeighborType,
            synth_train: 0.4,
            synth_val: 0.1,
        }
    }
}

pub const SUITES: [&str; 4] = ["grad", "equivalence", "invariants", "learnability"];

const RUN_KEYS: [&str; 24] = [
    "graph",
    "out",
    "checkpoint",
    "format",
    "suite",
    "grad_tol",
    "grad_eps",
    "equiv_tol",
    "check_gamma",
    "bench_sizes",
    "bench_reps",
    "bench_seq_len",
    "bench_hidden",
    "bench_heads",
    "bench_memory_mb",
    "synth_nodes",
    "synth_feature_dim",
    "synth_degree",
    "synth_pref",
    "synth_noise",
    "synth_rule",
    "synth_train",
    "synth_val",
    "config",
];

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| bad(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn rule_name(rule: LabelRule) -> &'static str {
    match rule {
        LabelRule::MajorityNeighborType => "majority",
        LabelRule::NeighborTypePresence => "presence",
    }
}

impl RunConfig {
    /// Every accepted key, model keys first.
    pub fn keys() -> Vec<&'static str> {
        ModelConfig::KEYS
            .iter()
            .chain(RUN_KEYS.iter().filter(|&&k| k != "config"))
            .copied()
            .collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let path = || (!value.is_empty()).then(|| PathBuf::from(value));
        match key {
            "graph" => self.graph = path(),
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = path(),
            "format" => {
                self.format = match value {
                    "tsv" => ReportFormat::Tsv,
                    "kv" => ReportFormat::Kv,
                    other => return Err(bad(format!("unknown format {other:?}, expected tsv or kv"))),
                }
            }
            "suite" => {
                let suites: Vec<String> = parse_list(key, value)?;
                let suites = if suites.iter().any(|s| s == "all") {
                    SUITES.iter().map(|s| s.to_string()).collect()
                } else {
                    suites
                };
                if let Some(s) = suites.iter().find(|s| !SUITES.contains(&s.as_str())) {
                    return Err(bad(format!("unknown check suite {s:?}")));
                }
                self.suite = suites;
            }
            "grad_tol" => self.grad_tol = parse(key, value)?,
            "grad_eps" => self.grad_eps = parse(key, value)?,
            "equiv_tol" => self.equiv_tol = parse(key, value)?,
            "check_gamma" => {
                self.check_gamma = if value.is_empty() { None } else { Some(parse(key, value)?) }
            }
            "bench_sizes" => self.bench_sizes = parse_list(key, value)?,
            "bench_reps" => self.bench_reps = parse(key, value)?,
            "bench_seq_len" => self.bench_seq_len = parse(key, value)?,
            "bench_hidden" => self.bench_hidden = parse(key, value)?,
            "bench_heads" => self.bench_heads = parse(key, value)?,
            "bench_memory_mb" => self.bench_memory_mb = parse(key, value)?,
            "synth_nodes" => self.synth_nodes = parse_list(key, value)?,
            "synth_feature_dim" => self.synth_feature_dim = parse(key, value)?,
            "synth_degree" => self.synth_degree = parse(key, value)?,
            "synth_pref" => self.synth_pref = parse(key, value)?,
            "synth_noise" => self.synth_noise = parse(key, value)?,
            "synth_rule" => {
                self.synth_rule = match value {
                    "majority" => LabelRule::MajorityNeighborType,
                    "presence" => LabelRule::NeighborTypePresence,
                    other => return Err(bad(format!("unknown synth_rule {other:?}"))),
                }
            }
            "synth_train" => self.synth_train = parse(key, value)?,
            "synth_val" => self.synth_val = parse(key, value)?,
            _ if ModelConfig::KEYS.contains(&key) => self.model.set(key, value)?,
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in [`RunConfig::keys`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let mut pairs = self.model.to_pairs();
        for &k in RUN_KEYS.iter().filter(|&&k| k != "config") {
            let v = match k {
                "graph" => opt_path(&self.graph),
                "out" => self.out.display().to_string(),
                "checkpoint" => opt_path(&self.checkpoint),
                "format" => self.format.as_str().to_string(),
                "suite" => self.suite.join(","),
                "grad_tol" => self.grad_tol.to_string(),
                "grad_eps" => self.grad_eps.to_string(),
                "equiv_tol" => self.equiv_tol.to_string(),
                "check_gamma" => self.check_gamma.map_or(String::new(), |g| g.to_string()),
                "bench_sizes" => join(&self.bench_sizes),
                "bench_reps" => self.bench_reps.to_string(),
                "bench_seq_len" => self.bench_seq_len.to_string(),
                "bench_hidden" => self.bench_hidden.to_string(),
                "bench_heads" => self.bench_heads.to_string(),
                "bench_memory_mb" => self.bench_memory_mb.to_string(),
                "synth_nodes" => join(&self.synth_nodes),
                "synth_feature_dim" => self.synth_feature_dim.to_string(),
                "synth_degree" => self.synth_degree.to_string(),
                "synth_pref" => self.synth_pref.to_string(),
                "synth_noise" => self.synth_noise.to_string(),
                "synth_rule" => rule_name(self.synth_rule).to_string(),
                "synth_train" => self.synth_train.to_string(),
                "synth_val" => self.synth_val.to_string(),
                _ => unreachable!("key list and match out of sync"),
            };
            pairs.push((k, v));
        }
        pairs
    }

    /// The effective configuration as a config file.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("config line {}: expected key=value, got {line:?}", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(pairs)
    }

    /// Defaults, then the file, then the overrides.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in Self::parse_text(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (k, v) in Self::parse_text(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }
}

/// Splits `--key value` / `--key=value` tokens into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(tok) = it.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| bad(format!("unexpected argument {tok:?}, expected --key value")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| bad(format!("missing value for --{key}")))?;
                (key.to_string(), v.clone())
            }
        };
        pairs.push((key.replace('-', "_"), value));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emit_then_reparse_is_identity() {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("lr", "0.003"),
            ("graph", "data/g.hgraph"),
            ("suite", "grad,learnability"),
            ("check_gamma", "0.5"),
            ("bench_sizes", "10,20,40"),
            ("synth_rule", "presence"),
            ("no_slot", "true"),
        ] {
            cfg.set(k, v).unwrap();
        }
        assert_eq!(RunConfig::from_text(&cfg.emit()).unwrap(), cfg);
        assert_eq!(RunConfig::from_text(&RunConfig::default().emit()).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("nonsense", "1"), Err(CliError::Config(_))));
        assert!(matches!(cfg.set("bench_reps", "many"), Err(CliError::Config(_))));
        assert!(matches!(cfg.set("suite", "grad,bogus"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_text("lr 0.1"), Err(CliError::Config(_))));
    }

    #[test]
    fn overrides_accept_both_spellings() {
        let args: Vec<String> = ["--epochs", "0", "--bench-reps=3"].iter().map(|s| s.to_string()).collect();
        let pairs = parse_overrides(&args).unwrap();
        assert_eq!(pairs, vec![("epochs".into(), "0".into()), ("bench_reps".into(), "3".into())]);
        assert!(parse_overrides(&["stray".to_string()]).is_err());
        assert!(parse_overrides(&["--lr".to_string()]).is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = RunConfig::default();
        let keys: Vec<&str> = cfg.to_pairs().iter().map(|(k, _)| *k).collect();
        assert_eq!(keys, RunConfig::keys());
        let mut copy = RunConfig::default();
        for (k, v) in cfg.to_pairs() {
            copy.set(k, &v).unwrap();
        }
        assert_eq!(copy, cfg);
    }
}
