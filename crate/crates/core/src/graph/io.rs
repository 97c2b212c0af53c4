//! Line-oriented text format for heterogeneous graphs.
//!
//! ```text
//! HGRAPH v1 N=3 C=2 TARGET=0
//! T 0 paper 2
//! T 1 author 1
//! N 0 0 0.5 1.0
//! N 1 0 -0.25 2.0
//! N 2 1 3.0
//! E 0 2 1
//! L 0 1
//! S train 0
//! ```
//!
//! Blank lines and lines starting with `#` are skipped.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{Edge, GraphParts, HeteroGraph, Label, NodeType};
use crate::error::{Error, Result};

pub fn load_graph(path: impl AsRef<Path>) -> Result<HeteroGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text)
}

pub fn save_graph(g: &HeteroGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_graph(g)).map_err(|e| Error::io(path, e))
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn num<T: FromStr>(line: usize, tok: Option<&str>, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| perr(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| perr(line, format!("invalid {what} {tok:?}")))
}

fn header_field(line: usize, tok: Option<&str>, key: &str) -> Result<usize> {
    let tok = tok.ok_or_else(|| perr(line, format!("missing {key}=")))?;
    let value = tok
        .strip_prefix(key)
        .and_then(|s| s.strip_prefix('='))
        .ok_or_else(|| perr(line, format!("expected {key}=<int>, got {tok:?}")))?;
    num(line, Some(value), key)
}

pub fn parse_graph(text: &str) -> Result<HeteroGraph> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hl, header) = lines.next().ok_or_else(|| perr(1, "empty file"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("HGRAPH") || toks.next() != Some("v1") {
        return Err(perr(hl, "expected header `HGRAPH v1 N=.. C=.. TARGET=..`"));
    }
    let n = header_field(hl, toks.next(), "N")?;
    let c = header_field(hl, toks.next(), "C")?;
    let target_type = header_field(hl, toks.next(), "TARGET")?;
    if toks.next().is_some() {
        return Err(perr(hl, "trailing tokens in header"));
    }

    let mut types: Vec<Option<NodeType>> = vec![None; c];
    let mut node_type: Vec<Option<usize>> = vec![None; n];
    let mut node_features = vec![Vec::new(); n];
    let mut edges = Vec::new();
    let mut labels = vec![None; n];
    let mut parts = GraphParts::default();

    for (ln, line) in lines {
        let mut toks = line.split_whitespace();
        let kind = toks.next().unwrap_or_default();
        match kind {
            "T" => {
                let idx: usize = num(ln, toks.next(), "type index")?;
                let name = toks.next().ok_or_else(|| perr(ln, "missing type name"))?;
                let feature_dim = num(ln, toks.next(), "feature dimension")?;
                let slot = types
                    .get_mut(idx)
                    .ok_or_else(|| perr(ln, format!("type index {idx} >= C={c}")))?;
                if slot.is_some() {
                    return Err(perr(ln, format!("type {idx} declared twice")));
                }
                *slot = Some(NodeType {
                    name: name.to_string(),
                    feature_dim,
                });
            }
            "N" => {
                let id: usize = num(ln, toks.next(), "node id")?;
                let t: usize = num(ln, toks.next(), "node type")?;
                if id >= n {
                    return Err(perr(ln, format!("node id {id} >= N={n}")));
                }
                if node_type[id].is_some() {
                    return Err(perr(ln, format!("node {id} declared twice")));
                }
                let feats = toks
                    .map(|tok| {
                        let v: f64 = num(ln, Some(tok), "feature")?;
                        if v.is_finite() {
                            Ok(v)
                        } else {
                            Err(perr(ln, format!("non-finite feature {tok:?}")))
                        }
                    })
                    .collect::<Result<Vec<f64>>>()?;
                node_type[id] = Some(t);
                node_features[id] = feats;
                continue;
            }
            "E" => {
                edges.push(Edge {
                    src: num(ln, toks.next(), "edge source")?,
                    dst: num(ln, toks.next(), "edge target")?,
                    etype: num(ln, toks.next(), "edge type")?,
                });
            }
            "L" => {
                let id: usize = num(ln, toks.next(), "node id")?;
                if id >= n {
                    return Err(perr(ln, format!("label for node {id} >= N={n}")));
                }
                let first = toks.next().ok_or_else(|| perr(ln, "missing label"))?;
                let label = if first == "m" {
                    let bits = toks
                        .by_ref()
                        .map(|b| match b {
                            "0" => Ok(false),
                            "1" => Ok(true),
                            other => Err(perr(ln, format!("invalid label bit {other:?}"))),
                        })
                        .collect::<Result<Vec<bool>>>()?;
                    if bits.is_empty() {
                        return Err(perr(ln, "multi-label line without bits"));
                    }
                    Label::Multi(bits)
                } else {
                    Label::Class(num(ln, Some(first), "class")?)
                };
                if labels[id].is_some() {
                    return Err(perr(ln, format!("node {id} labeled twice")));
                }
                labels[id] = Some(label);
            }
            "S" => {
                let which = toks.next().ok_or_else(|| perr(ln, "missing split name"))?;
                let ids = toks
                    .by_ref()
                    .map(|tok| num(ln, Some(tok), "node id"))
                    .collect::<Result<Vec<usize>>>()?;
                match which {
                    "train" => parts.splits.train.extend(ids),
                    "val" => parts.splits.val.extend(ids),
                    "test" => parts.splits.test.extend(ids),
                    other => return Err(perr(ln, format!("unknown split {other:?}"))),
                }
            }
            other => return Err(perr(ln, format!("unknown record kind {other:?}"))),
        }
        if toks.next().is_some() {
            return Err(perr(ln, "trailing tokens"));
        }
    }

    parts.types = types
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| Error::Validation(format!("type {i} never declared"))))
        .collect::<Result<_>>()?;
    parts.node_type = node_type
        .into_iter()
        .enumerate()
        .map(|(v, t)| t.ok_or_else(|| Error::Validation(format!("node {v} never declared"))))
        .collect::<Result<_>>()?;
    parts.node_features = node_features;
    parts.edges = edges;
    parts.labels = labels;
    parts.target_type = target_type;
    HeteroGraph::new(parts)
}

/// Serializes a graph; floats use the shortest representation that parses
/// back to the same value.
pub fn write_graph(g: &HeteroGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "HGRAPH v1 N={} C={} TARGET={}",
        g.num_nodes(),
        g.num_types(),
        g.target_type()
    );
    for (i, t) in g.types().iter().enumerate() {
        let _ = writeln!(out, "T {i} {} {}", t.name, t.feature_dim);
    }
    for v in 0..g.num_nodes() {
        let _ = write!(out, "N {v} {}", g.node_type(v));
        for x in g.feature_row(v) {
            let _ = write!(out, " {x}");
        }
        out.push('\n');
    }
    for e in g.edges() {
        let _ = writeln!(out, "E {} {} {}", e.src, e.dst, e.etype);
    }
    for (v, l) in g.labels().iter().enumerate() {
        match l {
            Some(Label::Class(c)) => {
                let _ = writeln!(out, "L {v} {c}");
            }
            Some(Label::Multi(bits)) => {
                let _ = write!(out, "L {v} m");
                for &b in bits {
                    out.push_str(if b { " 1" } else { " 0" });
                }
                out.push('\n');
            }
            None => {}
        }
    }
    let s = g.splits();
    for (name, ids) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        if ids.is_empty() {
            continue;
        }
        out.push_str("S ");
        out.push_str(name);
        for id in ids {
            let _ = write!(out, " {id}");
        }
        out.push('\n');
    }
    out
}
