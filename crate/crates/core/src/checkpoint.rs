//! Text checkpoints holding the model configuration and every parameter.
//!
//! ```text
//! HESRN-CHECKPOINT v1
//! config hidden=256
//! ...
//! feature_dims 8 8 8
//! num_classes 3
//! param slot.proj0 8 256
//! 0.0123 -0.4 ...
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{HeSRN, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &str = "HESRN-CHECKPOINT v1";

pub fn write_checkpoint(model: &HeSRN) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    for (k, v) in model.config().to_pairs() {
        let _ = writeln!(out, "config {k}={v}");
    }
    out.push_str("feature_dims");
    for d in model.feature_dims() {
        let _ = write!(out, " {d}");
    }
    let _ = writeln!(out, "\nnum_classes {}", model.num_classes());
    for (name, t) in model.params().iter() {
        let _ = write!(out, "param {name}");
        for d in t.shape() {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        let mut first = true;
        for x in t.data() {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{x}");
        }
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn parse_checkpoint(text: &str) -> Result<HeSRN> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("missing checkpoint header"));
    }
    let mut config = ModelConfig::default();
    let mut line = lines.next().ok_or_else(|| bad("truncated checkpoint"))?;
    while let Some(kv) = line.strip_prefix("config ") {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("malformed config line {line:?}")))?;
        config.set(k, v).map_err(|e| bad(e.to_string()))?;
        line = lines.next().ok_or_else(|| bad("truncated checkpoint"))?;
    }
    let feature_dims = line
        .strip_prefix("feature_dims")
        .ok_or_else(|| bad("missing feature_dims"))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad(format!("bad feature dim {t:?}"))))
        .collect::<Result<Vec<usize>>>()?;
    let num_classes = lines
        .next()
        .and_then(|l| l.strip_prefix("num_classes "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing num_classes"))?;
    let mut model = HeSRN::new(config, feature_dims, num_classes).map_err(|e| bad(e.to_string()))?;

    let names = model.params().names().to_vec();
    let mut tensors = Vec::with_capacity(names.len());
    for expected in &names {
        let header = lines.next().ok_or_else(|| bad("truncated parameter list"))?;
        let mut toks = header.split_whitespace();
        if toks.next() != Some("param") {
            return Err(bad(format!("expected parameter header, got {header:?}")));
        }
        let name = toks.next().unwrap_or_default();
        if name != expected {
            return Err(bad(format!("expected parameter {expected}, found {name}")));
        }
        let shape = toks
            .map(|t| t.parse().map_err(|_| bad(format!("bad extent {t:?} for {name}"))))
            .collect::<Result<Vec<usize>>>()?;
        let data = lines
            .next()
            .ok_or_else(|| bad(format!("missing values for {name}")))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(format!("bad value {t:?} in {name}"))))
            .collect::<Result<Vec<f64>>>()?;
        tensors.push(Tensor::new(&shape, data).map_err(|e| bad(format!("{name}: {e}")))?);
    }
    if lines.next() != Some("end") {
        return Err(bad("missing end marker"));
    }
    model.params_mut().set_all(tensors).map_err(|e| bad(e.to_string()))?;
    Ok(model)
}

pub fn save_checkpoint(model: &HeSRN, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<HeSRN> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}
