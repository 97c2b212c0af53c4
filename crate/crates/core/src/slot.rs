//! Slot-aware structure encoding: per-type projection into type slots,
//! slot alignment, decayed retention across slots, semantic-attention
//! fusion and GCN smoothing.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{gcn_aggregate, GraphTensors};
use crate::params::{ParamId, ParamStore};

const NORM_EPS: f64 = 1e-5;
const SLOT_GAMMA_INIT: f64 = 0.9;
const SLOT_ALPHA_INIT: f64 = 0.1;

/// How slot rows of a node are mixed with each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotMixing {
    /// `((QKᵀ) ⊙ D) V` with a learnable decay across slots.
    Retention,
    /// `softmax(QKᵀ/√d) V` over all slots.
    Attention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotConfig {
    pub hidden: usize,
    pub feature_dims: Vec<usize>,
    pub attn_dim: usize,
    /// GCN propagation steps after fusion.
    pub layers: usize,
    /// When false the whole slot pipeline and GCN are replaced by the plain
    /// per-type projection.
    pub use_slots: bool,
    pub align: bool,
    pub mixing: SlotMixing,
}

impl SlotConfig {
    pub fn num_types(&self) -> usize {
        self.feature_dims.len()
    }
}

#[derive(Clone, Debug)]
pub struct SlotParams {
    pub w_type: Vec<ParamId>,
    pub u: Vec<ParamId>,
    pub b: Vec<ParamId>,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// Unconstrained decay; the effective decay is its sigmoid.
    pub gamma_raw: ParamId,
    pub alpha: ParamId,
    pub w_a: ParamId,
    pub b_a: ParamId,
    pub p: ParamId,
}

impl SlotParams {
    pub fn init(store: &mut ParamStore, cfg: &SlotConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        let w_type = cfg
            .feature_dims
            .iter()
            .enumerate()
            .map(|(t, &dt)| store.glorot(format!("slot.proj{t}"), dt, d, rng))
            .collect();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for s in 0..cfg.num_types() {
            u.push(store.glorot(format!("slot.align{s}.u"), d, d, rng));
            // An empty slot aligns to LN(b); a zero bias would put every
            // empty slot at the zero-variance point of the norm.
            b.push(store.uniform(format!("slot.align{s}.b"), &[d], 1.0, rng));
        }
        let wq = store.glorot("slot.wq", d, d, rng);
        let wk = store.glorot("slot.wk", d, d, rng);
        let wv = store.glorot("slot.wv", d, d, rng);
        let raw = (SLOT_GAMMA_INIT / (1.0 - SLOT_GAMMA_INIT)).ln();
        let gamma_raw = store.full("slot.gamma_raw", &[1], raw);
        let alpha = store.full("slot.alpha", &[1], SLOT_ALPHA_INIT);
        let w_a = store.glorot("slot.attn.w", d, cfg.attn_dim, rng);
        let b_a = store.full("slot.attn.b", &[cfg.attn_dim], 0.0);
        let p = store.glorot("slot.attn.query", cfg.attn_dim, 1, rng);
        SlotParams {
            w_type,
            u,
            b,
            wq,
            wk,
            wv,
            gamma_raw,
            alpha,
            w_a,
            b_a,
            p,
        }
    }
}

/// Intermediate slot tensors, for inspection and tests.
#[derive(Clone, Debug)]
pub struct SlotTrace {
    /// `[N, C, d]` before alignment.
    pub slots: Var,
    pub aligned: Var,
    pub retained: Var,
    /// `[N, C]` fusion weights.
    pub weights: Var,
    /// `[N, d]` fused embedding before GCN smoothing.
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct StructureOutput {
    /// `[N, d]`.
    pub encoded: Var,
    pub trace: Option<SlotTrace>,
}

/// `H_t = X_t W_t` for each type.
pub fn project_types(tape: &mut Tape, features: &[Var], weights: &[Var]) -> Result<Vec<Var>> {
    if features.len() != weights.len() {
        return Err(Error::Validation(format!(
            "{} feature matrices for {} type projections",
            features.len(),
            weights.len()
        )));
    }
    features
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(t, (&x, &w))| {
            let (sx, sw) = (tape.shape(x), tape.shape(w));
            if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
                return Err(Error::Validation(format!(
                    "type {t}: features {sx:?} do not fit projection {sw:?}"
                )));
            }
            tape.matmul(x, w)
        })
        .collect()
}

/// Places each node's projected row in the slot of its type; every other
/// slot row is zero. Output is `[N, C, d]`.
pub fn build_slots(tape: &mut Tape, projected: &[Var], slot_rows: &[Vec<Option<usize>>]) -> Result<Var> {
    let per_slot = slot_columns(tape, projected, slot_rows)?;
    tape.stack_mid(&per_slot)
}

fn slot_columns(tape: &mut Tape, projected: &[Var], slot_rows: &[Vec<Option<usize>>]) -> Result<Vec<Var>> {
    if projected.len() != slot_rows.len() {
        return Err(Error::Validation(format!(
            "{} projections for {} slots",
            projected.len(),
            slot_rows.len()
        )));
    }
    let n = slot_rows.first().map_or(0, Vec::len);
    for v in 0..n {
        let covered = slot_rows.iter().filter(|rows| rows[v].is_some()).count();
        if covered != 1 {
            return Err(Error::Validation(format!("node {v} occupies {covered} slots")));
        }
    }
    projected
        .iter()
        .zip(slot_rows)
        .map(|(&h, rows)| tape.gather_rows(h, rows))
        .collect()
}

/// `GeLU(LN(x_s U_s + b_s))` per slot, with an affine-free layer norm.
pub fn align_slots(tape: &mut Tape, slots: Var, u: &[Var], b: &[Var]) -> Result<Var> {
    let c = tape.shape(slots).get(1).copied().unwrap_or(0);
    if u.len() != c || b.len() != c {
        return Err(Error::shape("align_slots", tape.shape(slots), &[u.len(), b.len()]));
    }
    let mut out = Vec::with_capacity(c);
    for s in 0..c {
        let x = tape.select_mid(slots, s)?;
        let y = tape.linear(x, u[s], Some(b[s]))?;
        let y = tape.layer_norm(y, None, None, NORM_EPS)?;
        out.push(tape.gelu(y)?);
    }
    tape.stack_mid(&out)
}

/// `x + α·((QKᵀ) ⊙ D) V` per node over its `C` slot rows, where
/// `D[s1,s2] = γ^(s1−s2)` below the diagonal and `gamma` is a one-element
/// variable already in `(0, 1)`.
pub fn slot_retention(tape: &mut Tape, x: Var, wq: Var, wk: Var, wv: Var, gamma: Var, alpha: Var) -> Result<Var> {
    let c = slot_count(tape, x, "slot_retention")?;
    let (q, k, v) = (tape.matmul(x, wq)?, tape.matmul(x, wk)?, tape.matmul(x, wv)?);
    let scores = tape.bmm(q, k, true)?;
    let decay = tape.decay_kernel(gamma, c)?;
    let scores = tape.mul_bcast(scores, decay)?;
    let mixed = tape.bmm(scores, v, false)?;
    let mixed = tape.scale_var(mixed, alpha)?;
    tape.add(x, mixed)
}

/// `x + α·softmax(QKᵀ/√d) V` per node over its slot rows.
pub fn slot_attention(tape: &mut Tape, x: Var, wq: Var, wk: Var, wv: Var, alpha: Var) -> Result<Var> {
    slot_count(tape, x, "slot_attention")?;
    let d = tape.shape(wq)[1] as f64;
    let (q, k, v) = (tape.matmul(x, wq)?, tape.matmul(x, wk)?, tape.matmul(x, wv)?);
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / d.sqrt())?;
    let attn = tape.softmax(scores)?;
    let mixed = tape.bmm(attn, v, false)?;
    let mixed = tape.scale_var(mixed, alpha)?;
    tape.add(x, mixed)
}

fn slot_count(tape: &Tape, x: Var, op: &'static str) -> Result<usize> {
    match tape.shape(x) {
        [_, c, _] if *c >= 1 => Ok(*c),
        s => Err(Error::Rank { op, shape: s.to_vec() }),
    }
}

/// Semantic attention over slots: `β = softmax_s(pᵀ tanh(W_a h_s + b_a))`,
/// fused `= Σ_s β_s h_s`. Returns `([N, d] fused, [N, C] weights)`.
pub fn fuse_slots(tape: &mut Tape, x: Var, w_a: Var, b_a: Var, p: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let [n, c, d] = shape[..] else {
        return Err(Error::Rank {
            op: "fuse_slots",
            shape,
        });
    };
    let s = tape.linear(x, w_a, Some(b_a))?;
    let s = tape.tanh(s)?;
    let scores = tape.matmul(s, p)?;
    let scores = tape.reshape(scores, &[n, c])?;
    let weights = tape.softmax(scores)?;
    let w3 = tape.reshape(weights, &[n, 1, c])?;
    let fused = tape.bmm(w3, x, false)?;
    let fused = tape.reshape(fused, &[n, d])?;
    Ok((fused, weights))
}

/// Runs the full structure encoder. `vars` are the bound parameters of the
/// store the `params` ids refer to.
pub fn encode_structure(
    tape: &mut Tape,
    vars: &[Var],
    params: &SlotParams,
    cfg: &SlotConfig,
    inputs: &GraphTensors,
) -> Result<StructureOutput> {
    let v = |id: ParamId| vars[id.index()];
    let features: Vec<Var> = inputs.features.iter().map(|t| tape.constant(t.clone())).collect();
    let w_type: Vec<Var> = params.w_type.iter().map(|&id| v(id)).collect();
    let projected = project_types(tape, &features, &w_type)?;

    if !cfg.use_slots {
        let columns = slot_columns(tape, &projected, &inputs.slot_rows)?;
        let mut encoded = columns[0];
        for &col in &columns[1..] {
            encoded = tape.add(encoded, col)?;
        }
        return Ok(StructureOutput { encoded, trace: None });
    }

    let slots = build_slots(tape, &projected, &inputs.slot_rows)?;
    let aligned = if cfg.align {
        let u: Vec<Var> = params.u.iter().map(|&id| v(id)).collect();
        let b: Vec<Var> = params.b.iter().map(|&id| v(id)).collect();
        align_slots(tape, slots, &u, &b)?
    } else {
        slots
    };
    let retained = match cfg.mixing {
        SlotMixing::Retention => {
            let gamma = tape.sigmoid(v(params.gamma_raw))?;
            slot_retention(tape, aligned, v(params.wq), v(params.wk), v(params.wv), gamma, v(params.alpha))?
        }
        SlotMixing::Attention => slot_attention(tape, aligned, v(params.wq), v(params.wk), v(params.wv), v(params.alpha))?,
    };
    let (fused, weights) = fuse_slots(tape, retained, v(params.w_a), v(params.b_a), v(params.p))?;
    let encoded = gcn_aggregate(tape, &inputs.adj, fused, cfg.layers)?;
    Ok(StructureOutput {
        encoded,
        trace: Some(SlotTrace {
            slots,
            aligned,
            retained,
            weights,
            fused,
        }),
    })
}
