//! Multi-scale retention over token sequences: rotary relative positions,
//! decay masks, type-aware scores, the pre-norm layer, and a recurrent
//! reference implementation.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{RotationTable, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_nt_raw, matmul_raw, Tensor};

const NORM_EPS: f64 = 1e-5;
const ROTATION_BASE: f64 = 10000.0;

/// Per-head decays `1 − exp(linspace(ln 1/32, ln 1/512, h))`.
pub fn gamma_schedule(heads: usize) -> Vec<f64> {
    let (lo, hi) = ((1.0f64 / 32.0).ln(), (1.0f64 / 512.0).ln());
    (0..heads)
        .map(|i| {
            let t = if heads == 1 { 0.0 } else { i as f64 / (heads - 1) as f64 };
            1.0 - (lo + t * (hi - lo)).exp()
        })
        .collect()
}

/// Rotation frequencies `θ_j = 10000^(−2j/width)` for each full feature pair.
pub fn rotation_thetas(width: usize) -> Vec<f64> {
    (0..width / 2)
        .map(|j| ROTATION_BASE.powf(-2.0 * j as f64 / width as f64))
        .collect()
}

pub fn rotation_table(positions: usize, width: usize) -> Arc<RotationTable> {
    Arc::new(RotationTable::new(positions, &rotation_thetas(width)))
}

/// Rotates feature pair `j` at position `n` by `nθ_j`.
///
/// Queries and keys both get the forward rotation; their real inner product
/// then carries the relative phase `(n − m)θ_j`, which is the real part of
/// the complex query times the conjugated complex key. Decay is not applied
/// here; it lives in the decay mask.
pub fn xpos_modulate(tape: &mut Tape, x: Var, table: &Arc<RotationTable>) -> Result<Var> {
    let width = tape.shape(x).last().copied().unwrap_or(0);
    if width % 2 != 0 {
        return Err(Error::shape("xpos_modulate", tape.shape(x), &[table.positions, 2 * table.pairs]));
    }
    tape.rotate(x, table)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::Range(format!("decay {gamma} outside (0, 1)")))
    }
}

/// `D[n,m] = γ^(n−m)` for `n ≥ m`, zero above the diagonal and on every
/// row or column whose position is not `valid`.
pub fn decay_mask(gamma: f64, valid: &[bool]) -> Result<Tensor> {
    check_gamma(gamma)?;
    let l = valid.len();
    let mut data = vec![0.0; l * l];
    for n in 0..l {
        if !valid[n] {
            continue;
        }
        for m in 0..=n {
            if valid[m] {
                data[n * l + m] = gamma.powi((n - m) as i32);
            }
        }
    }
    Tensor::new(&[l, l], data)
}

/// Stacked [`decay_mask`]s, `[B, L, L]`.
pub fn decay_masks(gamma: f64, valid: &[Vec<bool>]) -> Result<Tensor> {
    let l = valid.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(valid.len() * l * l);
    for row in valid {
        if row.len() != l {
            return Err(Error::shape("decay_masks", &[l], &[row.len()]));
        }
        data.extend_from_slice(decay_mask(gamma, row)?.data());
    }
    Tensor::new(&[valid.len(), l, l], data)
}

/// Recurrent form of one retention head over a single sequence:
/// `S_n = γ S_{n−1} + k_nᵀ v_n`, `out_n = q_n S_n`, with `q`, `k` the
/// rotated projections of `h`.
pub fn retention_recurrent(
    h: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    gamma: f64,
    table: &RotationTable,
) -> Result<Tensor> {
    check_gamma(gamma)?;
    let (l, d) = match h.shape() {
        &[l, d] => (l, d),
        s => return Err(Error::shape("retention_recurrent", s, wq.shape())),
    };
    let dh = wq.shape()[1];
    if wq.shape() != [d, dh] || wk.shape() != [d, dh] || wv.shape() != [d, dh] {
        return Err(Error::shape("retention_recurrent", h.shape(), wq.shape()));
    }
    let mut q = matmul_raw(h.data(), wq.data(), l, d, dh);
    let mut k = matmul_raw(h.data(), wk.data(), l, d, dh);
    let v = matmul_raw(h.data(), wv.data(), l, d, dh);
    table.apply(&mut q, dh, 1.0);
    table.apply(&mut k, dh, 1.0);

    let mut state = vec![0.0; dh * dh];
    let mut out = vec![0.0; l * dh];
    for n in 0..l {
        let (qn, kn, vn) = (&q[n * dh..(n + 1) * dh], &k[n * dh..(n + 1) * dh], &v[n * dh..(n + 1) * dh]);
        for a in 0..dh {
            for b in 0..dh {
                state[a * dh + b] = gamma * state[a * dh + b] + kn[a] * vn[b];
            }
        }
        let row = matmul_raw(qn, &state, 1, dh, dh);
        out[n * dh..(n + 1) * dh].copy_from_slice(&row);
    }
    Tensor::new(&[l, dh], out)
}

/// How tokens of a sequence are mixed inside a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceMixing {
    /// Scores masked by the causal decay matrix.
    Retention,
    /// Scaled softmax over all non-padded tokens.
    Attention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_types: usize,
    pub beta_t: f64,
    /// Apply the positional rotation to type queries/keys as well.
    pub type_xpos: bool,
    pub mixing: SequenceMixing,
}

impl RetentionConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Divisibility {
                op: "multi-scale retention",
                extent: self.hidden,
                by: self.heads,
            });
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head dimension {} must be even for pairwise rotation",
                self.head_dim()
            )));
        }
        if !(self.beta_t >= 0.0 && self.beta_t.is_finite()) {
            return Err(Error::Config(format!("beta_t must be finite and >= 0, got {}", self.beta_t)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wtq: Vec<ParamId>,
    pub wtk: Vec<ParamId>,
    pub w_g: ParamId,
    pub w_o: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub ln_t: (ParamId, ParamId),
}

impl LayerParams {
    pub fn init(store: &mut ParamStore, cfg: &RetentionConfig, layer: usize, rng: &mut ChaCha8Rng) -> Self {
        let (d, dh, c) = (cfg.hidden, cfg.head_dim(), cfg.num_types);
        let p = |name: &str| format!("layer{layer}.{name}");
        let mut heads: [Vec<ParamId>; 5] = Default::default();
        for i in 0..cfg.heads {
            heads[0].push(store.glorot(p(&format!("head{i}.wq")), d, dh, rng));
            heads[1].push(store.glorot(p(&format!("head{i}.wk")), d, dh, rng));
            heads[2].push(store.glorot(p(&format!("head{i}.wv")), d, dh, rng));
            heads[3].push(store.glorot(p(&format!("head{i}.wtq")), c, c, rng));
            heads[4].push(store.glorot(p(&format!("head{i}.wtk")), c, c, rng));
        }
        let [wq, wk, wv, wtq, wtk] = heads;
        let w_g = store.glorot(p("gate"), d, d, rng);
        let w_o = store.glorot(p("out"), d, d, rng);
        let w1 = store.glorot(p("ffn1"), d, cfg.ffn_dim, rng);
        let w2 = store.glorot(p("ffn2"), cfg.ffn_dim, d, rng);
        let mut ln = |name: &str, width: usize| {
            (
                store.full(p(&format!("{name}.gain")), &[width], 1.0),
                store.full(p(&format!("{name}.bias")), &[width], 0.0),
            )
        };
        let ln1 = ln("ln1", d);
        let ln2 = ln("ln2", d);
        let ln_t = ln("ln_type", c);
        LayerParams {
            wq,
            wk,
            wv,
            wtq,
            wtk,
            w_g,
            w_o,
            w1,
            w2,
            ln1,
            ln2,
            ln_t,
        }
    }
}

/// Per-batch masks and rotation tables shared by every layer.
#[derive(Clone, Debug)]
pub struct SequenceContext {
    pub batch: usize,
    pub len: usize,
    /// One `[B, L, L]` decay mask per head.
    pub decay: Vec<Tensor>,
    /// Attention keep-mask, `B·L·L` entries; only built for attention
    /// mixing.
    pub keep: Vec<bool>,
    pub node_table: Arc<RotationTable>,
    pub type_table: Arc<RotationTable>,
}

impl SequenceContext {
    /// `valid[b][n]` is false at padded positions.
    pub fn new(cfg: &RetentionConfig, valid: &[Vec<bool>]) -> Result<Self> {
        let batch = valid.len();
        let len = valid.first().map_or(0, Vec::len);
        if len == 0 {
            return Err(Error::EmptyAxis { op: "sequence batch" });
        }
        let decay = match cfg.mixing {
            SequenceMixing::Retention => gamma_schedule(cfg.heads)
                .into_iter()
                .map(|g| decay_masks(g, valid))
                .collect::<Result<_>>()?,
            SequenceMixing::Attention => Vec::new(),
        };
        let keep = match cfg.mixing {
            SequenceMixing::Retention => Vec::new(),
            SequenceMixing::Attention => valid
                .iter()
                .flat_map(|row| (0..len).flat_map(move |n| (0..len).map(move |m| row[n] && row[m])))
                .collect(),
        };
        Ok(SequenceContext {
            batch,
            len,
            decay,
            keep,
            node_table: rotation_table(len, cfg.head_dim()),
            type_table: rotation_table(len, if cfg.type_xpos { cfg.num_types } else { 0 }),
        })
    }
}

/// One retention head over a batch `x[B, L, d]` with the node projections
/// of that head; `mask` is the constant `[B, L, L]` decay mask.
pub fn retention_parallel(
    tape: &mut Tape,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    table: &Arc<RotationTable>,
    mask: Var,
) -> Result<Var> {
    let scores = content_scores(tape, x, wq, wk, table)?;
    let v = tape.matmul(x, wv)?;
    let masked = tape.mul(scores, mask)?;
    tape.bmm(masked, v, false)
}

fn content_scores(tape: &mut Tape, x: Var, wq: Var, wk: Var, table: &Arc<RotationTable>) -> Result<Var> {
    let q = tape.matmul(x, wq)?;
    let q = xpos_modulate(tape, q, table)?;
    let k = tape.matmul(x, wk)?;
    let k = xpos_modulate(tape, k, table)?;
    tape.bmm(q, k, true)
}

/// Type-aware scores `β·Q_T K_Tᵀ` from type tokens `t[B, L, C]`.
fn type_scores(tape: &mut Tape, t: Var, wtq: Var, wtk: Var, beta: f64, table: &Arc<RotationTable>) -> Result<Var> {
    let c = tape.shape(t).last().copied().unwrap_or(0);
    if tape.shape(wtq) != [c, c] || tape.shape(wtk) != [c, c] {
        return Err(Error::shape("type scores", tape.shape(t), tape.shape(wtq)));
    }
    let mut q = tape.matmul(t, wtq)?;
    let mut k = tape.matmul(t, wtk)?;
    if table.pairs > 0 {
        q = tape.rotate(q, table)?;
        k = tape.rotate(k, table)?;
    }
    let s = tape.bmm(q, k, true)?;
    tape.scale(s, beta)
}

/// Heterogeneous retention head: `((QKᵀ + β_T Q_T K_Tᵀ) ⊙ D) V`, or its
/// softmax-attention counterpart. With `β_T = 0` the type branch is not
/// recorded at all, so the result is exactly that of
/// [`retention_parallel`].
#[allow(clippy::too_many_arguments)]
pub fn he_retention(
    tape: &mut Tape,
    cfg: &RetentionConfig,
    ctx: &SequenceContext,
    head: usize,
    x: Var,
    t: Var,
    w: [Var; 5],
) -> Result<Var> {
    let [wq, wk, wv, wtq, wtk] = w;
    let mut scores = content_scores(tape, x, wq, wk, &ctx.node_table)?;
    if cfg.beta_t != 0.0 {
        let ts = type_scores(tape, t, wtq, wtk, cfg.beta_t, &ctx.type_table)?;
        scores = tape.add(scores, ts)?;
    }
    let v = tape.matmul(x, wv)?;
    let mixed = match cfg.mixing {
        SequenceMixing::Retention => {
            let mask = tape.constant(ctx.decay[head].clone());
            tape.mul(scores, mask)?
        }
        SequenceMixing::Attention => {
            let scaled = tape.scale(scores, 1.0 / (cfg.head_dim() as f64).sqrt())?;
            tape.softmax_masked(scaled, &ctx.keep)?
        }
    };
    tape.bmm(mixed, v, false)
}

/// Multi-scale retention: heads with distinct decays, concatenated, group
/// normalized per head, gated by `swish(x W_G)` and projected by `W_O`.
pub fn msr(
    tape: &mut Tape,
    vars: &[Var],
    p: &LayerParams,
    cfg: &RetentionConfig,
    ctx: &SequenceContext,
    x: Var,
    t: Var,
) -> Result<Var> {
    let v = |id: ParamId| vars[id.index()];
    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let w = [v(p.wq[i]), v(p.wk[i]), v(p.wv[i]), v(p.wtq[i]), v(p.wtk[i])];
        heads.push(he_retention(tape, cfg, ctx, i, x, t, w)?);
    }
    let y = tape.concat_last(&heads)?;
    let y = tape.group_norm(y, cfg.heads, NORM_EPS)?;
    let gate = tape.matmul(x, v(p.w_g))?;
    let gate = tape.swish(gate)?;
    let y = tape.mul(gate, y)?;
    tape.matmul(y, v(p.w_o))
}

/// `Y = MSR(LN(H), LN(H_T)) + H`, `H' = FFN(LN(Y)) + Y` with
/// `FFN(X) = GeLU(X W1) W2`.
pub fn hesrn_layer(
    tape: &mut Tape,
    vars: &[Var],
    p: &LayerParams,
    cfg: &RetentionConfig,
    ctx: &SequenceContext,
    h: Var,
    t: Var,
) -> Result<Var> {
    let v = |id: ParamId| vars[id.index()];
    let x = tape.layer_norm(h, Some(v(p.ln1.0)), Some(v(p.ln1.1)), NORM_EPS)?;
    let xt = tape.layer_norm(t, Some(v(p.ln_t.0)), Some(v(p.ln_t.1)), NORM_EPS)?;
    let m = msr(tape, vars, p, cfg, ctx, x, xt)?;
    let y = tape.add(m, h)?;
    let z = tape.layer_norm(y, Some(v(p.ln2.0)), Some(v(p.ln2.1)), NORM_EPS)?;
    let z = tape.matmul(z, v(p.w1))?;
    let z = tape.gelu(z)?;
    let z = tape.matmul(z, v(p.w2))?;
    tape.add(z, y)
}

/// Single-head softmax self-attention over all `N` rows of `x[N, d]`,
/// materializing the full `N × N` score matrix. Used as the quadratic
/// reference in benchmarks.
pub fn full_attention(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    let (n, d) = match x.shape() {
        &[n, d] => (n, d),
        s => return Err(Error::shape("full_attention", s, wq.shape())),
    };
    let dk = wq.shape()[1];
    let q = matmul_raw(x.data(), wq.data(), n, d, dk);
    let k = matmul_raw(x.data(), wk.data(), n, d, dk);
    let v = matmul_raw(x.data(), wv.data(), n, d, dk);
    let mut scores = matmul_nt_raw(&q, &k, n, dk, n);
    let scale = 1.0 / (dk as f64).sqrt();
    scores.iter_mut().for_each(|s| *s *= scale);
    crate::tensor::softmax_rows_inplace(&mut scores, n);
    Tensor::new(&[n, dk], matmul_raw(&scores, &v, n, n, dk))
}
