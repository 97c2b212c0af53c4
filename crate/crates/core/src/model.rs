//! Model configuration and the assembled network.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{gcn_aggregate_values, GraphTensors};
use crate::params::{ParamId, ParamStore};
use crate::retention::{hesrn_layer, LayerParams, RetentionConfig, SequenceContext, SequenceMixing};
use crate::slot::{encode_structure, SlotConfig, SlotMixing, SlotParams, StructureOutput};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Multiclass,
    Multilabel,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Multiclass => "multiclass",
            LossMode::Multilabel => "multilabel",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiclass" => Ok(LossMode::Multiclass),
            "multilabel" => Ok(LossMode::Multilabel),
            other => Err(Error::Config(format!("unknown loss_mode {other:?}"))),
        }
    }
}

/// Component switches used for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    pub no_slot: bool,
    pub no_slot_alignment: bool,
    pub no_slot_retention: bool,
    pub no_he_retention: bool,
    pub no_retentive: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 5] = [
        "no_slot",
        "no_slot_alignment",
        "no_slot_retention",
        "no_he_retention",
        "no_retentive",
    ];

    /// The variant with exactly the named component switched off.
    pub fn single(name: &str) -> Result<Self> {
        let mut a = Ablations::default();
        *a.flag_mut(name).ok_or_else(|| Error::Config(format!("unknown ablation {name:?}")))? = true;
        Ok(a)
    }

    fn flag_mut(&mut self, name: &str) -> Option<&mut bool> {
        match name {
            "no_slot" => Some(&mut self.no_slot),
            "no_slot_alignment" => Some(&mut self.no_slot_alignment),
            "no_slot_retention" => Some(&mut self.no_slot_retention),
            "no_he_retention" => Some(&mut self.no_he_retention),
            "no_retentive" => Some(&mut self.no_retentive),
            _ => None,
        }
    }

    fn flag(&self, name: &str) -> bool {
        let mut copy = *self;
        copy.flag_mut(name).is_some_and(|f| *f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    /// GCN propagation steps for both node and type embeddings.
    pub encoder_layers: usize,
    pub retentive_layers: usize,
    pub seq_len: usize,
    pub beta_t: f64,
    pub ffn_dim: usize,
    /// Semantic-attention width; 0 selects `max(hidden/4, 8)`.
    pub attn_dim: usize,
    pub lr: f64,
    /// Weight of the squared-prediction penalty.
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub type_xpos: bool,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 256,
            heads: 2,
            encoder_layers: 2,
            retentive_layers: 2,
            seq_len: 50,
            beta_t: 0.5,
            ffn_dim: 64,
            attn_dim: 0,
            lr: 1e-4,
            l2: 1e-4,
            epochs: 100,
            batch_size: 128,
            seed: 0,
            loss_mode: LossMode::Multiclass,
            type_xpos: true,
            ablations: Ablations::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl ModelConfig {
    pub const KEYS: [&'static str; 20] = [
        "hidden",
        "heads",
        "encoder_layers",
        "retentive_layers",
        "seq_len",
        "beta_t",
        "ffn_dim",
        "attn_dim",
        "lr",
        "l2",
        "epochs",
        "batch_size",
        "seed",
        "loss_mode",
        "type_xpos",
        "no_slot",
        "no_slot_alignment",
        "no_slot_retention",
        "no_he_retention",
        "no_retentive",
    ];

    pub fn effective_attn_dim(&self) -> usize {
        if self.attn_dim == 0 {
            (self.hidden / 4).max(8)
        } else {
            self.attn_dim
        }
    }

    pub fn effective_beta_t(&self) -> f64 {
        if self.ablations.no_he_retention {
            0.0
        } else {
            self.beta_t
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "hidden" => self.hidden = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "retentive_layers" => self.retentive_layers = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "beta_t" => self.beta_t = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "attn_dim" => self.attn_dim = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "loss_mode" => self.loss_mode = value.parse()?,
            "type_xpos" => self.type_xpos = parse(key, value)?,
            other => {
                let flag = self
                    .ablations
                    .flag_mut(other)
                    .ok_or_else(|| Error::Config(format!("unknown key {other:?}")))?;
                *flag = parse(key, value)?;
            }
        }
        Ok(())
    }

    /// Every field as `(key, value)` in [`ModelConfig::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        Self::KEYS
            .iter()
            .map(|&k| {
                let v = match k {
                    "hidden" => self.hidden.to_string(),
                    "heads" => self.heads.to_string(),
                    "encoder_layers" => self.encoder_layers.to_string(),
                    "retentive_layers" => self.retentive_layers.to_string(),
                    "seq_len" => self.seq_len.to_string(),
                    "beta_t" => self.beta_t.to_string(),
                    "ffn_dim" => self.ffn_dim.to_string(),
                    "attn_dim" => self.attn_dim.to_string(),
                    "lr" => self.lr.to_string(),
                    "l2" => self.l2.to_string(),
                    "epochs" => self.epochs.to_string(),
                    "batch_size" => self.batch_size.to_string(),
                    "seed" => self.seed.to_string(),
                    "loss_mode" => self.loss_mode.to_string(),
                    "type_xpos" => self.type_xpos.to_string(),
                    flag => self.ablations.flag(flag).to_string(),
                };
                (k, v)
            })
            .collect()
    }

    /// Rejects structurally impossible settings.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.hidden == 0 {
            return bad("hidden must be >= 1".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if !(self.hidden / self.heads).is_multiple_of(2) {
            return bad(format!("head dimension {} must be even", self.hidden / self.heads));
        }
        if self.seq_len == 0 {
            return bad("seq_len must be >= 1".into());
        }
        if !(self.beta_t.is_finite() && self.beta_t >= 0.0) {
            return bad(format!("beta_t must be finite and >= 0, got {}", self.beta_t));
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return bad(format!("l2 must be finite and >= 0, got {}", self.l2));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }

    /// Logs a warning for each value outside the usual tuning grid.
    pub fn warn_off_grid(&self) {
        if ![2, 4, 6].contains(&self.heads) {
            log::warn!("heads={} is outside the usual grid {{2,4,6}}", self.heads);
        }
        for (name, v) in [("encoder_layers", self.encoder_layers), ("retentive_layers", self.retentive_layers)] {
            if !(2..=5).contains(&v) {
                log::warn!("{name}={v} is outside the usual range 2..=5");
            }
        }
        if !(20..=200).contains(&self.seq_len) {
            log::warn!("seq_len={} is outside the usual range [20, 200]", self.seq_len);
        }
        if ![0.1, 0.2, 0.5, 1.0, 2.0].contains(&self.beta_t) {
            log::warn!("beta_t={} is outside the usual grid", self.beta_t);
        }
        if ![16, 32, 64, 128].contains(&self.ffn_dim) {
            log::warn!("ffn_dim={} is outside the usual grid", self.ffn_dim);
        }
    }
}

/// Position-0 (target node) representation of each sequence.
pub fn readout(tape: &mut Tape, h: Var) -> Result<Var> {
    tape.select_mid(h, 0)
}

/// Affine classification head producing logits.
pub fn predict(tape: &mut Tape, h: Var, w: Var, b: Var) -> Result<Var> {
    tape.linear(h, w, Some(b))
}

fn slot_config(config: &ModelConfig, feature_dims: &[usize]) -> SlotConfig {
    let a = config.ablations;
    SlotConfig {
        hidden: config.hidden,
        feature_dims: feature_dims.to_vec(),
        attn_dim: config.effective_attn_dim(),
        layers: config.encoder_layers,
        use_slots: !a.no_slot,
        align: !a.no_slot_alignment,
        mixing: if a.no_slot_retention {
            SlotMixing::Attention
        } else {
            SlotMixing::Retention
        },
    }
}

fn retention_config(config: &ModelConfig, num_types: usize) -> RetentionConfig {
    RetentionConfig {
        hidden: config.hidden,
        heads: config.heads,
        ffn_dim: config.ffn_dim,
        num_types,
        beta_t: config.effective_beta_t(),
        type_xpos: config.type_xpos,
        mixing: if config.ablations.no_retentive {
            SequenceMixing::Attention
        } else {
            SequenceMixing::Retention
        },
    }
}

#[derive(Clone, Debug)]
pub struct HeSRN {
    config: ModelConfig,
    feature_dims: Vec<usize>,
    num_classes: usize,
    store: ParamStore,
    slot: SlotParams,
    layers: Vec<LayerParams>,
    head_w: ParamId,
    head_b: ParamId,
}

impl HeSRN {
    /// Initializes every parameter from `config.seed`. Parameters of
    /// disabled components are still created so that all variants of one
    /// seed share their initial weights.
    pub fn new(config: ModelConfig, feature_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if feature_dims.is_empty() {
            return Err(Error::Config("model needs at least one node type".into()));
        }
        if num_classes == 0 {
            return Err(Error::Config("model needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let slot = SlotParams::init(&mut store, &slot_config(&config, &feature_dims), &mut rng);
        let rc = retention_config(&config, feature_dims.len());
        let layers = (0..config.retentive_layers)
            .map(|l| LayerParams::init(&mut store, &rc, l, &mut rng))
            .collect();
        let head_w = store.glorot("head.w", config.hidden, num_classes, &mut rng);
        let head_b = store.full("head.b", &[num_classes], 0.0);
        Ok(HeSRN {
            config,
            feature_dims,
            num_classes,
            store,
            slot,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_dims(&self) -> &[usize] {
        &self.feature_dims
    }

    pub fn num_types(&self) -> usize {
        self.feature_dims.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn slot_params(&self) -> &SlotParams {
        &self.slot
    }

    pub fn layer_params(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn slot_config(&self) -> SlotConfig {
        slot_config(&self.config, &self.feature_dims)
    }

    pub fn retention_config(&self) -> RetentionConfig {
        retention_config(&self.config, self.num_types())
    }

    /// Checks that a graph's types and feature widths fit this model.
    pub fn check_inputs(&self, inputs: &GraphTensors) -> Result<()> {
        let dims: Vec<usize> = inputs.features.iter().map(|t| t.shape()[1]).collect();
        if dims != self.feature_dims {
            return Err(Error::Config(format!(
                "model expects feature dims {:?}, graph has {:?}",
                self.feature_dims, dims
            )));
        }
        Ok(())
    }

    /// GCN-propagated one-hot type embeddings, `[N, C]`.
    pub fn type_embeddings(&self, inputs: &GraphTensors) -> Result<Tensor> {
        gcn_aggregate_values(&inputs.adj, &inputs.onehot, self.config.encoder_layers)
    }

    pub fn encode(&self, tape: &mut Tape, vars: &[Var], inputs: &GraphTensors) -> Result<StructureOutput> {
        encode_structure(tape, vars, &self.slot, &self.slot_config(), inputs)
    }

    /// Runs the retentive layers over token sequences and returns the
    /// `[B, L, d]` hidden states. `h` is `[N, d]`, `types` is `[N, C]`.
    pub fn sequence_states(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        h: Var,
        types: Var,
        seqs: &[Vec<Option<usize>>],
    ) -> Result<Var> {
        let b = seqs.len();
        let l = seqs.first().map_or(0, Vec::len);
        if b == 0 || l == 0 || seqs.iter().any(|s| s.len() != l) {
            return Err(Error::EmptyAxis { op: "token batch" });
        }
        let flat: Vec<Option<usize>> = seqs.iter().flatten().copied().collect();
        let valid: Vec<Vec<bool>> = seqs.iter().map(|s| s.iter().map(Option::is_some).collect()).collect();
        let d = self.config.hidden;
        let c = self.num_types();
        let tokens = tape.gather_rows(h, &flat)?;
        let mut hs = tape.reshape(tokens, &[b, l, d])?;
        let type_tokens = tape.gather_rows(types, &flat)?;
        let ht = tape.reshape(type_tokens, &[b, l, c])?;
        let rc = self.retention_config();
        let ctx = SequenceContext::new(&rc, &valid)?;
        for layer in &self.layers {
            hs = hesrn_layer(tape, vars, layer, &rc, &ctx, hs, ht)?;
        }
        Ok(hs)
    }

    /// Logits `[B, classes]` for a batch of sequences.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        h: Var,
        types: Var,
        seqs: &[Vec<Option<usize>>],
    ) -> Result<Var> {
        let hs = self.sequence_states(tape, vars, h, types, seqs)?;
        let r = readout(tape, hs)?;
        predict(tape, r, vars[self.head_w.index()], vars[self.head_b.index()])
    }

    /// End-to-end forward pass on one tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        inputs: &GraphTensors,
        types: &Tensor,
        seqs: &[Vec<Option<usize>>],
    ) -> Result<Var> {
        let enc = self.encode(tape, vars, inputs)?;
        let t = tape.constant(types.clone());
        self.forward_tokens(tape, vars, enc.encoded, t, seqs)
    }

    /// Inference without gradients: the structure encoding is computed
    /// once, then sequences are processed in chunks of `batch_size`.
    pub fn infer(
        &self,
        inputs: &GraphTensors,
        types: &Tensor,
        seqs: &[Vec<Option<usize>>],
        batch_size: usize,
    ) -> Result<Tensor> {
        let encoded = {
            let mut tape = Tape::new();
            let vars = self.bind_constants(&mut tape);
            let enc = self.encode(&mut tape, &vars, inputs)?;
            tape.value(enc.encoded).clone()
        };
        let mut out = Vec::with_capacity(seqs.len() * self.num_classes);
        for chunk in seqs.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let vars = self.bind_constants(&mut tape);
            let h = tape.constant(encoded.clone());
            let t = tape.constant(types.clone());
            let logits = self.forward_tokens(&mut tape, &vars, h, t, chunk)?;
            out.extend_from_slice(tape.value(logits).data());
        }
        Tensor::new(&[seqs.len(), self.num_classes], out)
    }

    fn bind_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.store.tensors().iter().map(|t| tape.constant(t.clone())).collect()
    }
}
