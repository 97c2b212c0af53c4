//! Heterogeneous graph model, adjacency normalization and aggregation.

mod io;
mod sample;
mod synth;

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{CsrMatrix, Tensor};

pub use io::{load_graph, parse_graph, save_graph, write_graph};
pub use sample::{sample_sequence, sample_sequences};
pub use synth::{neighbor_type_counts, synth_graph, LabelRule, SynthSpec};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeType {
    pub name: String,
    pub feature_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub etype: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Multi(Vec<bool>),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Raw pieces of a graph before validation.
#[derive(Clone, Debug, Default)]
pub struct GraphParts {
    pub types: Vec<NodeType>,
    pub node_type: Vec<usize>,
    pub edges: Vec<Edge>,
    /// One row per node, in node-id order, of that node's type's width.
    pub node_features: Vec<Vec<f64>>,
    pub labels: Vec<Option<Label>>,
    pub splits: Splits,
    pub target_type: usize,
}

/// A validated, immutable heterogeneous graph.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    types: Vec<NodeType>,
    node_type: Vec<usize>,
    edges: Vec<Edge>,
    features: Vec<Tensor>,
    local_index: Vec<usize>,
    labels: Vec<Option<Label>>,
    splits: Splits,
    target_type: usize,
    neighbors: Vec<Vec<usize>>,
}

impl HeteroGraph {
    pub fn new(parts: GraphParts) -> Result<Self> {
        let GraphParts {
            types,
            node_type,
            edges,
            node_features,
            labels,
            splits,
            target_type,
        } = parts;
        let n = node_type.len();
        let c = types.len();
        if c == 0 {
            return Err(Error::Validation("graph has no node types".into()));
        }
        if target_type >= c {
            return Err(Error::Validation(format!("target type {target_type} >= type count {c}")));
        }
        if node_features.len() != n || labels.len() != n {
            return Err(Error::Validation(format!(
                "{n} nodes but {} feature rows and {} label slots",
                node_features.len(),
                labels.len()
            )));
        }

        let mut local_index = vec![0; n];
        let mut rows: Vec<Vec<f64>> = vec![Vec::new(); c];
        let mut counts = vec![0usize; c];
        for (v, (&t, f)) in node_type.iter().zip(&node_features).enumerate() {
            if t >= c {
                return Err(Error::Validation(format!("node {v} has type {t} >= {c}")));
            }
            if f.len() != types[t].feature_dim {
                return Err(Error::Validation(format!(
                    "node {v} has {} features, type {} expects {}",
                    f.len(),
                    types[t].name,
                    types[t].feature_dim
                )));
            }
            local_index[v] = counts[t];
            counts[t] += 1;
            rows[t].extend_from_slice(f);
        }
        let features = rows
            .into_iter()
            .zip(&counts)
            .zip(&types)
            .map(|((data, &cnt), ty)| Tensor::new(&[cnt, ty.feature_dim], data))
            .collect::<Result<Vec<_>>>()?;

        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for e in &edges {
            if e.src >= n || e.dst >= n {
                return Err(Error::Validation(format!(
                    "edge ({}, {}) references a node outside 0..{n}",
                    e.src, e.dst
                )));
            }
            if e.src != e.dst {
                adj[e.src].insert(e.dst);
                adj[e.dst].insert(e.src);
            }
        }
        let neighbors = adj.into_iter().map(|s| s.into_iter().collect()).collect();

        let mut width = None;
        for (v, l) in labels.iter().enumerate() {
            let Some(l) = l else { continue };
            if node_type[v] != target_type {
                return Err(Error::Validation(format!("label on non-target node {v}")));
            }
            let kind = match l {
                Label::Class(_) => None,
                Label::Multi(bits) => Some(bits.len()),
            };
            match width {
                None => width = Some(kind),
                Some(w) if w != kind => {
                    return Err(Error::Validation(format!(
                        "label of node {v} is inconsistent with earlier labels"
                    )))
                }
                _ => {}
            }
        }

        let mut seen = vec![false; n];
        for (name, ids) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
            for &v in ids {
                if v >= n {
                    return Err(Error::Validation(format!("{name} split node {v} out of range")));
                }
                if node_type[v] != target_type {
                    return Err(Error::Validation(format!("{name} split node {v} is not a target node")));
                }
                if labels[v].is_none() {
                    return Err(Error::Validation(format!("{name} split node {v} has no label")));
                }
                if seen[v] {
                    return Err(Error::Validation(format!("node {v} appears in more than one split")));
                }
                seen[v] = true;
            }
        }

        Ok(HeteroGraph {
            types,
            node_type,
            edges,
            features,
            local_index,
            labels,
            splits,
            target_type,
            neighbors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_type.len()
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn types(&self) -> &[NodeType] {
        &self.types
    }

    pub fn node_type(&self, v: usize) -> usize {
        self.node_type[v]
    }

    pub fn node_types(&self) -> &[usize] {
        &self.node_type
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Per-type feature matrices, rows in ascending node-id order.
    pub fn features(&self) -> &[Tensor] {
        &self.features
    }

    pub fn feature_row(&self, v: usize) -> &[f64] {
        self.features[self.node_type[v]].row(self.local_index[v])
    }

    /// Row of node `v` inside its type's feature matrix.
    pub fn local_index(&self, v: usize) -> usize {
        self.local_index[v]
    }

    pub fn labels(&self) -> &[Option<Label>] {
        &self.labels
    }

    pub fn label(&self, v: usize) -> Option<&Label> {
        self.labels[v].as_ref()
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn target_type(&self) -> usize {
        self.target_type
    }

    /// Distinct undirected neighbors of `v`, ascending, self excluded.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn is_multilabel(&self) -> bool {
        self.labels.iter().flatten().any(|l| matches!(l, Label::Multi(_)))
    }

    /// Number of classes: largest class index + 1, or the multi-label width.
    pub fn num_classes(&self) -> usize {
        self.labels
            .iter()
            .flatten()
            .map(|l| match l {
                Label::Class(c) => c + 1,
                Label::Multi(bits) => bits.len(),
            })
            .max()
            .unwrap_or(0)
    }

    pub fn target_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&v| self.node_type[v] == self.target_type).collect()
    }

    pub fn to_parts(&self) -> GraphParts {
        GraphParts {
            types: self.types.clone(),
            node_type: self.node_type.clone(),
            edges: self.edges.clone(),
            node_features: (0..self.num_nodes()).map(|v| self.feature_row(v).to_vec()).collect(),
            labels: self.labels.clone(),
            splits: self.splits.clone(),
            target_type: self.target_type,
        }
    }
}

/// Dense inputs derived from a graph once and shared by every forward pass.
#[derive(Clone, Debug)]
pub struct GraphTensors {
    /// Per-type feature matrices.
    pub features: Vec<Tensor>,
    /// `slot_rows[s][v]` is the row of `v` in `features[s]` when `v` has
    /// type `s`.
    pub slot_rows: Vec<Vec<Option<usize>>>,
    pub adj: Arc<CsrMatrix>,
    pub onehot: Tensor,
}

impl GraphTensors {
    pub fn new(g: &HeteroGraph) -> Self {
        let slot_rows = (0..g.num_types())
            .map(|s| {
                (0..g.num_nodes())
                    .map(|v| (g.node_type(v) == s).then(|| g.local_index(v)))
                    .collect()
            })
            .collect();
        GraphTensors {
            features: g.features().to_vec(),
            slot_rows,
            adj: Arc::new(normalized_adjacency(g)),
            onehot: type_onehot(g),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.onehot.shape()[0]
    }

    pub fn num_types(&self) -> usize {
        self.features.len()
    }
}

/// `D^{-1/2}(A+I)D^{-1/2}` over the undirected, type-agnostic edge set,
/// where `D` counts the self-loop.
pub fn normalized_adjacency(g: &HeteroGraph) -> CsrMatrix {
    let n = g.num_nodes();
    let deg: Vec<f64> = (0..n).map(|v| (g.degree(v) + 1) as f64).collect();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    indptr.push(0);
    for i in 0..n {
        let nb = g.neighbors(i);
        let split = nb.partition_point(|&j| j < i);
        let ordered = nb[..split].iter().chain(std::iter::once(&i)).chain(&nb[split..]);
        for &j in ordered {
            indices.push(j);
            values.push(1.0 / (deg[i] * deg[j]).sqrt());
        }
        indptr.push(indices.len());
    }
    CsrMatrix {
        rows: n,
        cols: n,
        indptr,
        indices,
        values,
    }
}

/// Applies the normalized adjacency `layers` times on the tape.
pub fn gcn_aggregate(tape: &mut Tape, adj: &Arc<CsrMatrix>, h: Var, layers: usize) -> Result<Var> {
    if tape.shape(h).last() == Some(&0) {
        return Err(Error::EmptyAxis { op: "gcn_aggregate" });
    }
    let mut out = h;
    for _ in 0..layers {
        out = tape.spmm(adj, out)?;
    }
    Ok(out)
}

/// Tape-free variant of [`gcn_aggregate`].
pub fn gcn_aggregate_values(adj: &CsrMatrix, h: &Tensor, layers: usize) -> Result<Tensor> {
    let shape = h.shape();
    if shape.len() != 2 || shape[0] != adj.cols {
        return Err(Error::shape("gcn_aggregate", &[adj.rows, adj.cols], shape));
    }
    if shape[1] == 0 {
        return Err(Error::EmptyAxis { op: "gcn_aggregate" });
    }
    let mut data = h.data().to_vec();
    for _ in 0..layers {
        data = adj.matmul_dense(&data, shape[1]);
    }
    Tensor::new(shape, data)
}

/// `[N, C]` one-hot encoding of node types.
pub fn type_onehot(g: &HeteroGraph) -> Tensor {
    let c = g.num_types();
    let mut data = vec![0.0; g.num_nodes() * c];
    for (v, &t) in g.node_types().iter().enumerate() {
        data[v * c + t] = 1.0;
    }
    Tensor::new(&[g.num_nodes(), c], data).expect("one-hot shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(types: &[usize], edges: &[(usize, usize)]) -> HeteroGraph {
        let c = types.iter().max().unwrap() + 1;
        HeteroGraph::new(GraphParts {
            types: (0..c)
                .map(|t| NodeType {
                    name: format!("t{t}"),
                    feature_dim: 1,
                })
                .collect(),
            node_type: types.to_vec(),
            edges: edges.iter().map(|&(src, dst)| Edge { src, dst, etype: 0 }).collect(),
            node_features: (0..types.len()).map(|v| vec![v as f64]).collect(),
            labels: vec![None; types.len()],
            splits: Splits::default(),
            target_type: 0,
        })
        .unwrap()
    }

    #[test]
    fn single_node_adjacency_is_one() {
        let g = toy(&[0], &[]);
        assert_eq!(normalized_adjacency(&g).to_dense().data(), &[1.0]);
    }

    #[test]
    fn two_node_edge_gives_halves() {
        let g = toy(&[0, 1], &[(0, 1)]);
        assert_eq!(normalized_adjacency(&g).to_dense().data(), &[0.5; 4]);
    }

    #[test]
    fn duplicate_and_reverse_edges_collapse() {
        let g = toy(&[0, 1], &[(0, 1), (1, 0), (0, 1), (1, 1)]);
        assert_eq!(g.degree(0), 1);
        assert_eq!(g.degree(1), 1);
    }

    #[test]
    fn onehot_rows() {
        let g = toy(&[0, 1, 0], &[]);
        assert_eq!(type_onehot(&g).data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn dangling_edge_is_rejected() {
        let mut parts = toy(&[0, 0, 1], &[(0, 1)]).to_parts();
        parts.edges.push(Edge {
            src: 0,
            dst: 99,
            etype: 0,
        });
        assert!(matches!(HeteroGraph::new(parts), Err(Error::Validation(_))));
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let mut parts = toy(&[0, 0, 1], &[(0, 1)]).to_parts();
        parts.labels[0] = Some(Label::Class(0));
        parts.splits.train = vec![0];
        parts.splits.test = vec![0];
        assert!(HeteroGraph::new(parts).is_err());
    }

    #[test]
    fn gcn_zero_layers_is_identity() {
        let g = toy(&[0, 1, 0], &[(0, 1), (1, 2)]);
        let adj = normalized_adjacency(&g);
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(gcn_aggregate_values(&adj, &h, 0).unwrap(), h);
        let empty = Tensor::zeros(&[3, 0]);
        assert!(matches!(
            gcn_aggregate_values(&adj, &empty, 1),
            Err(Error::EmptyAxis { .. })
        ));
    }
}
