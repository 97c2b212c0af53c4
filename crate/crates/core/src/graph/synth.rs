//! Reproducible synthetic heterogeneous graphs with structure-derived labels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Edge, GraphParts, HeteroGraph, Label, NodeType, Splits};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelRule {
    /// Class = most frequent 1-hop neighbor type, ties to the lowest index.
    MajorityNeighborType,
    /// Bit `t` is set when at least two 1-hop neighbors have type `t`.
    NeighborTypePresence,
}

impl LabelRule {
    pub fn apply(self, counts: &[usize]) -> Label {
        match self {
            LabelRule::MajorityNeighborType => {
                let mut best = 0;
                for (t, &c) in counts.iter().enumerate() {
                    if c > counts[best] {
                        best = t;
                    }
                }
                Label::Class(best)
            }
            LabelRule::NeighborTypePresence => Label::Multi(counts.iter().map(|&c| c >= 2).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub nodes_per_type: Vec<usize>,
    pub feature_dims: Vec<usize>,
    /// Mean number of edges each target node draws.
    pub avg_degree: f64,
    /// Probability that a drawn edge goes to the node's preferred type
    /// rather than a uniformly chosen one.
    pub pref_strength: f64,
    /// Standard deviation of features around their type mean.
    pub feature_noise: f64,
    pub label_rule: LabelRule,
    /// Train/val/test fractions of the target nodes; test takes the rest.
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// `num_types` types with `per_type` nodes each and 8 features per type.
    pub fn uniform(num_types: usize, per_type: usize, seed: u64) -> Self {
        SynthSpec {
            nodes_per_type: vec![per_type; num_types],
            feature_dims: vec![8; num_types],
            avg_degree: 8.0,
            pref_strength: 0.8,
            feature_noise: 1.0,
            label_rule: LabelRule::MajorityNeighborType,
            train_frac: 0.4,
            val_frac: 0.1,
            seed,
        }
    }

    pub fn num_types(&self) -> usize {
        self.nodes_per_type.len()
    }
}

/// Counts of each node type among the distinct neighbors of `v`.
pub fn neighbor_type_counts(g: &HeteroGraph, v: usize) -> Vec<usize> {
    let mut counts = vec![0; g.num_types()];
    for &u in g.neighbors(v) {
        counts[g.node_type(u)] += 1;
    }
    counts
}

/// Generates a graph whose type-0 nodes are the targets.
///
/// Every target draws about `avg_degree` edges, each landing on the
/// target's randomly chosen preferred type with probability
/// `pref_strength`. Labels are then derived from the final neighborhoods.
pub fn synth_graph(spec: &SynthSpec) -> Result<HeteroGraph> {
    let c = spec.num_types();
    if c == 0 {
        return Err(Error::Param("synthetic graph needs at least one type".into()));
    }
    if spec.feature_dims.len() != c {
        return Err(Error::Param(format!(
            "{} feature dims for {c} types",
            spec.feature_dims.len()
        )));
    }
    if spec.nodes_per_type[0] == 0 {
        return Err(Error::Param("synthetic graph needs at least one target node".into()));
    }
    if !(0.0..=1.0).contains(&spec.pref_strength) || !spec.avg_degree.is_finite() || spec.avg_degree < 0.0 {
        return Err(Error::Param("pref_strength must lie in [0,1] and avg_degree be >= 0".into()));
    }
    let fracs_ok = spec.train_frac >= 0.0 && spec.val_frac >= 0.0 && spec.train_frac + spec.val_frac <= 1.0;
    if !fracs_ok {
        return Err(Error::Param("split fractions must be non-negative and sum to at most 1".into()));
    }
    let noise = Normal::new(0.0, spec.feature_noise)
        .map_err(|e| Error::Param(format!("feature noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut node_type = Vec::new();
    let mut by_type: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (t, &count) in spec.nodes_per_type.iter().enumerate() {
        for _ in 0..count {
            by_type[t].push(node_type.len());
            node_type.push(t);
        }
    }
    let n = node_type.len();

    let means: Vec<Vec<f64>> = spec
        .feature_dims
        .iter()
        .map(|&d| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let node_features: Vec<Vec<f64>> = node_type
        .iter()
        .map(|&t| means[t].iter().map(|m| m + noise.sample(&mut rng)).collect())
        .collect();

    let nonempty: Vec<usize> = (0..c).filter(|&t| !by_type[t].is_empty()).collect();
    let mut edges = Vec::new();
    let whole = spec.avg_degree.floor() as usize;
    let frac = spec.avg_degree - whole as f64;
    for &v in &by_type[0] {
        let preferred = nonempty[rng.random_range(0..nonempty.len())];
        let draws = whole + usize::from(rng.random::<f64>() < frac);
        for _ in 0..draws {
            let t = if rng.random::<f64>() < spec.pref_strength {
                preferred
            } else {
                nonempty[rng.random_range(0..nonempty.len())]
            };
            let u = by_type[t][rng.random_range(0..by_type[t].len())];
            if u != v {
                edges.push(Edge {
                    src: v,
                    dst: u,
                    etype: t,
                });
            }
        }
    }

    let mut parts = GraphParts {
        types: (0..c)
            .map(|t| NodeType {
                name: format!("type{t}"),
                feature_dim: spec.feature_dims[t],
            })
            .collect(),
        node_type,
        edges,
        node_features,
        labels: vec![None; n],
        splits: Splits::default(),
        target_type: 0,
    };
    let unlabeled = HeteroGraph::new(parts.clone())?;
    for &v in &by_type[0] {
        parts.labels[v] = Some(spec.label_rule.apply(&neighbor_type_counts(&unlabeled, v)));
    }

    let mut targets = by_type[0].clone();
    targets.shuffle(&mut rng);
    let nt = targets.len();
    let n_train = (spec.train_frac * nt as f64).round() as usize;
    let n_val = ((spec.val_frac * nt as f64).round() as usize).min(nt - n_train);
    let mut train = targets[..n_train].to_vec();
    let mut val = targets[n_train..n_train + n_val].to_vec();
    let mut test = targets[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    parts.splits = Splits { train, val, test };
    HeteroGraph::new(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_type_labels_are_zero() {
        let g = synth_graph(&SynthSpec::uniform(1, 30, 3)).unwrap();
        assert!(g.labels().iter().flatten().all(|l| *l == Label::Class(0)));
    }

    #[test]
    fn same_seed_same_graph() {
        let spec = SynthSpec::uniform(3, 40, 9);
        assert_eq!(synth_graph(&spec).unwrap(), synth_graph(&spec).unwrap());
        let other = SynthSpec { seed: 10, ..spec };
        assert_ne!(synth_graph(&other).unwrap(), synth_graph(&SynthSpec::uniform(3, 40, 9)).unwrap());
    }

    #[test]
    fn majority_rule_counts() {
        let rule = LabelRule::MajorityNeighborType;
        assert_eq!(rule.apply(&[0, 2, 1]), Label::Class(1));
        assert_eq!(rule.apply(&[1, 1, 0]), Label::Class(0));
        assert_eq!(rule.apply(&[0, 0, 0]), Label::Class(0));
    }

    #[test]
    fn labels_follow_neighborhoods() {
        let g = synth_graph(&SynthSpec::uniform(3, 50, 2)).unwrap();
        for v in g.target_nodes() {
            let expected = LabelRule::MajorityNeighborType.apply(&neighbor_type_counts(&g, v));
            assert_eq!(g.label(v), Some(&expected));
        }
        let s = g.splits();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 50);
    }

    #[test]
    fn presence_rule_is_multilabel() {
        let spec = SynthSpec {
            label_rule: LabelRule::NeighborTypePresence,
            ..SynthSpec::uniform(3, 20, 1)
        };
        let g = synth_graph(&spec).unwrap();
        assert!(g.is_multilabel());
        assert_eq!(g.num_classes(), 3);
    }
}
