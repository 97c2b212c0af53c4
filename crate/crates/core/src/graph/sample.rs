//! Fixed-length neighbor token sequences.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::HeteroGraph;
use crate::error::{Error, Result};

fn node_seed(seed: u64, v: usize) -> u64 {
    seed ^ (v as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Builds the length-`len` token sequence of target `v`.
///
/// Position 0 holds `v`; later positions are filled hop by hop in
/// breadth-first order, each hop sorted by descending degree then ascending
/// id. A hop larger than the remaining budget is replaced by a seeded
/// uniform subsample (kept in hop order). `None` marks padding.
pub fn sample_sequence(g: &HeteroGraph, v: usize, len: usize, seed: u64) -> Result<Vec<Option<usize>>> {
    if len < 1 {
        return Err(Error::Param("sequence length must be >= 1".into()));
    }
    if v >= g.num_nodes() {
        return Err(Error::Param(format!("node {v} out of range")));
    }
    if g.node_type(v) != g.target_type() {
        return Err(Error::Param(format!("node {v} is not a target node")));
    }
    let mut out = Vec::with_capacity(len);
    out.push(Some(v));
    let mut visited = vec![false; g.num_nodes()];
    visited[v] = true;
    let mut frontier = vec![v];
    let mut rng: Option<ChaCha8Rng> = None;

    while out.len() < len && !frontier.is_empty() {
        let mut hop = Vec::new();
        for &u in &frontier {
            for &w in g.neighbors(u) {
                if !visited[w] {
                    visited[w] = true;
                    hop.push(w);
                }
            }
        }
        hop.sort_by(|&a, &b| g.degree(b).cmp(&g.degree(a)).then(a.cmp(&b)));
        let budget = len - out.len();
        if hop.len() > budget {
            let rng = rng.get_or_insert_with(|| ChaCha8Rng::seed_from_u64(node_seed(seed, v)));
            let mut keep = index::sample(rng, hop.len(), budget).into_vec();
            keep.sort_unstable();
            out.extend(keep.into_iter().map(|i| Some(hop[i])));
        } else {
            out.extend(hop.iter().map(|&w| Some(w)));
        }
        frontier = hop;
    }
    out.resize(len, None);
    Ok(out)
}

/// [`sample_sequence`] for each node in `targets`.
pub fn sample_sequences(g: &HeteroGraph, targets: &[usize], len: usize, seed: u64) -> Result<Vec<Vec<Option<usize>>>> {
    targets.iter().map(|&v| sample_sequence(g, v, len, seed)).collect()
}
