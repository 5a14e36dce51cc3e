//! Planted-partition graphs with Gaussian property blobs.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, GraphParts, PropertyGraph};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_nodes: usize,
    pub n_communities: usize,
    pub intra_edge_prob: f64,
    pub inter_edge_prob: f64,
    pub property_dim: usize,
    /// Distance between community means in units of the blob standard deviation.
    pub blob_separation: f64,
    /// Label intra-community edges +1 and inter-community edges -1.
    pub signed_edges: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_nodes: 2000,
            n_communities: 10,
            intra_edge_prob: 0.02,
            inter_edge_prob: 0.002,
            property_dim: 16,
            blob_separation: 3.0,
            signed_edges: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: String| Err(SyntheticError::Spec(m));
        if self.n_communities == 0 {
            return bad("need at least one community".into());
        }
        if self.n_communities > self.n_nodes {
            return bad(format!("{} communities for {} nodes", self.n_communities, self.n_nodes));
        }
        for p in [self.intra_edge_prob, self.inter_edge_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("edge probability {p} outside [0, 1]"));
            }
        }
        if self.property_dim < self.n_communities {
            return bad(format!(
                "property_dim ({}) must be at least n_communities ({}) to place orthogonal blob means",
                self.property_dim, self.n_communities
            ));
        }
        if !(self.blob_separation >= 0.0 && self.blob_separation.is_finite()) {
            return bad(format!("blob separation {} must be finite and nonnegative", self.blob_separation));
        }
        Ok(())
    }

    /// Community of node `v`: contiguous, near-equal blocks.
    pub fn community_of(&self, v: usize) -> usize {
        v * self.n_communities / self.n_nodes
    }

    /// Expected fraction of edges that fall inside a community.
    pub fn expected_intra_fraction(&self) -> f64 {
        let sizes = self.community_sizes();
        let intra: f64 = sizes.iter().map(|&s| (s * s.saturating_sub(1) / 2) as f64).sum();
        let all = (self.n_nodes * (self.n_nodes - 1) / 2) as f64;
        let e_intra = intra * self.intra_edge_prob;
        let e_inter = (all - intra) * self.inter_edge_prob;
        if e_intra + e_inter == 0.0 {
            0.0
        } else {
            e_intra / (e_intra + e_inter)
        }
    }

    pub fn expected_degree(&self) -> f64 {
        let sizes = self.community_sizes();
        let n = self.n_nodes as f64;
        sizes
            .iter()
            .map(|&s| s as f64 * ((s as f64 - 1.0) * self.intra_edge_prob + (n - s as f64) * self.inter_edge_prob))
            .sum::<f64>()
            / n
    }

    fn community_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_communities];
        for v in 0..self.n_nodes {
            sizes[self.community_of(v)] += 1;
        }
        sizes
    }
}

/// Community means sit at `(sep / sqrt 2) e_c`, so any two are `sep` apart.
/// Properties add unit Gaussian noise; labels are the one-hot community.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<PropertyGraph, SyntheticError> {
    spec.validate()?;
    let n = spec.n_nodes;
    let deg = spec.expected_degree();
    if deg < 1.0 {
        log::warn!("expected degree {deg:.3} is below 1; many nodes will be isolated");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = spec.blob_separation / std::f64::consts::SQRT_2;
    let mut props = Array2::zeros((n, spec.property_dim));
    for v in 0..n {
        let c = spec.community_of(v);
        for j in 0..spec.property_dim {
            let noise: f64 = rng.sample(StandardNormal);
            props[[v, j]] = noise + if j == c { scale } else { 0.0 };
        }
    }
    let mut edges = Vec::new();
    let mut signs = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let same = spec.community_of(u) == spec.community_of(v);
            let p = if same { spec.intra_edge_prob } else { spec.inter_edge_prob };
            if rng.random::<f64>() < p {
                edges.push((u, v));
                signs.push(if same { 1i64 } else { -1 });
            }
        }
    }
    let labels = Array2::from_shape_fn((n, spec.n_communities), |(v, c)| u8::from(spec.community_of(v) == c));
    let (edge_props, edge_labels) = if spec.signed_edges {
        let ep = Array2::from_shape_fn((signs.len(), 1), |(e, _)| signs[e] as f64);
        (Some(ep), Some(signs))
    } else {
        (None, None)
    };
    Ok(PropertyGraph::build(GraphParts {
        node_props: props,
        edges,
        directed: false,
        edge_props,
        edge_labels,
        node_labels: Some(labels),
        node_ids: None,
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_intra_fraction_matches_expectation() {
        let spec = SyntheticSpec::default();
        let g = generate_synthetic(&spec, 3).unwrap();
        let canon = g.canonical_edges();
        let intra = canon.iter().filter(|&&e| spec.community_of(g.source(e)) == spec.community_of(g.target(e))).count();
        let frac = intra as f64 / canon.len() as f64;
        let expect = spec.expected_intra_fraction();
        assert!((frac - expect).abs() < 0.03, "{frac} vs {expect}");
        assert_eq!(g.label_dim(), 10);
    }

    #[test]
    fn zero_inter_prob_gives_only_intra_edges() {
        let spec = SyntheticSpec { n_nodes: 200, inter_edge_prob: 0.0, intra_edge_prob: 0.1, ..Default::default() };
        let g = generate_synthetic(&spec, 1).unwrap();
        assert!(g.n_edges() > 0);
        assert!((0..g.n_edges()).all(|e| spec.community_of(g.source(e)) == spec.community_of(g.target(e))));
    }

    #[test]
    fn signed_edges_follow_communities() {
        let spec = SyntheticSpec { n_nodes: 100, n_communities: 2, intra_edge_prob: 0.1, inter_edge_prob: 0.05, property_dim: 2, signed_edges: true, ..Default::default() };
        let g = generate_synthetic(&spec, 2).unwrap();
        let labels = g.edge_labels().unwrap();
        for e in 0..g.n_edges() {
            let same = spec.community_of(g.source(e)) == spec.community_of(g.target(e));
            assert_eq!(labels[e], if same { 1 } else { -1 });
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec { n_nodes: 150, ..Default::default() };
        let a = generate_synthetic(&spec, 9).unwrap();
        let b = generate_synthetic(&spec, 9).unwrap();
        assert_eq!(a.node_props(), b.node_props());
        assert_eq!(a.canonical_edges().len(), b.canonical_edges().len());
    }

    #[test]
    fn rejects_bad_specs() {
        let too_many = SyntheticSpec { n_nodes: 5, n_communities: 6, ..Default::default() };
        assert!(generate_synthetic(&too_many, 0).is_err());
        let narrow = SyntheticSpec { property_dim: 4, ..Default::default() };
        assert!(generate_synthetic(&narrow, 0).is_err());
    }
}
