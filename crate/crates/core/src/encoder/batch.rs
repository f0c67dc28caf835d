use std::sync::Arc;

use crate::hetgraph::{EdgeType, HeteroGraph, NodeType};
use crate::numerics::{Index, Tensor};

/// Edges of one (possibly reversed) type, offset into batch-wide node indices.
#[derive(Clone, Debug)]
pub struct BatchEdges {
    pub edge_type: EdgeType,
    pub src: Index,
    pub dst: Index,
}

/// Disjoint union of several graphs, laid out per node type.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub n_graphs: usize,
    pub feature_dim: usize,
    features: [Tensor; 3],
    membership: [Index; 3],
    pub edges: Vec<BatchEdges>,
}

fn slot(t: NodeType) -> usize {
    match t {
        NodeType::Article => 0,
        NodeType::Post => 1,
        NodeType::User => 2,
    }
}

impl GraphBatch {
    /// Every graph must share one feature width. Reverse edges are added for
    /// each canonical type present.
    pub fn new(graphs: &[&HeteroGraph]) -> Self {
        let d = graphs.first().map_or(0, |g| g.feature_dim());
        let mut feats: [Vec<&Tensor>; 3] = Default::default();
        let mut membership: [Vec<usize>; 3] = Default::default();
        let mut offsets = vec![[0usize; 3]; graphs.len()];
        let mut totals = [0usize; 3];
        for (gi, g) in graphs.iter().enumerate() {
            assert_eq!(g.feature_dim(), d, "graph `{}` has feature width {}, batch uses {d}", g.id, g.feature_dim());
            for t in NodeType::ALL {
                let s = slot(t);
                offsets[gi][s] = totals[s];
                let n = g.n_nodes(t);
                totals[s] += n;
                feats[s].push(g.features(t));
                membership[s].extend(std::iter::repeat_n(gi, n));
            }
        }
        let mut edges = Vec::new();
        for et in EdgeType::all() {
            let (ss, ds) = (slot(et.source()), slot(et.target()));
            let mut src = Vec::new();
            let mut dst = Vec::new();
            for (gi, g) in graphs.iter().enumerate() {
                for (s, t) in g.typed_edges(et) {
                    src.push(s + offsets[gi][ss]);
                    dst.push(t + offsets[gi][ds]);
                }
            }
            if !src.is_empty() {
                edges.push(BatchEdges {
                    edge_type: et,
                    src: src.into(),
                    dst: dst.into(),
                });
            }
        }
        let features = [0, 1, 2].map(|s| Tensor::vstack(&feats[s], d));
        let membership = membership.map(|m| -> Index { Arc::from(m) });
        Self {
            n_graphs: graphs.len(),
            feature_dim: d,
            features,
            membership,
            edges,
        }
    }

    pub fn single(g: &HeteroGraph) -> Self {
        Self::new(&[g])
    }

    pub fn features(&self, t: NodeType) -> &Tensor {
        &self.features[slot(t)]
    }

    /// Graph index of every node of type `t`.
    pub fn membership(&self, t: NodeType) -> &Index {
        &self.membership[slot(t)]
    }

    pub fn count(&self, t: NodeType) -> usize {
        self.features[slot(t)].rows()
    }
}
