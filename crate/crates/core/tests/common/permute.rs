//! Relabelling of post and user nodes within a graph.

use hetgnn_pretrain::hetgraph::{EdgeKind, HeteroGraph, NodeType};
use hetgnn_pretrain::numerics::Tensor;

pub fn permute_rows(t: &Tensor, new_of_old: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    for (old, &new) in new_of_old.iter().enumerate() {
        out.row_mut(new).copy_from_slice(t.row(old));
    }
    out
}

/// `pp[i]` and `up[i]` are the new indices of old post and user `i`.
pub fn permute_graph(g: &HeteroGraph, pp: &[usize], up: &[usize]) -> HeteroGraph {
    let map = |t: NodeType, i: usize| match t {
        NodeType::Article => i,
        NodeType::Post => pp[i],
        NodeType::User => up[i],
    };
    let mut h = g.clone();
    h.post_x = permute_rows(&g.post_x, pp);
    h.user_x = permute_rows(&g.user_x, up);
    for (old, &new) in pp.iter().enumerate() {
        h.post_subtype[new] = g.post_subtype[old];
    }
    for (name, list) in h.edges.iter_mut() {
        let kind = EdgeKind::parse(name).unwrap();
        for e in list.iter_mut() {
            *e = (map(kind.source(), e.0), map(kind.target(), e.1));
        }
    }
    h
}
