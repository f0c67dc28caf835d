use std::sync::Arc;

use super::{EncoderConfig, EncoderError, GraphBatch, Readout};
use crate::hetgraph::{EdgeType, NodeType};
use crate::numerics::{Bound, Index, Tape, Tensor, Var};

/// Per node type embeddings recorded on a tape, in `NodeType::ALL` order.
#[derive(Clone, Copy, Debug)]
pub struct NodeVars(pub [Var; 3]);

impl NodeVars {
    pub fn get(&self, t: NodeType) -> Var {
        self.0[t as usize]
    }
}

/// Attention weights of one layer for one target node type.
///
/// Row `i` belongs to the edge ending at `dst[i]`, column `h` is head `h`.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub layer: usize,
    pub target: NodeType,
    pub dst: Index,
    pub edge_types: Vec<EdgeType>,
    pub weights: Tensor,
}

/// `x W + b` using the parameters `<name>.weight` and `<name>.bias`.
pub fn linear(tape: &mut Tape, p: &Bound, x: Var, name: &str) -> Var {
    let w = p.var(&format!("{name}.weight"));
    let b = p.var(&format!("{name}.bias"));
    let xw = tape.matmul(x, w);
    tape.add_row(xw, b)
}

pub fn input_projection(tape: &mut Tape, p: &Bound, batch: &GraphBatch, prefix: &str) -> NodeVars {
    NodeVars(NodeType::ALL.map(|t| {
        let x = tape.constant(batch.features(t).clone());
        linear(tape, p, x, &format!("{prefix}input.{}", t.name()))
    }))
}

/// One HGT layer over the whole batch.
pub fn hgt_layer(
    tape: &mut Tape,
    p: &Bound,
    batch: &GraphBatch,
    h_in: NodeVars,
    cfg: &EncoderConfig,
    prefix: &str,
    layer: usize,
    mut trace: Option<&mut Vec<AttentionTrace>>,
) -> NodeVars {
    let heads = cfg.n_heads;
    let inv_sqrt_dk = 1.0 / (cfg.head_dim() as f64).sqrt();
    let lp = format!("{prefix}layer{layer}");
    let proj = |tape: &mut Tape, t: NodeType, part: &str| {
        linear(tape, p, h_in.get(t), &format!("{lp}.node.{}.{part}", t.name()))
    };
    let mut kqv = Vec::with_capacity(3);
    for t in NodeType::ALL {
        kqv.push([proj(tape, t, "key"), proj(tape, t, "query"), proj(tape, t, "value")]);
    }

    // scores, messages and target indices grouped by target type
    let mut scores: [Vec<Var>; 3] = Default::default();
    let mut msgs: [Vec<Var>; 3] = Default::default();
    let mut dsts: [Vec<usize>; 3] = Default::default();
    let mut types: [Vec<EdgeType>; 3] = Default::default();
    for e in &batch.edges {
        let (s, t) = (e.edge_type.source() as usize, e.edge_type.target() as usize);
        let ep = format!("{lp}.edge.{}", e.edge_type.name());
        let k = tape.gather_rows(kqv[s][0], e.src.clone());
        let k = tape.head_matmul(k, p.var(&format!("{ep}.att")), heads);
        let q = tape.gather_rows(kqv[t][1], e.dst.clone());
        let sc = tape.head_dot(q, k, heads);
        let sc = tape.mul_scalar(sc, p.var(&format!("{ep}.prior")));
        scores[t].push(tape.scale(sc, inv_sqrt_dk));
        let v = tape.gather_rows(kqv[s][2], e.src.clone());
        msgs[t].push(tape.head_matmul(v, p.var(&format!("{ep}.msg")), heads));
        dsts[t].extend(e.dst.iter().copied());
        types[t].push(e.edge_type);
    }

    NodeVars(NodeType::ALL.map(|t| {
        let ti = t as usize;
        let n = batch.count(t);
        let h = h_in.get(t);
        let update = if scores[ti].is_empty() {
            // no in-edges anywhere: the aggregate is zero
            let z = tape.constant(Tensor::zeros(n, cfg.hidden_dim));
            linear(tape, p, z, &format!("{lp}.node.{}.out", t.name()))
        } else {
            let dst: Index = Arc::from(std::mem::take(&mut dsts[ti]));
            let sc = tape.concat_rows(&scores[ti]);
            let att = tape.segment_softmax(sc, dst.clone(), n);
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(AttentionTrace {
                    layer,
                    target: t,
                    dst: dst.clone(),
                    edge_types: types[ti].clone(),
                    weights: tape.value(att).clone(),
                });
            }
            let m = tape.concat_rows(&msgs[ti]);
            let weighted = tape.head_scale(m, att, heads);
            let agg = tape.scatter_add_rows(weighted, dst, n);
            linear(tape, p, agg, &format!("{lp}.node.{}.out", t.name()))
        };
        let res = tape.add(h, update);
        tape.gelu(res)
    }))
}

fn encode_inner(
    tape: &mut Tape,
    p: &Bound,
    batch: &GraphBatch,
    cfg: &EncoderConfig,
    prefix: &str,
    mut trace: Option<&mut Vec<AttentionTrace>>,
) -> Result<NodeVars, EncoderError> {
    if batch.n_graphs > 0 && batch.feature_dim != cfg.feature_dim {
        return Err(EncoderError::FeatureDim {
            expected: cfg.feature_dim,
            found: batch.feature_dim,
        });
    }
    for e in &batch.edges {
        if p
            .try_var(&format!("{prefix}layer0.edge.{}.att", e.edge_type.name()))
            .is_none()
        {
            return Err(EncoderError::UnknownEdgeType(e.edge_type.name()));
        }
    }
    let mut h = input_projection(tape, p, batch, prefix);
    for l in 0..cfg.n_layers {
        h = hgt_layer(tape, p, batch, h, cfg, prefix, l, trace.as_deref_mut());
    }
    Ok(h)
}

/// Input projections followed by `cfg.n_layers` HGT layers.
pub fn encode(
    tape: &mut Tape,
    p: &Bound,
    batch: &GraphBatch,
    cfg: &EncoderConfig,
    prefix: &str,
) -> Result<NodeVars, EncoderError> {
    encode_inner(tape, p, batch, cfg, prefix, None)
}

/// Like [`encode`], also returning every layer's attention weights.
pub fn encode_traced(
    tape: &mut Tape,
    p: &Bound,
    batch: &GraphBatch,
    cfg: &EncoderConfig,
    prefix: &str,
) -> Result<(NodeVars, Vec<AttentionTrace>), EncoderError> {
    let mut tr = Vec::new();
    let h = encode_inner(tape, p, batch, cfg, prefix, Some(&mut tr))?;
    Ok((h, tr))
}

/// Per-graph mean over the union of the selected node sets (`n_graphs x h`).
/// Graphs with no selected nodes pool to zeros.
pub fn mean_pool(tape: &mut Tape, batch: &GraphBatch, h: NodeVars, sets: &[NodeType]) -> Var {
    let parts: Vec<Var> = sets.iter().map(|&t| h.get(t)).collect();
    let seg: Vec<usize> = sets
        .iter()
        .flat_map(|&t| batch.membership(t).iter().copied())
        .collect();
    let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
    tape.segment_mean(x, seg.into(), batch.n_graphs)
}

/// Classification readout per graph (`n_graphs x readout_dim`).
pub fn classify_readout(
    tape: &mut Tape,
    batch: &GraphBatch,
    h: NodeVars,
    cfg: &EncoderConfig,
) -> Result<Var, EncoderError> {
    let posts = mean_pool(tape, batch, h, &[NodeType::Post]);
    let users = mean_pool(tape, batch, h, &[NodeType::User]);
    match cfg.readout {
        Readout::PoolsOnly => Ok(tape.concat_cols(&[posts, users])),
        Readout::ArticleAndPools => {
            let m = batch.membership(NodeType::Article);
            if m.len() != batch.n_graphs || m.iter().enumerate().any(|(i, &g)| i != g) {
                return Err(EncoderError::ArticleCount {
                    graphs: batch.n_graphs,
                    articles: m.len(),
                });
            }
            Ok(tape.concat_cols(&[h.get(NodeType::Article), posts, users]))
        }
    }
}

/// Two-way class logits per graph.
pub fn classify_logits(
    tape: &mut Tape,
    p: &Bound,
    batch: &GraphBatch,
    h: NodeVars,
    cfg: &EncoderConfig,
) -> Result<Var, EncoderError> {
    let r = classify_readout(tape, batch, h, cfg)?;
    Ok(linear(tape, p, r, "head.classify"))
}

/// Predicted `ln(1 + retweets)` per graph.
pub fn count_prediction(
    tape: &mut Tape,
    p: &Bound,
    batch: &GraphBatch,
    h: NodeVars,
    cfg: &EncoderConfig,
) -> Result<Var, EncoderError> {
    let r = classify_readout(tape, batch, h, cfg)?;
    Ok(linear(tape, p, r, "head.count"))
}

/// Match logit from article-side and context-side pools (`n x h` each).
pub fn context_logits(tape: &mut Tape, p: &Bound, article_pool: Var, context_pool: Var) -> Var {
    let x = tape.concat_cols(&[article_pool, context_pool]);
    linear(tape, p, x, "head.context")
}

/// Feature reconstruction for the given embedding rows.
pub fn reconstruct(tape: &mut Tape, p: &Bound, rows: Var) -> Var {
    linear(tape, p, rows, "head.reconstruct")
}

#[cfg(test)]
mod tests {
    use super::super::Model;
    use super::*;
    use crate::hetgraph::{EdgeKind, HeteroGraph, PostSubtype};
    use crate::numerics::{grad_check, softmax_rows_value, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Article, `np` posts (first is a tweet, rest alternate retweet/tweet), `nu` users.
    fn graph(np: usize, nu: usize, d: usize, seed: u64) -> HeteroGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = HeteroGraph::article_only("g", rand_tensor(1, d, &mut rng));
        g.post_x = rand_tensor(np, d, &mut rng);
        g.user_x = rand_tensor(nu, d, &mut rng);
        let mut cites = vec![];
        let mut rts = vec![];
        let mut posts = vec![];
        let mut reposts = vec![];
        for i in 0..np {
            let u = i % nu.max(1);
            if i % 2 == 1 {
                g.post_subtype.push(PostSubtype::Retweet);
                rts.push((i, i - 1));
                if nu > 0 {
                    reposts.push((u, i));
                }
            } else {
                g.post_subtype.push(PostSubtype::Tweet);
                cites.push((i, 0));
                if nu > 0 {
                    posts.push((u, i));
                }
            }
        }
        for (k, v) in [
            (EdgeKind::TweetCitesArticle, cites),
            (EdgeKind::RetweetCitesTweet, rts),
            (EdgeKind::UserPostsTweet, posts),
            (EdgeKind::UserPostsRetweet, reposts),
        ] {
            if !v.is_empty() {
                g.edges.insert(k.name().into(), v);
            }
        }
        crate::hetgraph::validate(&g).unwrap();
        g
    }

    fn small_cfg(d: usize) -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 4,
            ..EncoderConfig::with_feature_dim(d)
        }
    }

    fn run(m: &Model, g: &HeteroGraph) -> [Tensor; 3] {
        let b = GraphBatch::single(g);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let h = encode(&mut tape, &p, &b, &m.cfg, "").unwrap();
        NodeType::ALL.map(|t| tape.value(h.get(t)).clone())
    }

    #[test]
    fn default_output_shapes() {
        let m = Model::new(EncoderConfig::with_feature_dim(6), 0).unwrap();
        let g = graph(5, 3, 6, 1);
        let [a, p, u] = run(&m, &g);
        assert_eq!((a.shape(), p.shape(), u.shape()), ((1, 64), (5, 64), (3, 64)));
        let lone = HeteroGraph::article_only("a", Tensor::filled(1, 6, 0.5));
        let [a, p, u] = run(&m, &lone);
        assert_eq!((a.shape(), p.shape(), u.shape()), ((1, 64), (0, 64), (0, 64)));
        assert!(a.is_finite());
    }

    #[test]
    fn attention_normalised_per_target_and_head() {
        let m = Model::new(EncoderConfig::with_feature_dim(6), 4).unwrap();
        let g = graph(20, 7, 6, 2);
        let b = GraphBatch::single(&g);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let (_, traces) = encode_traced(&mut tape, &p, &b, &m.cfg, "").unwrap();
        assert_eq!(traces.len(), 2 * 3);
        for tr in &traces {
            let n = b.count(tr.target);
            let mut sums = vec![[0.0; 2]; n];
            let mut deg = vec![0usize; n];
            for (i, &d) in tr.dst.iter().enumerate() {
                deg[d] += 1;
                for h in 0..2 {
                    sums[d][h] += tr.weights.get(i, h);
                }
            }
            for (d, s) in sums.iter().enumerate() {
                if deg[d] > 0 {
                    for v in s {
                        assert!((v - 1.0).abs() <= 1e-12, "{v}");
                    }
                }
            }
            for (i, &d) in tr.dst.iter().enumerate() {
                if deg[d] == 1 {
                    for h in 0..2 {
                        assert_eq!(tr.weights.get(i, h), 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn isolated_user_changes_nothing() {
        let m = Model::new(EncoderConfig::with_feature_dim(5), 7).unwrap();
        let g = graph(6, 3, 5, 3);
        let mut g2 = g.clone();
        let extra = Tensor::filled(1, 5, 0.3);
        g2.user_x = Tensor::vstack(&[&g.user_x, &extra], 5);
        let before = run(&m, &g);
        let after = run(&m, &g2);
        assert_eq!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
        for r in 0..3 {
            assert_eq!(before[2].row(r), after[2].row(r));
        }
    }

    #[test]
    fn unknown_edge_type_is_config_error() {
        let mut cfg = EncoderConfig::with_feature_dim(4);
        cfg.edge_types.retain(|e| !e.contains("retweet_cites"));
        let m = Model::new(cfg, 0).unwrap();
        let g = graph(4, 2, 4, 0);
        let b = GraphBatch::single(&g);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        assert!(matches!(
            encode(&mut tape, &p, &b, &m.cfg, ""),
            Err(EncoderError::UnknownEdgeType(_))
        ));
        assert!(m.check_batch(&b).is_err());
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let mut m = Model::new(EncoderConfig::with_feature_dim(4), 0).unwrap();
        for n in ["head.classify.weight", "head.classify.bias"] {
            let t = m.params.get_mut(n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = graph(3, 2, 4, 0);
        let probs = m.predict_proba(&[&g]).unwrap();
        assert_eq!(probs.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn random_logits_softmax_sums_to_one() {
        let m = Model::new(EncoderConfig::with_feature_dim(4), 11).unwrap();
        let gs: Vec<HeteroGraph> = (0..4).map(|s| graph(3 + s as usize, 2, 4, s)).collect();
        let refs: Vec<&HeteroGraph> = gs.iter().collect();
        let probs = m.predict_proba(&refs).unwrap();
        for r in 0..4 {
            assert!((probs.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let again = softmax_rows_value(&probs.map(f64::ln));
        assert!((again.get(0, 0) - probs.get(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn batched_equals_single() {
        let m = Model::new(small_cfg(3), 5).unwrap();
        let (a, b) = (graph(4, 2, 3, 1), graph(3, 3, 3, 2));
        let both = m.predict_proba(&[&a, &b]).unwrap();
        let pa = m.predict_proba(&[&a]).unwrap();
        let pb = m.predict_proba(&[&b]).unwrap();
        for c in 0..2 {
            assert!((both.get(0, c) - pa.get(0, c)).abs() < 1e-12);
            assert!((both.get(1, c) - pb.get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_of_single_and_identical_rows() {
        let mut tape = Tape::new();
        let mut g = HeteroGraph::article_only("a", Tensor::filled(1, 2, 0.0));
        g.post_x = Tensor::filled(1, 2, 0.0);
        g.post_subtype = vec![PostSubtype::Tweet];
        let b = GraphBatch::single(&g);
        let row = tape.constant(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        let empty = tape.constant(Tensor::zeros(0, 3));
        let h = NodeVars([row, row, empty]);
        let pooled = mean_pool(&mut tape, &b, h, &[NodeType::Post]);
        assert_eq!(tape.value(pooled).row(0), &[1.0, 2.0, 3.0]);
        let users = mean_pool(&mut tape, &b, h, &[NodeType::User]);
        assert_eq!(tape.value(users).row(0), &[0.0, 0.0, 0.0]);
        let both = mean_pool(&mut tape, &b, h, &[NodeType::Article, NodeType::Post]);
        assert_eq!(tape.value(both).row(0), &[1.0, 2.0, 3.0]);
    }

    fn check_head(head: &str) {
        let cfg = small_cfg(3);
        let mut m = Model::new(cfg.clone(), 9).unwrap();
        m.add_context_encoder(10);
        let g = graph(4, 3, 3, 5);
        let ctx = crate::hetgraph::context_subgraph(&g);
        let b = GraphBatch::single(&g);
        let bc = GraphBatch::single(&ctx);
        let head = head.to_string();
        let report = grad_check(
            &m.params,
            |tape, p| {
                let h = encode(tape, p, &b, &cfg, "").unwrap();
                match head.as_str() {
                    "classify" => {
                        let l = classify_logits(tape, p, &b, h, &cfg).unwrap();
                        tape.softmax_cross_entropy(l, &[1])
                    }
                    "count" => {
                        let c = count_prediction(tape, p, &b, h, &cfg).unwrap();
                        tape.mse(c, Tensor::scalar(0.7))
                    }
                    "reconstruct" => {
                        let r = reconstruct(tape, p, h.get(NodeType::Post));
                        tape.mse(r, Tensor::filled(4, 3, 0.2))
                    }
                    _ => {
                        let hc = encode(tape, p, &bc, &cfg, super::super::CONTEXT_ENCODER_PREFIX)
                            .unwrap();
                        let sets = [NodeType::Post, NodeType::User];
                        let pa = mean_pool(tape, &b, h, &sets);
                        let pc = mean_pool(tape, &bc, hc, &sets);
                        let l = context_logits(tape, p, pa, pc);
                        tape.bce_with_logits(l, &[1.0])
                    }
                }
            },
            GradCheckOptions::default(),
        );
        assert!(report.passed(), "{head}: {:?}", report.worst());
    }

    #[test]
    fn gradcheck_classify() {
        check_head("classify");
    }

    #[test]
    fn gradcheck_count() {
        check_head("count");
    }

    #[test]
    fn gradcheck_reconstruct() {
        check_head("reconstruct");
    }

    #[test]
    fn gradcheck_context() {
        check_head("context");
    }
}
