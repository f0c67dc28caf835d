//! Pre-training objectives and the supervised fine-tuning loss.
//!
//! Each objective has a pure batch builder (driven by an explicit RNG) and a
//! loss that records the forward pass on a tape.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::encoder::{
    classify_logits, context_logits, count_prediction, encode, mean_pool, reconstruct,
    EncoderConfig, EncoderError, GraphBatch, CONTEXT_ENCODER_PREFIX,
};
use crate::hetgraph::{context_subgraph, retweet_count, HeteroGraph, NodeType};
use crate::numerics::{Bound, Tape, Tensor, Var};

/// Fraction of post nodes replaced by the mask value.
pub const MASK_FRACTION: f64 = 0.15;
/// Value written into every feature of a masked row.
pub const MASK_VALUE: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("context prediction needs at least 2 graphs, got {0}")]
    PoolTooSmall(usize),
    #[error("graph `{0}` has no label; fine-tuning requires labels")]
    Unlabeled(String),
    #[error("nothing to train on")]
    EmptyBatch,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Number of masked posts for a graph with `n_posts` posts.
pub fn mask_count(n_posts: usize) -> usize {
    if n_posts == 0 {
        return 0;
    }
    (((n_posts as f64) * MASK_FRACTION).floor() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskingBatch {
    /// Copy of the input graph with masked post rows set to `MASK_VALUE`.
    pub graph: HeteroGraph,
    /// Masked post indices, ascending.
    pub mask: Vec<usize>,
    /// Original rows of the masked posts, in `mask` order.
    pub targets: Tensor,
}

/// Masks a random subset of post rows. `None` for graphs without posts.
pub fn build_masking_batch<R: Rng + ?Sized>(g: &HeteroGraph, rng: &mut R) -> Option<MaskingBatch> {
    let n = g.n_posts();
    if n == 0 {
        return None;
    }
    let mut mask = rand::seq::index::sample(rng, n, mask_count(n)).into_vec();
    mask.sort_unstable();
    let d = g.feature_dim();
    let mut graph = g.clone();
    let mut targets = Tensor::zeros(mask.len(), d);
    for (k, &i) in mask.iter().enumerate() {
        targets.row_mut(k).copy_from_slice(g.post_x.row(i));
        graph.post_x.row_mut(i).fill(MASK_VALUE);
    }
    Some(MaskingBatch {
        graph,
        mask,
        targets,
    })
}

/// Mean squared reconstruction error over the masked rows of all batches.
pub fn masking_loss(
    tape: &mut Tape,
    p: &Bound,
    batches: &[MaskingBatch],
    cfg: &EncoderConfig,
) -> Result<Var, ObjectiveError> {
    if batches.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let graphs: Vec<&HeteroGraph> = batches.iter().map(|b| &b.graph).collect();
    let batch = GraphBatch::new(&graphs);
    let h = encode(tape, p, &batch, cfg, "")?;
    let mut rows = Vec::new();
    let mut offset = 0;
    for b in batches {
        rows.extend(b.mask.iter().map(|&i| i + offset));
        offset += b.graph.n_posts();
    }
    let masked = tape.gather_rows(h.get(NodeType::Post), rows.into());
    let recon = reconstruct(tape, p, masked);
    let targets: Vec<&Tensor> = batches.iter().map(|b| &b.targets).collect();
    Ok(tape.mse(recon, Tensor::vstack(&targets, cfg.feature_dim)))
}

/// Article graph `article` of the pool paired with the context of graph `context`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextPair {
    pub article: usize,
    pub context: usize,
    pub label: u8,
}

/// One positive and one negative pair per pool graph, shuffled.
pub fn build_context_pairs<R: Rng + ?Sized>(
    pool_size: usize,
    rng: &mut R,
) -> Result<Vec<ContextPair>, ObjectiveError> {
    if pool_size < 2 {
        return Err(ObjectiveError::PoolTooSmall(pool_size));
    }
    let mut pairs = Vec::with_capacity(2 * pool_size);
    for i in 0..pool_size {
        pairs.push(ContextPair {
            article: i,
            context: i,
            label: 1,
        });
        // uniform over the other pool members
        let mut j = rng.random_range(0..pool_size - 1);
        if j >= i {
            j += 1;
        }
        pairs.push(ContextPair {
            article: i,
            context: j,
            label: 0,
        });
    }
    pairs.shuffle(rng);
    Ok(pairs)
}

/// Binary cross-entropy of the match logit; both encoders take part.
pub fn context_loss(
    tape: &mut Tape,
    p: &Bound,
    pool: &[&HeteroGraph],
    pairs: &[ContextPair],
    cfg: &EncoderConfig,
) -> Result<Var, ObjectiveError> {
    if pairs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let articles: Vec<&HeteroGraph> = pairs.iter().map(|c| pool[c.article]).collect();
    let contexts: Vec<HeteroGraph> = pairs
        .iter()
        .map(|c| context_subgraph(pool[c.context]))
        .collect();
    let context_refs: Vec<&HeteroGraph> = contexts.iter().collect();
    let ba = GraphBatch::new(&articles);
    let bc = GraphBatch::new(&context_refs);
    let ha = encode(tape, p, &ba, cfg, "")?;
    let hc = encode(tape, p, &bc, cfg, CONTEXT_ENCODER_PREFIX)?;
    let sets = [NodeType::Post, NodeType::User];
    let pa = mean_pool(tape, &ba, ha, &sets);
    let pc = mean_pool(tape, &bc, hc, &sets);
    let logits = context_logits(tape, p, pa, pc);
    let labels: Vec<f64> = pairs.iter().map(|c| c.label as f64).collect();
    Ok(tape.bce_with_logits(logits, &labels))
}

/// `ln(1 + retweets)`, read from subtype metadata only.
pub fn count_target(g: &HeteroGraph) -> f64 {
    (retweet_count(g) as f64).ln_1p()
}

pub fn count_loss(
    tape: &mut Tape,
    p: &Bound,
    graphs: &[&HeteroGraph],
    cfg: &EncoderConfig,
) -> Result<Var, ObjectiveError> {
    if graphs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let batch = GraphBatch::new(graphs);
    let h = encode(tape, p, &batch, cfg, "")?;
    let pred = count_prediction(tape, p, &batch, h, cfg)?;
    let target = Tensor::from_vec(graphs.len(), 1, graphs.iter().map(|g| count_target(g)).collect());
    Ok(tape.mse(pred, target))
}

/// Mean two-way cross-entropy against the graph labels.
pub fn classification_loss(
    tape: &mut Tape,
    p: &Bound,
    graphs: &[&HeteroGraph],
    cfg: &EncoderConfig,
) -> Result<Var, ObjectiveError> {
    if graphs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let labels = graphs
        .iter()
        .map(|g| {
            g.label
                .map(usize::from)
                .ok_or_else(|| ObjectiveError::Unlabeled(g.id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let batch = GraphBatch::new(graphs);
    let h = encode(tape, p, &batch, cfg, "")?;
    let logits = classify_logits(tape, p, &batch, h, cfg)?;
    Ok(tape.softmax_cross_entropy(logits, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpusgen::{generate, GenConfig};
    use crate::encoder::Model;
    use crate::numerics::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(n: usize, posts: (usize, usize)) -> Vec<HeteroGraph> {
        let cfg = GenConfig {
            n_graphs: n,
            feature_dim: 3,
            post_count_range: posts,
            user_count_range: (1, 3),
            ..GenConfig::default()
        };
        generate(&cfg).unwrap().graphs
    }

    fn small_model() -> Model {
        let cfg = EncoderConfig {
            hidden_dim: 4,
            ..EncoderConfig::with_feature_dim(3)
        };
        let mut m = Model::new(cfg, 2).unwrap();
        m.add_context_encoder(3);
        m
    }

    #[test]
    fn mask_counts() {
        assert_eq!(mask_count(20), 3);
        assert_eq!(mask_count(1), 1);
        assert_eq!(mask_count(6), 1);
        assert_eq!(mask_count(7), 1);
        assert_eq!(mask_count(14), 2);
        assert_eq!(mask_count(0), 0);
    }

    #[test]
    fn twenty_posts_three_masked_rows_of_ones() {
        let g = &corpus(1, (20, 20))[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = build_masking_batch(g, &mut rng).unwrap();
        assert_eq!(b.mask.len(), 3);
        for i in 0..20 {
            if b.mask.contains(&i) {
                assert!(b.graph.post_x.row(i).iter().all(|&v| v == 1.0));
            } else {
                assert_eq!(b.graph.post_x.row(i), g.post_x.row(i));
            }
        }
        assert_eq!(b.graph.article_x, g.article_x);
        assert_eq!(b.graph.user_x, g.user_x);
    }

    #[test]
    fn postless_graph_skipped() {
        let g = HeteroGraph::article_only("a", Tensor::zeros(1, 3));
        assert!(build_masking_batch(&g, &mut ChaCha8Rng::seed_from_u64(0)).is_none());
    }

    #[test]
    fn pairs_balanced_and_negatives_foreign() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs = build_context_pairs(7, &mut rng).unwrap();
        assert_eq!(pairs.len(), 14);
        assert_eq!(pairs.iter().filter(|p| p.label == 1).count(), 7);
        for p in &pairs {
            assert_eq!(p.label == 1, p.article == p.context);
        }
        assert_eq!(
            build_context_pairs(1, &mut rng),
            Err(ObjectiveError::PoolTooSmall(1))
        );
    }

    #[test]
    fn count_targets() {
        let mut g = corpus(1, (10, 10))[0].clone();
        g.post_subtype = vec![crate::hetgraph::PostSubtype::Tweet; 10];
        assert_eq!(count_target(&g), 0.0);
        for s in g.post_subtype.iter_mut().skip(1) {
            *s = crate::hetgraph::PostSubtype::Retweet;
        }
        assert!((count_target(&g) - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn masking_loss_restricted_to_masked_rows() {
        let m = small_model();
        let g = &corpus(1, (10, 10))[0];
        let b = build_masking_batch(g, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut t = Tape::new();
        let p = m.params.bind(&mut t);
        let l = masking_loss(&mut t, &p, std::slice::from_ref(&b), &m.cfg).unwrap();
        let got = t.value(l).item();

        // oracle: reconstruct every post, compare against the originals with
        // one unmasked original perturbed, average over masked rows only
        let batch = GraphBatch::single(&b.graph);
        let h = encode(&mut t, &p, &batch, &m.cfg, "").unwrap();
        let all = reconstruct(&mut t, &p, h.get(NodeType::Post));
        let recon = t.value(all).clone();
        let mut originals = g.post_x.clone();
        let unmasked = (0..10).find(|i| !b.mask.contains(i)).unwrap();
        originals.row_mut(unmasked)[0] += 5.0;
        let mut sq = 0.0;
        for &i in &b.mask {
            for c in 0..3 {
                sq += (recon.get(i, c) - originals.get(i, c)).powi(2);
            }
        }
        let want = sq / (b.mask.len() * 3) as f64;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn unlabeled_graph_rejected() {
        let m = small_model();
        let mut g = corpus(1, (3, 3))[0].clone();
        g.label = None;
        let mut t = Tape::new();
        let p = m.params.bind(&mut t);
        assert!(matches!(
            classification_loss(&mut t, &p, &[&g], &m.cfg),
            Err(ObjectiveError::Unlabeled(_))
        ));
    }

    #[test]
    fn context_gradcheck_two_pairs() {
        let m = small_model();
        let gs = corpus(2, (2, 4));
        let pool: Vec<&HeteroGraph> = gs.iter().collect();
        let pairs = [
            ContextPair { article: 0, context: 0, label: 1 },
            ContextPair { article: 0, context: 1, label: 0 },
        ];
        let report = grad_check(
            &m.params,
            |t, p| context_loss(t, p, &pool, &pairs, &m.cfg).unwrap(),
            GradCheckOptions::default(),
        );
        assert!(report.passed(), "{:?}", report.worst());
        // both encoders receive gradient
        let mut t = Tape::new();
        let p = m.params.bind(&mut t);
        let l = context_loss(&mut t, &p, &pool, &pairs, &m.cfg).unwrap();
        let g = p.collect(t.backward(l));
        assert!(g["input.post.weight"].max_abs() > 0.0);
        assert!(g["context_encoder.input.post.weight"].max_abs() > 0.0);
    }
}
