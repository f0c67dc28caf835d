//! Two-layer heterogeneous graph transformer encoder with pooling readouts and
//! the task heads used by pre-training and fine-tuning.
//!
//! Parameter names are stable and double as checkpoint keys:
//!
//! | name | shape |
//! |------|-------|
//! | `input.<node>.weight` / `.bias` | `d x h` / `1 x h` |
//! | `layer<l>.node.<node>.{key,query,value,out}.weight` / `.bias` | `h x h` / `1 x h` |
//! | `layer<l>.edge.<edge>.att` / `.msg` | `h x h/heads` (one block per head) |
//! | `layer<l>.edge.<edge>.prior` | `1 x 1` |
//! | `head.reconstruct.weight` / `.bias` | `h x d` / `1 x d` |
//! | `head.context.weight` / `.bias` | `2h x 1` / `1 x 1` |
//! | `head.count.weight` / `.bias` | `r x 1` / `1 x 1` |
//! | `head.classify.weight` / `.bias` | `r x 2` / `1 x 2` |
//!
//! `r` is the classification readout width (`3h` with the article embedding,
//! `2h` without). The auxiliary context-graph encoder, when present, repeats
//! the encoder names under the `context_encoder.` prefix.

mod batch;
mod checkpoint;
mod layer;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hetgraph::{EdgeType, HeteroGraph, NodeType};
use crate::numerics::{glorot_uniform, softmax_rows_value, ParamSet, Tape, Tensor};

pub use batch::{BatchEdges, GraphBatch};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, LoadOptions, CHECKPOINT_VERSION};
pub use layer::{
    classify_logits, classify_readout, context_logits, count_prediction, encode, encode_traced,
    hgt_layer, input_projection, linear, mean_pool, reconstruct, AttentionTrace, NodeVars,
};

/// Prefix of the auxiliary context-graph encoder.
pub const CONTEXT_ENCODER_PREFIX: &str = "context_encoder.";

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("graph uses edge type `{0}` that the encoder has no weights for")]
    UnknownEdgeType(String),
    #[error("feature dimension mismatch: encoder expects {expected}, data has {found}")]
    FeatureDim { expected: usize, found: usize },
    #[error("classification readout needs one article per graph ({graphs} graphs, {articles} articles)")]
    ArticleCount { graphs: usize, articles: usize },
}

/// What the classification readout concatenates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// `[article | mean(posts) | mean(users)]`
    #[default]
    ArticleAndPools,
    /// `[mean(posts) | mean(users)]`
    PoolsOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub edge_types: Vec<String>,
    pub readout: Readout,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: crate::hetgraph::DEFAULT_FEATURE_DIM,
            hidden_dim: 64,
            n_layers: 2,
            n_heads: 2,
            edge_types: EdgeType::all().iter().map(|e| e.name()).collect(),
            readout: Readout::ArticleAndPools,
        }
    }
}

impl EncoderConfig {
    pub fn with_feature_dim(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let err = |m: String| Err(EncoderError::Config(m));
        if self.n_layers == 0 {
            return err("n_layers must be >= 1".into());
        }
        if self.n_heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.n_heads != 0 {
            return err(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.feature_dim == 0 {
            return err("feature_dim must be positive".into());
        }
        let mut seen = BTreeSet::new();
        for name in &self.edge_types {
            if EdgeType::parse(name).is_none() {
                return Err(EncoderError::UnknownEdgeType(name.clone()));
            }
            if !seen.insert(name) {
                return err(format!("edge type `{name}` listed twice"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn readout_dim(&self) -> usize {
        match self.readout {
            Readout::ArticleAndPools => 3 * self.hidden_dim,
            Readout::PoolsOnly => 2 * self.hidden_dim,
        }
    }

    pub fn edge_type_list(&self) -> Vec<EdgeType> {
        self.edge_types
            .iter()
            .filter_map(|n| EdgeType::parse(n))
            .collect()
    }

    /// Shapes of every encoder parameter under `prefix`.
    pub fn encoder_shapes(&self, prefix: &str) -> BTreeMap<String, (usize, usize)> {
        let (d, h, dk) = (self.feature_dim, self.hidden_dim, self.head_dim());
        let mut m = BTreeMap::new();
        for t in NodeType::ALL {
            m.insert(format!("{prefix}input.{}.weight", t.name()), (d, h));
            m.insert(format!("{prefix}input.{}.bias", t.name()), (1, h));
        }
        for l in 0..self.n_layers {
            for t in NodeType::ALL {
                for part in ["key", "query", "value", "out"] {
                    m.insert(format!("{prefix}layer{l}.node.{}.{part}.weight", t.name()), (h, h));
                    m.insert(format!("{prefix}layer{l}.node.{}.{part}.bias", t.name()), (1, h));
                }
            }
            for e in &self.edge_types {
                m.insert(format!("{prefix}layer{l}.edge.{e}.att"), (h, dk));
                m.insert(format!("{prefix}layer{l}.edge.{e}.msg"), (h, dk));
                m.insert(format!("{prefix}layer{l}.edge.{e}.prior"), (1, 1));
            }
        }
        m
    }

    pub fn head_shapes(&self) -> BTreeMap<String, (usize, usize)> {
        let (d, h, r) = (self.feature_dim, self.hidden_dim, self.readout_dim());
        [
            ("head.reconstruct.weight", (h, d)),
            ("head.reconstruct.bias", (1, d)),
            ("head.context.weight", (2 * h, 1)),
            ("head.context.bias", (1, 1)),
            ("head.count.weight", (r, 1)),
            ("head.count.bias", (1, 1)),
            ("head.classify.weight", (r, 2)),
            ("head.classify.bias", (1, 2)),
        ]
        .into_iter()
        .map(|(k, s)| (k.to_string(), s))
        .collect()
    }
}

fn init_shape(name: &str, (r, c): (usize, usize), dk: usize, rng: &mut ChaCha8Rng) -> Tensor {
    if name.ends_with(".bias") {
        Tensor::zeros(r, c)
    } else if name.ends_with(".prior") {
        Tensor::filled(r, c, 1.0)
    } else if name.ends_with(".att") || name.ends_with(".msg") {
        // one dk x dk Glorot block per head
        let blocks: Vec<Tensor> = (0..r / dk).map(|_| glorot_uniform(dk, dk, rng)).collect();
        let refs: Vec<&Tensor> = blocks.iter().collect();
        Tensor::vstack(&refs, c)
    } else {
        glorot_uniform(r, c, rng)
    }
}

fn init_params(shapes: &BTreeMap<String, (usize, usize)>, dk: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    for (name, &shape) in shapes {
        ps.insert(name.clone(), init_shape(name, shape, dk, &mut rng));
    }
    ps
}

/// Encoder weights, task heads and (optionally) the auxiliary context encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: EncoderConfig,
    pub params: ParamSet,
    /// Seed the current heads were drawn from.
    pub head_seed: u64,
}

impl Model {
    /// Fresh model: encoder from `seed`, heads from `seed + 1`.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let params = init_params(&cfg.encoder_shapes(""), cfg.head_dim(), seed);
        let mut m = Self {
            cfg,
            params,
            head_seed: seed.wrapping_add(1),
        };
        m.reinit_heads(m.head_seed);
        Ok(m)
    }

    /// Redraws every task head from `seed`; encoder weights are untouched.
    pub fn reinit_heads(&mut self, seed: u64) {
        let heads = init_params(&self.cfg.head_shapes(), self.cfg.head_dim(), seed);
        for (k, v) in heads.iter() {
            self.params.insert(k.clone(), v.clone());
        }
        self.head_seed = seed;
    }

    pub fn has_context_encoder(&self) -> bool {
        self.params
            .names()
            .any(|n| n.starts_with(CONTEXT_ENCODER_PREFIX))
    }

    /// Adds a freshly initialised auxiliary context encoder.
    pub fn add_context_encoder(&mut self, seed: u64) {
        let aux = init_params(
            &self.cfg.encoder_shapes(CONTEXT_ENCODER_PREFIX),
            self.cfg.head_dim(),
            seed,
        );
        for (k, v) in aux.iter() {
            self.params.insert(k.clone(), v.clone());
        }
    }

    pub fn drop_context_encoder(&mut self) {
        let names: Vec<String> = self
            .params
            .names()
            .filter(|n| n.starts_with(CONTEXT_ENCODER_PREFIX))
            .cloned()
            .collect();
        for n in names {
            self.params.remove(&n);
        }
    }

    /// Expected shape table for the current parameter layout.
    pub fn expected_shapes(&self) -> BTreeMap<String, (usize, usize)> {
        let mut m = self.cfg.encoder_shapes("");
        m.extend(self.cfg.head_shapes());
        if self.has_context_encoder() {
            m.extend(self.cfg.encoder_shapes(CONTEXT_ENCODER_PREFIX));
        }
        m
    }

    /// Checks that a batch can be encoded by this model.
    pub fn check_batch(&self, batch: &GraphBatch) -> Result<(), EncoderError> {
        if batch.n_graphs > 0 && batch.feature_dim != self.cfg.feature_dim {
            return Err(EncoderError::FeatureDim {
                expected: self.cfg.feature_dim,
                found: batch.feature_dim,
            });
        }
        let known: BTreeSet<EdgeType> = self.cfg.edge_type_list().into_iter().collect();
        for e in &batch.edges {
            if !known.contains(&e.edge_type) {
                return Err(EncoderError::UnknownEdgeType(e.edge_type.name()));
            }
        }
        Ok(())
    }

    /// Class probabilities `(P(real), P(fake))` per graph, no gradients kept.
    pub fn predict_proba(&self, graphs: &[&HeteroGraph]) -> Result<Tensor, EncoderError> {
        let batch = GraphBatch::new(graphs);
        self.check_batch(&batch)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let nodes = encode(&mut tape, &bound, &batch, &self.cfg, "")?;
        let logits = classify_logits(&mut tape, &bound, &batch, nodes, &self.cfg)?;
        Ok(softmax_rows_value(tape.value(logits)))
    }
}
