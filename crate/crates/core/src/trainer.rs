//! Pre-training and fine-tuning loops.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{
    load_checkpoint, CheckpointError, EncoderConfig, EncoderError, LoadOptions, Model,
};
use crate::hetgraph::HeteroGraph;
use crate::numerics::{AdamState, Tape};
use crate::objectives::{
    build_context_pairs, build_masking_batch, classification_loss, context_loss, count_loss,
    masking_loss, ObjectiveError,
};

/// Corpora up to this size get the short graph-level schedule.
pub const SMALL_CORPUS: usize = 1000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    NodeMask,
    ContextPred,
    RetweetCount,
    Finetune,
}

impl Objective {
    pub const PRETRAINING: [Objective; 3] =
        [Objective::NodeMask, Objective::ContextPred, Objective::RetweetCount];

    pub fn name(self) -> &'static str {
        match self {
            Objective::NodeMask => "node_mask",
            Objective::ContextPred => "context_pred",
            Objective::RetweetCount => "retweet_count",
            Objective::Finetune => "finetune",
        }
    }

    /// Accepts both `node_mask` and `node-mask` spellings.
    pub fn parse(s: &str) -> Option<Objective> {
        let s = s.replace('-', "_");
        [
            Objective::NodeMask,
            Objective::ContextPred,
            Objective::RetweetCount,
            Objective::Finetune,
        ]
        .into_iter()
        .find(|o| o.name() == s)
    }

    pub fn is_graph_level(self) -> bool {
        self == Objective::RetweetCount
    }

    pub fn default_epochs(self, corpus_size: usize) -> usize {
        if self.is_graph_level() && corpus_size <= SMALL_CORPUS {
            25
        } else {
            50
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub lr: f64,
    /// `None` picks the objective's default schedule.
    pub epochs: Option<usize>,
    pub seed: u64,
    pub init_checkpoint: Option<PathBuf>,
    pub head_reinit: bool,
    pub train_count: Option<usize>,
    /// Used when no initial model is given; `feature_dim` is taken from the data.
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Finetune,
            batch_size: 128,
            lr: 0.001,
            epochs: None,
            seed: 42,
            init_checkpoint: None,
            head_reinit: true,
            train_count: None,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, corpus_size: usize) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == Some(0) {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(n) = self.train_count {
            if n == 0 || n > corpus_size {
                return Err(TrainError::Config(format!(
                    "train_count {n} must be in 1..={corpus_size}"
                )));
            }
        }
        Ok(())
    }

    pub fn resolved_epochs(&self, corpus_size: usize) -> usize {
        self.epochs
            .unwrap_or_else(|| self.objective.default_epochs(corpus_size))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    /// Ids of the graphs actually trained on.
    pub train_ids: Vec<String>,
    pub checkpoint: Option<PathBuf>,
}

impl RunLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Independent RNG stream per purpose so changing one use never shifts another.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const STREAM_ORDER: u64 = 1;
const STREAM_OBJECTIVE: u64 = 2;
const STREAM_SUBSET: u64 = 3;

/// Batch boundaries over `n` items; the final partial batch is kept.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect()
}

/// Runs `cfg.objective` on `model` in place.
pub fn train(
    model: &mut Model,
    graphs: &[&HeteroGraph],
    cfg: &TrainConfig,
) -> Result<RunLog, TrainError> {
    cfg.validate(graphs.len())?;
    if graphs.is_empty() {
        return Err(TrainError::Objective(ObjectiveError::EmptyBatch));
    }
    if cfg.objective == Objective::ContextPred {
        if graphs.len() < 2 {
            return Err(ObjectiveError::PoolTooSmall(graphs.len()).into());
        }
        if !model.has_context_encoder() {
            model.add_context_encoder(cfg.seed.wrapping_add(2));
        }
    }
    let epochs = cfg.resolved_epochs(graphs.len());
    let mut order_rng = stream(cfg.seed, STREAM_ORDER);
    let mut obj_rng = stream(cfg.seed, STREAM_OBJECTIVE);
    let mut adam = AdamState::new(cfg.lr);
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        let mut ranges = batch_ranges(order.len(), cfg.batch_size);
        if cfg.objective == Objective::ContextPred && ranges.len() > 1 {
            // a lone trailing graph has no negatives; fold it into the previous batch
            if ranges.last().is_some_and(|r| r.len() == 1) {
                let last = ranges.pop().unwrap();
                ranges.last_mut().unwrap().end = last.end;
            }
        }
        let mut total = 0.0;
        let mut used = 0;
        for r in ranges {
            let batch: Vec<&HeteroGraph> = order[r].iter().map(|&i| graphs[i]).collect();
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let loss = match cfg.objective {
                Objective::NodeMask => {
                    let masked: Vec<_> = batch
                        .iter()
                        .filter_map(|g| build_masking_batch(g, &mut obj_rng))
                        .collect();
                    if masked.is_empty() {
                        continue;
                    }
                    masking_loss(&mut tape, &p, &masked, &model.cfg)?
                }
                Objective::ContextPred => {
                    let pairs = build_context_pairs(batch.len(), &mut obj_rng)?;
                    context_loss(&mut tape, &p, &batch, &pairs, &model.cfg)?
                }
                Objective::RetweetCount => count_loss(&mut tape, &p, &batch, &model.cfg)?,
                Objective::Finetune => classification_loss(&mut tape, &p, &batch, &model.cfg)?,
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            let grads = p.collect(tape.backward(loss));
            adam.step(&mut model.params, &grads);
            total += value;
            used += 1;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: if used > 0 { total / used as f64 } else { 0.0 },
            batches: used,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(RunLog {
        config: cfg.clone(),
        epochs: log,
        train_ids: graphs.iter().map(|g| g.id.clone()).collect(),
        checkpoint: None,
    })
}

fn fresh_model(graphs: &[&HeteroGraph], cfg: &TrainConfig) -> Result<Model, TrainError> {
    let mut ecfg = cfg.encoder.clone();
    if let Some(g) = graphs.first() {
        ecfg.feature_dim = g.feature_dim();
    }
    Ok(Model::new(ecfg, cfg.seed)?)
}

fn initial_model(
    graphs: &[&HeteroGraph],
    cfg: &TrainConfig,
    init: Option<&Model>,
    finetuning: bool,
) -> Result<Model, TrainError> {
    let loaded;
    let init = match (init, &cfg.init_checkpoint) {
        (Some(m), _) => Some(m),
        (None, Some(path)) => {
            loaded = load_checkpoint(path, LoadOptions::default())?;
            Some(&loaded)
        }
        (None, None) => None,
    };
    let Some(init) = init else {
        return fresh_model(graphs, cfg);
    };
    let mut model = init.clone();
    if finetuning {
        model.drop_context_encoder();
        if cfg.head_reinit {
            model.reinit_heads(cfg.seed.wrapping_add(1));
        }
    }
    if let Some(g) = graphs.first() {
        if g.feature_dim() != model.cfg.feature_dim {
            return Err(EncoderError::FeatureDim {
                expected: model.cfg.feature_dim,
                found: g.feature_dim(),
            }
            .into());
        }
    }
    Ok(model)
}

/// Self-supervised pre-training from `init` (or `cfg.init_checkpoint`, or scratch).
pub fn pretrain(
    graphs: &[&HeteroGraph],
    cfg: &TrainConfig,
    init: Option<&Model>,
) -> Result<(Model, RunLog), TrainError> {
    if cfg.objective == Objective::Finetune {
        return Err(TrainError::Config("pretrain needs a pre-training objective".into()));
    }
    let mut model = initial_model(graphs, cfg, init, false)?;
    let log = train(&mut model, graphs, cfg)?;
    Ok((model, log))
}

/// Draws `n` distinct graphs by seed.
pub fn sample_subset<'a>(graphs: &[&'a HeteroGraph], n: usize, seed: u64) -> Vec<&'a HeteroGraph> {
    let mut rng = stream(seed, STREAM_SUBSET);
    let mut idx = rand::seq::index::sample(&mut rng, graphs.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| graphs[i]).collect()
}

/// Supervised fine-tuning; the context encoder of `init` is discarded.
pub fn finetune(
    graphs: &[&HeteroGraph],
    cfg: &TrainConfig,
    init: Option<&Model>,
) -> Result<(Model, RunLog), TrainError> {
    let mut cfg = cfg.clone();
    cfg.objective = Objective::Finetune;
    cfg.validate(graphs.len())?;
    let subset;
    let graphs = match cfg.train_count {
        Some(n) => {
            subset = sample_subset(graphs, n, cfg.seed);
            &subset[..]
        }
        None => graphs,
    };
    if let Some(g) = graphs.iter().find(|g| g.label.is_none()) {
        return Err(ObjectiveError::Unlabeled(g.id.clone()).into());
    }
    let mut model = initial_model(graphs, &cfg, init, true)?;
    let mut run_cfg = cfg.clone();
    run_cfg.train_count = None;
    let mut log = train(&mut model, graphs, &run_cfg)?;
    log.config = cfg;
    Ok((model, log))
}

/// The model fine-tuning would start from, without any training.
pub fn finetune_start(
    graphs: &[&HeteroGraph],
    cfg: &TrainConfig,
    init: Option<&Model>,
) -> Result<Model, TrainError> {
    initial_model(graphs, cfg, init, true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prob_fake: f64,
    pub label: u8,
}

/// Class probabilities and argmax labels, evaluated in chunks.
pub fn predict(model: &Model, graphs: &[&HeteroGraph]) -> Result<Vec<Prediction>, EncoderError> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(128) {
        let probs = model.predict_proba(chunk)?;
        for (i, g) in chunk.iter().enumerate() {
            let (p0, p1) = (probs.get(i, 0), probs.get(i, 1));
            out.push(Prediction {
                id: g.id.clone(),
                prob_fake: p1,
                label: u8::from(p1 > p0),
            });
        }
    }
    Ok(out)
}
