use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{significance, SignificanceReport};
use super::{confusion_and_metrics, kfold, EvalError, Metrics};
use crate::encoder::{EncoderConfig, Model};
use crate::hetgraph::{Corpus, HeteroGraph};
use crate::trainer::{finetune, finetune_start, predict, pretrain, Objective, TrainConfig};

/// One row of the pre-training matrix: an optional node-level stage followed
/// by an optional retweet-count stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Setup {
    pub node: Option<Objective>,
    pub retweet_count: bool,
}

impl Setup {
    pub const TABLE: [Setup; 6] = [
        Setup { node: None, retweet_count: false },
        Setup { node: Some(Objective::ContextPred), retweet_count: false },
        Setup { node: Some(Objective::NodeMask), retweet_count: false },
        Setup { node: None, retweet_count: true },
        Setup { node: Some(Objective::ContextPred), retweet_count: true },
        Setup { node: Some(Objective::NodeMask), retweet_count: true },
    ];

    pub fn name(&self) -> String {
        let node = match self.node {
            Some(Objective::ContextPred) => Some("ContextPred"),
            Some(Objective::NodeMask) => Some("NodeMasking"),
            Some(o) => Some(o.name()),
            None => None,
        };
        match (node, self.retweet_count) {
            (None, false) => "none".into(),
            (None, true) => "#RT".into(),
            (Some(n), false) => n.into(),
            (Some(n), true) => format!("{n} & #RT"),
        }
    }

    pub fn pretrains(&self) -> bool {
        self.node.is_some() || self.retweet_count
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub k: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub encoder: EncoderConfig,
    /// `None` uses each objective's default schedule.
    pub node_epochs: Option<usize>,
    pub graph_epochs: Option<usize>,
    /// `Some(0)` evaluates the initial model without fine-tuning.
    pub finetune_epochs: Option<usize>,
    pub setups: Vec<Setup>,
    /// When false every setup starts from scratch.
    pub pretraining: bool,
    /// Produce the report that fine-tunes on every training graph.
    pub full: bool,
    /// Also produce a report fine-tuning on this many graphs per fold.
    pub low_resource: Option<usize>,
    pub alpha: f64,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            k: 5,
            batch_size: 128,
            lr: 0.001,
            encoder: EncoderConfig::default(),
            node_epochs: None,
            graph_epochs: None,
            finetune_epochs: None,
            setups: Setup::TABLE.to_vec(),
            pretraining: true,
            full: true,
            low_resource: None,
            alpha: 0.01,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    fn train_cfg(&self, objective: Objective, epochs: Option<usize>, seed: u64) -> TrainConfig {
        TrainConfig {
            objective,
            batch_size: self.batch_size,
            lr: self.lr,
            epochs,
            seed,
            encoder: self.encoder.clone(),
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupResult {
    pub setup: String,
    pub folds: Vec<Metrics>,
    pub mean: Metrics,
    /// Graphs fine-tuned on, per fold.
    pub train_sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: String,
    pub train_count: Option<usize>,
    pub pretrain_corpus: String,
    pub finetune_corpus: String,
    pub config: ExperimentConfig,
    pub setups: Vec<SetupResult>,
    pub significance: Vec<SignificanceReport>,
    /// Per-epoch pre-training losses by stage.
    pub pretrain_losses: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: Vec<Metrics>,
    pub mean: Metrics,
    pub train_sizes: Vec<usize>,
}

const TAG_PRETRAIN: u64 = 1;
const TAG_GRAPH_STAGE: u64 = 2;
const TAG_FINETUNE: u64 = 3;
const TAG_FOLDS: u64 = 4;

fn derive_seed(master: u64, tag: u64, a: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(tag << 32 | a);
    r.next_u64()
}

fn fold_metrics(
    graphs: &[&HeteroGraph],
    train: &[usize],
    test: &[usize],
    cfg: &TrainConfig,
    init: Option<&Model>,
) -> Result<(Metrics, usize), EvalError> {
    let train_g: Vec<&HeteroGraph> = train.iter().map(|&i| graphs[i]).collect();
    let test_g: Vec<&HeteroGraph> = test.iter().map(|&i| graphs[i]).collect();
    let (model, used) = if cfg.epochs == Some(0) {
        let used = cfg.train_count.unwrap_or(train_g.len());
        (finetune_start(&train_g, cfg, init)?, used)
    } else {
        let (m, log) = finetune(&train_g, cfg, init)?;
        (m, log.train_ids.len())
    };
    let preds = predict(&model, &test_g).map_err(|e| EvalError::Train(e.into()))?;
    let truth: Vec<u8> = test_g
        .iter()
        .map(|g| g.label.ok_or_else(|| EvalError::Config(format!("graph `{}` has no label", g.id))))
        .collect::<Result<_, _>>()?;
    let pred: Vec<u8> = preds.iter().map(|p| p.label).collect();
    Ok((confusion_and_metrics(&truth, &pred)?, used))
}

/// K-fold cross-validated fine-tuning; the fold plan is seeded by `cfg.seed`.
pub fn cross_validate(
    graphs: &[&HeteroGraph],
    k: usize,
    cfg: &TrainConfig,
    init: Option<&Model>,
) -> Result<CvResult, EvalError> {
    let plan = kfold(graphs.len(), k, cfg.seed)?;
    let mut folds = Vec::with_capacity(k);
    let mut train_sizes = Vec::with_capacity(k);
    for f in &plan.folds {
        let (m, n) = fold_metrics(graphs, &f.train, &f.test, cfg, init)?;
        folds.push(m);
        train_sizes.push(n);
    }
    Ok(CvResult {
        mean: Metrics::mean(&folds),
        folds,
        train_sizes,
    })
}

type Pretrained = (Option<Model>, BTreeMap<String, Vec<f64>>);

fn pretrain_all(pre: &[&HeteroGraph], cfg: &ExperimentConfig) -> Result<Vec<Pretrained>, EvalError> {
    let mut node_objs: Vec<Objective> = cfg.setups.iter().filter_map(|s| s.node).collect();
    node_objs.sort_by_key(|o| o.name());
    node_objs.dedup();
    if !cfg.pretraining {
        return Ok(cfg.setups.iter().map(|_| (None, BTreeMap::new())).collect());
    }
    let node_models: Vec<(Objective, Model, Vec<f64>)> = node_objs
        .par_iter()
        .map(|&o| {
            let tc = cfg.train_cfg(o, cfg.node_epochs, derive_seed(cfg.seed, TAG_PRETRAIN, o as u64));
            let (m, log) = pretrain(pre, &tc, None)?;
            Ok((o, m, log.losses()))
        })
        .collect::<Result<_, EvalError>>()?;
    cfg.setups
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut losses = BTreeMap::new();
            let base = s.node.map(|o| {
                let (_, m, l) = node_models.iter().find(|(n, _, _)| *n == o).unwrap();
                losses.insert(Setup { node: Some(o), retweet_count: false }.name(), l.clone());
                m
            });
            if !s.retweet_count {
                return Ok((base.cloned(), losses));
            }
            let tc = cfg.train_cfg(
                Objective::RetweetCount,
                cfg.graph_epochs,
                derive_seed(cfg.seed, TAG_GRAPH_STAGE, i as u64),
            );
            let (m, log) = pretrain(pre, &tc, base)?;
            losses.insert(format!("{} (graph stage)", s.name()), log.losses());
            Ok((Some(m), losses))
        })
        .collect()
}

fn evaluate_mode(
    pretrained: &[Pretrained],
    fine: &Corpus,
    cfg: &ExperimentConfig,
    train_count: Option<usize>,
    pretrain_name: &str,
) -> Result<ExperimentReport, EvalError> {
    let graphs: Vec<&HeteroGraph> = fine.graphs.iter().collect();
    let plan = kfold(graphs.len(), cfg.k, derive_seed(cfg.seed, TAG_FOLDS, 0))?;
    let cells: Vec<(usize, usize)> = (0..cfg.setups.len())
        .flat_map(|s| (0..cfg.k).map(move |f| (s, f)))
        .collect();
    let results: Vec<(Metrics, usize)> = cells
        .par_iter()
        .map(|&(s, f)| {
            // the fine-tuning seed depends on the fold only, so setups differ
            // in their starting weights and nothing else
            let mut tc = cfg.train_cfg(
                Objective::Finetune,
                cfg.finetune_epochs,
                derive_seed(cfg.seed, TAG_FINETUNE, f as u64),
            );
            tc.train_count = train_count;
            let fold = &plan.folds[f];
            fold_metrics(&graphs, &fold.train, &fold.test, &tc, pretrained[s].0.as_ref())
        })
        .collect::<Result<_, _>>()?;
    let mut setups = Vec::with_capacity(cfg.setups.len());
    for (s, setup) in cfg.setups.iter().enumerate() {
        let cell = &results[s * cfg.k..(s + 1) * cfg.k];
        let folds: Vec<Metrics> = cell.iter().map(|c| c.0).collect();
        setups.push(SetupResult {
            setup: setup.name(),
            mean: Metrics::mean(&folds),
            folds,
            train_sizes: cell.iter().map(|c| c.1).collect(),
        });
    }
    let names: Vec<String> = setups.iter().map(|s| s.setup.clone()).collect();
    let pick = |f: fn(&Metrics) -> f64| -> Vec<Vec<f64>> {
        setups.iter().map(|s| s.folds.iter().map(f).collect()).collect()
    };
    let significance = vec![
        significance("macro_f1", &names, &pick(|m| m.macro_f1), cfg.alpha)?,
        significance("accuracy", &names, &pick(|m| m.accuracy), cfg.alpha)?,
    ];
    let mut pretrain_losses = BTreeMap::new();
    for (_, l) in pretrained {
        pretrain_losses.extend(l.clone());
    }
    Ok(ExperimentReport {
        mode: if train_count.is_some() { "low_resource" } else { "full" }.into(),
        train_count,
        pretrain_corpus: pretrain_name.to_string(),
        finetune_corpus: fine.name.clone(),
        config: cfg.clone(),
        setups,
        significance,
        pretrain_losses,
    })
}

/// Pre-trains every setup once on `pre`, then cross-validates fine-tuning on
/// `fine` for each requested mode.
pub fn run_experiment(
    pre: &Corpus,
    fine: &Corpus,
    cfg: &ExperimentConfig,
) -> Result<Vec<ExperimentReport>, EvalError> {
    if cfg.setups.is_empty() {
        return Err(EvalError::Config("no setups".into()));
    }
    if !cfg.full && cfg.low_resource.is_none() {
        return Err(EvalError::Config("no report requested".into()));
    }
    if pre.feature_dim != fine.feature_dim {
        return Err(EvalError::Config(format!(
            "feature dimensions differ: pre-training corpus {}, fine-tuning corpus {}",
            pre.feature_dim, fine.feature_dim
        )));
    }
    if let Some(n) = cfg.low_resource {
        let smallest_train = fine.len() - fine.len().div_ceil(cfg.k.max(1));
        if n == 0 || n > smallest_train {
            return Err(EvalError::Config(format!(
                "low-resource count {n} exceeds the smallest training split ({smallest_train})"
            )));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| EvalError::Config(e.to_string()))?;
    pool.install(|| {
        let pre_graphs: Vec<&HeteroGraph> = pre.graphs.iter().collect();
        let pretrained = pretrain_all(&pre_graphs, cfg)?;
        let mut reports = Vec::new();
        if cfg.full {
            reports.push(evaluate_mode(&pretrained, fine, cfg, None, &pre.name)?);
        }
        if let Some(n) = cfg.low_resource {
            reports.push(evaluate_mode(&pretrained, fine, cfg, Some(n), &pre.name)?);
        }
        Ok(reports)
    })
}

/// Aligned plain-text table: one row per setup, columns P, R, ACC, F1.
pub fn render_table(r: &ExperimentReport) -> String {
    let mut s = String::new();
    let title = match r.train_count {
        Some(n) => format!("{} -> {} ({n} labelled samples per fold)", r.pretrain_corpus, r.finetune_corpus),
        None => format!("{} -> {}", r.pretrain_corpus, r.finetune_corpus),
    };
    let width = r.setups.iter().map(|x| x.setup.len()).max().unwrap_or(5).max(5);
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}", "setup", "P", "R", "ACC", "F1");
    for x in &r.setups {
        let m = x.mean;
        let _ = writeln!(
            s,
            "{:<width$}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}",
            x.setup, m.precision, m.recall, m.accuracy, m.macro_f1
        );
    }
    for sig in &r.significance {
        let hits: Vec<String> = sig
            .pairs
            .iter()
            .filter(|p| p.significant)
            .map(|p| format!("{} vs {}", p.a, p.b))
            .collect();
        let _ = writeln!(
            s,
            "{}: {} of {} pairs significant at alpha {}{}",
            sig.metric,
            hits.len(),
            sig.comparisons,
            sig.alpha,
            if hits.is_empty() { String::new() } else { format!(" ({})", hits.join(", ")) }
        );
    }
    s
}
