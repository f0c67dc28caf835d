//! Seeded synthetic corpora shaped like the Politifact and Gossipcop context
//! graphs.
//!
//! Node features are isotropic Gaussians around a per-graph centre:
//!
//! ```text
//! centre = graph_noise * z + domain_shift * v + label_sign * signal_strength / 2 * u
//! x_node = centre + eps,   z, eps ~ N(0, I)
//! ```
//!
//! `u` is the label direction, shared by every corpus drawn from the same
//! `space_seed`; `v` is a corpus direction orthogonal to `u`, drawn from the
//! corpus seed and name. With `signal_strength = 0` labels are independent of
//! every feature and of the graph structure.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hetgraph::{Corpus, EdgeKind, HeteroGraph, PostSubtype};
use crate::numerics::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("unknown preset `{0}` (known: pol_like, gos_like, pol_tiny, gos_tiny)")]
    UnknownPreset(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub name: String,
    pub seed: u64,
    pub n_graphs: usize,
    pub feature_dim: usize,
    /// Fraction of fake (label 1) graphs.
    pub label_balance: f64,
    pub post_count_range: (usize, usize),
    pub user_count_range: (usize, usize),
    pub retweet_fraction_mean: f64,
    pub timeline_fraction_mean: f64,
    pub signal_strength: f64,
    pub domain_shift: f64,
    /// Shift of the mean retweet fraction between classes, per unit of
    /// `signal_strength`. Zero disables the coupling.
    pub retweet_label_coupling: f64,
    /// Scale of the shared per-graph centre offset.
    pub graph_noise: f64,
    /// Seed of the label direction; corpora meant for transfer share it.
    pub space_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            seed: 42,
            n_graphs: 100,
            feature_dim: crate::hetgraph::DEFAULT_FEATURE_DIM,
            label_balance: 0.5,
            post_count_range: (5, 60),
            user_count_range: (5, 50),
            retweet_fraction_mean: 0.3,
            timeline_fraction_mean: 0.2,
            signal_strength: 1.0,
            domain_shift: 0.0,
            retweet_label_coupling: 0.1,
            graph_noise: 0.5,
            space_seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let err = |m: String| Err(GenError::Config(m));
        let (pmin, pmax) = self.post_count_range;
        let (umin, umax) = self.user_count_range;
        if pmin > pmax {
            return err(format!("post_count_range min {pmin} > max {pmax}"));
        }
        if umin > umax {
            return err(format!("user_count_range min {umin} > max {umax}"));
        }
        if self.feature_dim == 0 {
            return err("feature_dim must be positive".into());
        }
        for (name, v) in [
            ("label_balance", self.label_balance),
            ("retweet_fraction_mean", self.retweet_fraction_mean),
            ("timeline_fraction_mean", self.timeline_fraction_mean),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("signal_strength", self.signal_strength),
            ("domain_shift", self.domain_shift),
            ("retweet_label_coupling", self.retweet_label_coupling),
            ("graph_noise", self.graph_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if self.retweet_fraction_mean > 0.0 && pmax < 2 {
            return err(format!(
                "retweets requested but at most {pmax} posts per graph (a retweet needs a tweet to cite)"
            ));
        }
        if pmax > 0 && umin == 0 {
            return err("user_count_range min must be >= 1 when posts are generated".into());
        }
        Ok(())
    }
}

/// Named configurations. Tiny presets use narrow features and small graphs.
pub fn presets() -> BTreeMap<&'static str, GenConfig> {
    let mut m = BTreeMap::new();
    m.insert(
        "pol_like",
        GenConfig {
            name: "pol_like".into(),
            n_graphs: 483,
            ..Default::default()
        },
    );
    m.insert(
        "gos_like",
        GenConfig {
            name: "gos_like".into(),
            n_graphs: 12_214,
            label_balance: 0.25,
            domain_shift: 0.5,
            ..Default::default()
        },
    );
    let tiny = GenConfig {
        feature_dim: 32,
        post_count_range: (4, 20),
        user_count_range: (3, 12),
        ..Default::default()
    };
    m.insert(
        "pol_tiny",
        GenConfig {
            name: "pol_tiny".into(),
            n_graphs: 100,
            ..tiny.clone()
        },
    );
    m.insert(
        "gos_tiny",
        GenConfig {
            name: "gos_tiny".into(),
            n_graphs: 500,
            label_balance: 0.25,
            domain_shift: 0.5,
            ..tiny
        },
    );
    m
}

pub fn preset(name: &str) -> Result<GenConfig, GenError> {
    presets()
        .remove(name)
        .ok_or_else(|| GenError::UnknownPreset(name.to_string()))
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Unit label direction for a given space seed.
pub fn label_direction(space_seed: u64, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(space_seed);
    let mut u = gaussian_vec(&mut rng, d);
    normalize(&mut u);
    u
}

/// Corpus direction: unit, orthogonal to the label direction (zero when d < 2).
fn corpus_direction(rng: &mut ChaCha8Rng, u: &[f64]) -> Vec<f64> {
    let d = u.len();
    if d < 2 {
        return vec![0.0; d];
    }
    let mut v = gaussian_vec(rng, d);
    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
    normalize(&mut v);
    v
}

fn stream_rng(base: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng
}

/// Generates a corpus; a pure function of `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<Corpus, GenError> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let base_seed = cfg.seed ^ fnv1a(&cfg.name);
    let mut corpus_rng = stream_rng(base_seed, 0);

    let u = label_direction(cfg.space_seed, d);
    let v = corpus_direction(&mut corpus_rng, &u);

    let n_fake = (cfg.label_balance * cfg.n_graphs as f64).round() as usize;
    let mut labels: Vec<u8> = (0..cfg.n_graphs).map(|i| u8::from(i < n_fake)).collect();
    labels.shuffle(&mut corpus_rng);

    let graphs = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = stream_rng(base_seed, i as u64 + 1);
            generate_graph(cfg, &u, &v, format!("{}-{i:05}", cfg.name), label, &mut rng)
        })
        .collect();

    let mut provenance = BTreeMap::new();
    provenance.insert("generator".to_string(), serde_json::json!("corpusgen"));
    provenance.insert(
        "config".to_string(),
        serde_json::to_value(cfg).expect("config serializes"),
    );
    Ok(Corpus {
        name: cfg.name.clone(),
        feature_dim: d,
        graphs,
        provenance,
    })
}

fn generate_graph(
    cfg: &GenConfig,
    u: &[f64],
    v: &[f64],
    id: String,
    label: u8,
    rng: &mut ChaCha8Rng,
) -> HeteroGraph {
    let d = cfg.feature_dim;
    let sign = if label == 1 { 1.0 } else { -1.0 };
    let n_posts = rng.random_range(cfg.post_count_range.0..=cfg.post_count_range.1);
    let n_users = rng.random_range(cfg.user_count_range.0..=cfg.user_count_range.1);

    // Subtype mix. Fake graphs lean towards more retweets when coupled.
    let jitter = |rng: &mut ChaCha8Rng| -> f64 {
        let e: f64 = StandardNormal.sample(rng);
        0.1 * e
    };
    let rt_mean = cfg.retweet_fraction_mean
        + sign * cfg.retweet_label_coupling * cfg.signal_strength / 2.0;
    let rt_frac = if cfg.retweet_fraction_mean > 0.0 {
        (rt_mean + jitter(rng)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let tl_frac = if cfg.timeline_fraction_mean > 0.0 {
        (cfg.timeline_fraction_mean + jitter(rng)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut n_rt = (rt_frac * n_posts as f64).round() as usize;
    let mut n_tl = (tl_frac * n_posts as f64).round() as usize;
    if n_posts > 0 {
        // keep at least one tweet
        while n_rt + n_tl > n_posts - 1 {
            if n_tl > 0 {
                n_tl -= 1;
            } else {
                n_rt -= 1;
            }
        }
    }
    let n_tw = n_posts - n_rt - n_tl;
    let mut subtypes: Vec<PostSubtype> = std::iter::repeat_n(PostSubtype::Tweet, n_tw)
        .chain(std::iter::repeat_n(PostSubtype::Retweet, n_rt))
        .chain(std::iter::repeat_n(PostSubtype::Timeline, n_tl))
        .collect();
    subtypes.shuffle(rng);

    let tweets: Vec<usize> = (0..n_posts)
        .filter(|&i| subtypes[i] == PostSubtype::Tweet)
        .collect();
    let mut edges: BTreeMap<EdgeKind, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, &st) in subtypes.iter().enumerate() {
        let user = rng.random_range(0..n_users);
        match st {
            PostSubtype::Tweet => {
                edges.entry(EdgeKind::TweetCitesArticle).or_default().push((i, 0));
                edges.entry(EdgeKind::UserPostsTweet).or_default().push((user, i));
            }
            PostSubtype::Retweet => {
                let cited = tweets[rng.random_range(0..tweets.len())];
                edges.entry(EdgeKind::RetweetCitesTweet).or_default().push((i, cited));
                edges.entry(EdgeKind::UserPostsRetweet).or_default().push((user, i));
            }
            PostSubtype::Timeline => {
                edges.entry(EdgeKind::UserPostsTimeline).or_default().push((user, i));
            }
        }
    }

    let z = gaussian_vec(rng, d);
    let centre: Vec<f64> = (0..d)
        .map(|k| {
            cfg.graph_noise * z[k]
                + cfg.domain_shift * v[k]
                + sign * cfg.signal_strength / 2.0 * u[k]
        })
        .collect();
    let nodes = |n: usize, rng: &mut ChaCha8Rng| {
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for c in &centre {
                let e: f64 = StandardNormal.sample(rng);
                data.push(c + e);
            }
        }
        Tensor::from_vec(n, d, data)
    };
    let article_x = nodes(1, rng);
    let post_x = nodes(n_posts, rng);
    let user_x = nodes(n_users, rng);

    HeteroGraph {
        id,
        label: Some(label),
        article_x,
        post_x,
        post_subtype: subtypes,
        user_x,
        edges: edges
            .into_iter()
            .map(|(k, list)| (k.name().to_string(), list))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetgraph::{retweet_count, validate, validate_corpus};
    use std::collections::BTreeSet;

    fn small(seed: u64, n: usize) -> GenConfig {
        GenConfig {
            seed,
            n_graphs: n,
            feature_dim: 8,
            post_count_range: (2, 12),
            user_count_range: (1, 6),
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate(&small(7, 10)).unwrap();
        let b = generate(&small(7, 10)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(8, 10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn graphs_follow_construction_rules() {
        let c = generate(&small(3, 50)).unwrap();
        assert_eq!(validate_corpus(&c), Ok(()));
        for g in &c.graphs {
            let n_tweets = g
                .post_subtype
                .iter()
                .filter(|&&s| s == PostSubtype::Tweet)
                .count();
            assert_eq!(g.edges_of(EdgeKind::TweetCitesArticle).len(), n_tweets);
            assert_eq!(g.edges_of(EdgeKind::RetweetCitesTweet).len(), retweet_count(g));
            let posted: usize = [
                EdgeKind::UserPostsTweet,
                EdgeKind::UserPostsRetweet,
                EdgeKind::UserPostsTimeline,
            ]
            .iter()
            .map(|&k| g.edges_of(k).len())
            .sum();
            assert_eq!(posted, g.n_posts());
            // exactly one posting user per post
            let targets: BTreeSet<usize> = [
                EdgeKind::UserPostsTweet,
                EdgeKind::UserPostsRetweet,
                EdgeKind::UserPostsTimeline,
            ]
            .iter()
            .flat_map(|&k| g.edges_of(k).iter().map(|e| e.1))
            .collect();
            assert_eq!(targets.len(), g.n_posts());
            // retweet count seen through the edges that create retweets
            let rt_targets: BTreeSet<usize> =
                g.edges_of(EdgeKind::UserPostsRetweet).iter().map(|e| e.1).collect();
            assert_eq!(rt_targets.len(), retweet_count(g));
            assert!((2..=12).contains(&g.n_posts()));
            assert!((1..=6).contains(&g.n_users()));
        }
    }

    #[test]
    fn label_balance_is_exact_up_to_rounding() {
        let cfg = GenConfig {
            label_balance: 0.3,
            ..small(1, 200)
        };
        let c = generate(&cfg).unwrap();
        let fakes = c.graphs.iter().filter(|g| g.label == Some(1)).count();
        assert_eq!(fakes, 60);
    }

    #[test]
    fn impossible_configs_rejected() {
        let cfg = GenConfig {
            post_count_range: (0, 0),
            ..small(1, 5)
        };
        assert!(matches!(generate(&cfg), Err(GenError::Config(_))));
        let cfg = GenConfig {
            post_count_range: (5, 3),
            ..small(1, 5)
        };
        assert!(generate(&cfg).is_err());
        let cfg = GenConfig {
            label_balance: 1.5,
            ..small(1, 5)
        };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn postless_config_is_allowed_without_subtypes() {
        let cfg = GenConfig {
            post_count_range: (0, 0),
            user_count_range: (0, 2),
            retweet_fraction_mean: 0.0,
            timeline_fraction_mean: 0.0,
            ..small(1, 5)
        };
        let c = generate(&cfg).unwrap();
        assert!(c.graphs.iter().all(|g| g.n_posts() == 0 && validate(g).is_ok()));
    }

    #[test]
    fn preset_sizes() {
        let p = presets();
        assert_eq!(p["pol_like"].n_graphs, 483);
        assert_eq!(p["gos_like"].n_graphs, 12_214);
        assert_eq!(p["pol_tiny"].n_graphs, 100);
        assert_eq!(p["gos_tiny"].n_graphs, 500);
        assert_eq!(p["pol_like"].feature_dim, 768);
        for cfg in p.values() {
            cfg.validate().unwrap();
        }
        assert!(matches!(preset("nope"), Err(GenError::UnknownPreset(_))));
    }

    #[test]
    fn corpus_direction_is_orthogonal() {
        let u = label_direction(0, 16);
        let mut rng = stream_rng(5, 0);
        let v = corpus_direction(&mut rng, &u);
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
