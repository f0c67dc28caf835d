//! Article-centred heterogeneous ego-graphs.
//!
//! Every graph has one article node, a shared post node set whose members are
//! tagged tweet / retweet / timeline, and a user node set. Nodes of different
//! sets only meet through the five typed edge lists.

mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

pub use io::{read_corpus, write_corpus, CorpusError, FORMAT_VERSION};

/// Default feature width, matching BERT-base embeddings.
pub const DEFAULT_FEATURE_DIM: usize = 768;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Article,
    Post,
    User,
}

impl NodeType {
    pub const ALL: [NodeType; 3] = [NodeType::Article, NodeType::Post, NodeType::User];

    pub fn name(self) -> &'static str {
        match self {
            NodeType::Article => "article",
            NodeType::Post => "post",
            NodeType::User => "user",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PostSubtype {
    Tweet,
    Retweet,
    Timeline,
}

/// The five canonical relations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    TweetCitesArticle,
    UserPostsTweet,
    UserPostsRetweet,
    RetweetCitesTweet,
    UserPostsTimeline,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 5] = [
        EdgeKind::TweetCitesArticle,
        EdgeKind::UserPostsTweet,
        EdgeKind::UserPostsRetweet,
        EdgeKind::RetweetCitesTweet,
        EdgeKind::UserPostsTimeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::TweetCitesArticle => "tweet_cites_article",
            EdgeKind::UserPostsTweet => "user_posts_tweet",
            EdgeKind::UserPostsRetweet => "user_posts_retweet",
            EdgeKind::RetweetCitesTweet => "retweet_cites_tweet",
            EdgeKind::UserPostsTimeline => "user_posts_timeline",
        }
    }

    pub fn parse(s: &str) -> Option<EdgeKind> {
        EdgeKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn source(self) -> NodeType {
        match self {
            EdgeKind::TweetCitesArticle | EdgeKind::RetweetCitesTweet => NodeType::Post,
            _ => NodeType::User,
        }
    }

    pub fn target(self) -> NodeType {
        match self {
            EdgeKind::TweetCitesArticle => NodeType::Article,
            _ => NodeType::Post,
        }
    }

    /// Required subtype of the source post, if the source is a post.
    fn source_subtype(self) -> Option<PostSubtype> {
        match self {
            EdgeKind::TweetCitesArticle => Some(PostSubtype::Tweet),
            EdgeKind::RetweetCitesTweet => Some(PostSubtype::Retweet),
            _ => None,
        }
    }

    /// Required subtype of the target post, if the target is a post.
    fn target_subtype(self) -> Option<PostSubtype> {
        match self {
            EdgeKind::UserPostsTweet | EdgeKind::RetweetCitesTweet => Some(PostSubtype::Tweet),
            EdgeKind::UserPostsRetweet => Some(PostSubtype::Retweet),
            EdgeKind::UserPostsTimeline => Some(PostSubtype::Timeline),
            EdgeKind::TweetCitesArticle => None,
        }
    }
}

/// A canonical relation or its reversal (`rev_` prefix). Each direction owns
/// its own encoder weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeType {
    pub kind: EdgeKind,
    pub reversed: bool,
}

impl EdgeType {
    pub fn forward(kind: EdgeKind) -> Self {
        Self {
            kind,
            reversed: false,
        }
    }

    pub fn reverse(kind: EdgeKind) -> Self {
        Self {
            kind,
            reversed: true,
        }
    }

    /// The five canonical types followed by their reversals.
    pub fn all() -> Vec<EdgeType> {
        EdgeKind::ALL
            .into_iter()
            .map(EdgeType::forward)
            .chain(EdgeKind::ALL.into_iter().map(EdgeType::reverse))
            .collect()
    }

    pub fn name(self) -> String {
        if self.reversed {
            format!("rev_{}", self.kind.name())
        } else {
            self.kind.name().to_string()
        }
    }

    pub fn parse(s: &str) -> Option<EdgeType> {
        match s.strip_prefix("rev_") {
            Some(rest) => EdgeKind::parse(rest).map(EdgeType::reverse),
            None => EdgeKind::parse(s).map(EdgeType::forward),
        }
    }

    pub fn source(self) -> NodeType {
        if self.reversed {
            self.kind.target()
        } else {
            self.kind.source()
        }
    }

    pub fn target(self) -> NodeType {
        if self.reversed {
            self.kind.source()
        } else {
            self.kind.target()
        }
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// One article-centred social context graph.
///
/// Edge lists are keyed by their canonical name so that files carrying
/// unknown relation names can be represented and reported by [`validate`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    pub id: String,
    /// 0 = real, 1 = fake.
    pub label: Option<u8>,
    /// `1 x d`, or `0 x d` for a context subgraph.
    pub article_x: Tensor,
    pub post_x: Tensor,
    pub post_subtype: Vec<PostSubtype>,
    pub user_x: Tensor,
    pub edges: BTreeMap<String, Vec<(usize, usize)>>,
}

impl HeteroGraph {
    /// Graph with a single article and nothing else.
    pub fn article_only(id: impl Into<String>, article_x: Tensor) -> Self {
        let d = article_x.cols();
        Self {
            id: id.into(),
            label: None,
            article_x,
            post_x: Tensor::zeros(0, d),
            post_subtype: Vec::new(),
            user_x: Tensor::zeros(0, d),
            edges: BTreeMap::new(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.article_x.cols()
    }

    pub fn n_posts(&self) -> usize {
        self.post_x.rows()
    }

    pub fn n_users(&self) -> usize {
        self.user_x.rows()
    }

    pub fn n_nodes(&self, t: NodeType) -> usize {
        self.features(t).rows()
    }

    pub fn features(&self, t: NodeType) -> &Tensor {
        match t {
            NodeType::Article => &self.article_x,
            NodeType::Post => &self.post_x,
            NodeType::User => &self.user_x,
        }
    }

    /// Whether this is a context subgraph (article removed).
    pub fn is_context(&self) -> bool {
        self.article_x.rows() == 0
    }

    pub fn edges_of(&self, kind: EdgeKind) -> &[(usize, usize)] {
        self.edges.get(kind.name()).map_or(&[], Vec::as_slice)
    }

    /// Edges of a possibly reversed type as (source, target) pairs.
    pub fn typed_edges(&self, et: EdgeType) -> Vec<(usize, usize)> {
        let e = self.edges_of(et.kind);
        if et.reversed {
            e.iter().map(|&(s, t)| (t, s)).collect()
        } else {
            e.to_vec()
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(Vec::len).sum()
    }
}

/// One violated invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Checks every structural invariant of `g`. An empty article set is only
/// accepted when `allow_context` is set.
pub fn validate_with(g: &HeteroGraph, allow_context: bool) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut push = |path: String, message: String| out.push(Violation { path, message });

    let d = g.article_x.cols();
    let n_articles = g.article_x.rows();
    if n_articles != 1 && !(allow_context && n_articles == 0) {
        push(
            "article_x".into(),
            format!("expected exactly one article node, found {n_articles}"),
        );
    }
    for t in [NodeType::Post, NodeType::User] {
        let cols = g.features(t).cols();
        if cols != d {
            push(
                format!("{}_x", t.name()),
                format!("feature dimension {cols} differs from article dimension {d}"),
            );
        }
    }
    for t in NodeType::ALL {
        let x = g.features(t);
        if let Some(pos) = x.data().iter().position(|v| !v.is_finite()) {
            push(
                format!("{}_x[{}]", t.name(), pos / x.cols().max(1)),
                "non-finite feature value".into(),
            );
        }
    }
    if g.post_subtype.len() != g.n_posts() {
        push(
            "post_subtype".into(),
            format!(
                "{} subtype tags for {} post nodes",
                g.post_subtype.len(),
                g.n_posts()
            ),
        );
    }
    if let Some(l) = g.label {
        if l > 1 {
            push("label".into(), format!("label {l} is not binary"));
        }
    }

    for (key, list) in &g.edges {
        let Some(kind) = EdgeKind::parse(key) else {
            push(format!("edges.{key}"), "unknown edge type".into());
            continue;
        };
        let n_src = g.n_nodes(kind.source());
        let n_dst = g.n_nodes(kind.target());
        for (i, &(s, t)) in list.iter().enumerate() {
            let path = format!("edges.{key}[{i}]");
            if s >= n_src {
                push(
                    path.clone(),
                    format!("source index out of range: {s} >= {n_src}"),
                );
            } else if let Some(want) = kind.source_subtype() {
                if g.post_subtype.get(s) != Some(&want) {
                    push(
                        path.clone(),
                        format!("source post {s} must have subtype {want:?}"),
                    );
                }
            }
            if t >= n_dst {
                push(path, format!("target index out of range: {t} >= {n_dst}"));
            } else if let Some(want) = kind.target_subtype() {
                if g.post_subtype.get(t) != Some(&want) {
                    push(path, format!("target post {t} must have subtype {want:?}"));
                }
            }
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// [`validate_with`] for full article graphs, plus context subgraphs that are
/// recognisable as such (no article row and no article edges).
pub fn validate(g: &HeteroGraph) -> Result<(), Vec<Violation>> {
    validate_with(g, g.is_context() && g.edges_of(EdgeKind::TweetCitesArticle).is_empty())
}

/// The graph with its article node and every tweet-cites-article edge removed.
pub fn context_subgraph(g: &HeteroGraph) -> HeteroGraph {
    let mut sub = g.clone();
    sub.article_x = Tensor::zeros(0, g.feature_dim());
    sub.edges.remove(EdgeKind::TweetCitesArticle.name());
    sub
}

/// Number of retweet posts. Read from the subtype tags only.
pub fn retweet_count(g: &HeteroGraph) -> usize {
    g.post_subtype
        .iter()
        .filter(|&&s| s == PostSubtype::Retweet)
        .count()
}

/// An ordered set of graphs sharing one feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub feature_dim: usize,
    pub graphs: Vec<HeteroGraph>,
    /// Generator config or ingestion source.
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, feature_dim: usize) -> Self {
        Self {
            name: name.into(),
            feature_dim,
            graphs: Vec::new(),
            provenance: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Subset in the given order.
    pub fn select(&self, indices: &[usize]) -> Corpus {
        Corpus {
            name: self.name.clone(),
            feature_dim: self.feature_dim,
            graphs: indices.iter().map(|&i| self.graphs[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn labels(&self) -> Option<Vec<u8>> {
        self.graphs.iter().map(|g| g.label).collect()
    }
}

/// Validates every graph plus the corpus-level invariants (uniform feature
/// width, unique ids).
pub fn validate_corpus(c: &Corpus) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (k, g) in c.graphs.iter().enumerate() {
        if g.feature_dim() != c.feature_dim {
            out.push(Violation {
                path: format!("graphs[{k}]"),
                message: format!(
                    "feature dimension {} differs from corpus dimension {}",
                    g.feature_dim(),
                    c.feature_dim
                ),
            });
        }
        if !ids.insert(g.id.as_str()) {
            out.push(Violation {
                path: format!("graphs[{k}].id"),
                message: format!("duplicate graph id `{}`", g.id),
            });
        }
        if let Err(vs) = validate(g) {
            out.extend(vs.into_iter().map(|v| Violation {
                path: format!("graphs[{k}].{}", v.path),
                message: v.message,
            }));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(rows: usize, d: usize, base: f64) -> Tensor {
        Tensor::from_vec(rows, d, (0..rows * d).map(|i| base + i as f64 * 0.01).collect())
    }

    /// 4 posts (tweet, tweet, retweet, timeline), 2 users.
    pub(crate) fn sample_graph() -> HeteroGraph {
        use PostSubtype::*;
        let mut g = HeteroGraph::article_only("g0", feats(1, 3, 0.5));
        g.label = Some(1);
        g.post_x = feats(4, 3, -0.2);
        g.post_subtype = vec![Tweet, Tweet, Retweet, Timeline];
        g.user_x = feats(2, 3, 0.9);
        g.edges
            .insert("tweet_cites_article".into(), vec![(0, 0), (1, 0)]);
        g.edges.insert("retweet_cites_tweet".into(), vec![(2, 0)]);
        g.edges
            .insert("user_posts_tweet".into(), vec![(0, 0), (1, 1)]);
        g.edges.insert("user_posts_retweet".into(), vec![(1, 2)]);
        g.edges.insert("user_posts_timeline".into(), vec![(0, 3)]);
        g
    }

    #[test]
    fn minimal_graph_is_valid() {
        let g = HeteroGraph::article_only("a", Tensor::zeros(1, 4));
        assert_eq!(validate(&g), Ok(()));
    }

    #[test]
    fn sample_graph_is_valid() {
        assert_eq!(validate(&sample_graph()), Ok(()));
    }

    #[test]
    fn out_of_range_source_reported() {
        let mut g = sample_graph();
        g.user_x = feats(3, 3, 0.0);
        g.edges.insert("user_posts_tweet".into(), vec![(5, 0)]);
        let v = validate(&g).unwrap_err();
        assert_eq!(v.len(), 1);
        assert!(v[0].message.starts_with("source index out of range"), "{v:?}");
        assert_eq!(v[0].path, "edges.user_posts_tweet[0]");
    }

    #[test]
    fn unknown_edge_type_reported() {
        let mut g = sample_graph();
        g.edges.insert("user_follows_user".into(), vec![(0, 1)]);
        let v = validate(&g).unwrap_err();
        assert_eq!(v[0].message, "unknown edge type");
    }

    #[test]
    fn subtype_constraints_enforced() {
        let mut g = sample_graph();
        // a timeline post cannot cite the article, and a retweet cannot be cited
        g.edges
            .insert("tweet_cites_article".into(), vec![(3, 0)]);
        g.edges.insert("retweet_cites_tweet".into(), vec![(2, 2)]);
        let v = validate(&g).unwrap_err();
        assert_eq!(v.len(), 2, "{v:?}");
    }

    #[test]
    fn article_count_enforced() {
        let mut g = sample_graph();
        g.article_x = feats(2, 3, 0.0);
        assert!(validate(&g).is_err());
    }

    #[test]
    fn context_subgraph_removes_article_only() {
        let g = sample_graph();
        let sub = context_subgraph(&g);
        assert_eq!(sub.article_x.rows(), 0);
        assert!(sub.edges_of(EdgeKind::TweetCitesArticle).is_empty());
        assert_eq!(sub.post_x, g.post_x);
        assert_eq!(sub.user_x, g.user_x);
        assert_eq!(
            sub.edge_count(),
            g.edge_count() - g.edges_of(EdgeKind::TweetCitesArticle).len()
        );
        assert_eq!(context_subgraph(&sub), sub);
        assert_eq!(validate(&sub), Ok(()));
        assert!(validate_with(&sub, false).is_err());
        // original untouched
        assert_eq!(g.article_x.rows(), 1);
    }

    #[test]
    fn context_of_postless_graph() {
        let g = HeteroGraph::article_only("a", Tensor::filled(1, 2, 3.0));
        let sub = context_subgraph(&g);
        let mut expected = g.clone();
        expected.article_x = Tensor::zeros(0, 2);
        assert_eq!(sub, expected);
    }

    #[test]
    fn retweet_counting() {
        assert_eq!(retweet_count(&sample_graph()), 1);
        let mut g = sample_graph();
        g.post_subtype = vec![
            PostSubtype::Tweet,
            PostSubtype::Retweet,
            PostSubtype::Retweet,
            PostSubtype::Timeline,
        ];
        assert_eq!(retweet_count(&g), 2);
        assert_eq!(retweet_count(&context_subgraph(&g)), 2);
        assert_eq!(retweet_count(&HeteroGraph::article_only("x", Tensor::zeros(1, 1))), 0);
    }

    #[test]
    fn edge_type_names_roundtrip() {
        for et in EdgeType::all() {
            assert_eq!(EdgeType::parse(&et.name()), Some(et));
        }
        assert_eq!(EdgeType::all().len(), 10);
        assert!(EdgeType::parse("rev_user_follows_user").is_none());
        let rev = EdgeType::reverse(EdgeKind::TweetCitesArticle);
        assert_eq!((rev.source(), rev.target()), (NodeType::Article, NodeType::Post));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut c = Corpus::new("c", 3);
        c.graphs.push(sample_graph());
        c.graphs.push(sample_graph());
        let v = validate_corpus(&c).unwrap_err();
        assert_eq!(v[0].path, "graphs[1].id");
    }
}
