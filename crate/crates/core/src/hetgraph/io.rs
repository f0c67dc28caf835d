//! Line-oriented JSON corpus files.
//!
//! Line 1 is a header `{format_version, name, feature_dim, count, provenance}`;
//! every following line holds one graph. Reals are written in shortest
//! round-trip decimal form, so reading a written file reproduces every
//! feature bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{validate_corpus, Corpus, HeteroGraph, PostSubtype, Violation};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {field}: {message}")]
    Field {
        line: usize,
        field: String,
        message: String,
    },
    #[error("corpus failed validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    name: String,
    feature_dim: usize,
    count: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    provenance: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize)]
struct GraphOut<'a> {
    id: &'a str,
    label: Option<u8>,
    article_x: Vec<&'a [f64]>,
    post_x: Vec<&'a [f64]>,
    post_subtype: &'a [PostSubtype],
    user_x: Vec<&'a [f64]>,
    edges: BTreeMap<&'a str, Vec<[usize; 2]>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphIn {
    id: String,
    label: Option<u8>,
    article_x: Vec<Vec<f64>>,
    post_x: Vec<Vec<f64>>,
    post_subtype: Vec<PostSubtype>,
    user_x: Vec<Vec<f64>>,
    edges: BTreeMap<String, Vec<[usize; 2]>>,
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    (0..t.rows()).map(|r| t.row(r)).collect()
}

/// Writes `c` after validating it.
pub fn write_corpus(c: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    validate_corpus(c).map_err(CorpusError::Invalid)?;
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let header = Header {
        format_version: FORMAT_VERSION,
        name: c.name.clone(),
        feature_dim: c.feature_dim,
        count: c.graphs.len(),
        provenance: c.provenance.clone(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| io_err(e.into()))?;
    w.write_all(b"\n").map_err(io_err)?;
    for g in &c.graphs {
        let out = GraphOut {
            id: &g.id,
            label: g.label,
            article_x: rows(&g.article_x),
            post_x: rows(&g.post_x),
            post_subtype: &g.post_subtype,
            user_x: rows(&g.user_x),
            edges: g
                .edges
                .iter()
                .map(|(k, v)| (k.as_str(), v.iter().map(|&(s, t)| [s, t]).collect()))
                .collect(),
        };
        serde_json::to_writer(&mut w, &out).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn matrix(
    raw: Vec<Vec<f64>>,
    d: usize,
    line: usize,
    field: &str,
) -> Result<Tensor, CorpusError> {
    let n = raw.len();
    let mut data = Vec::with_capacity(n * d);
    for (i, r) in raw.into_iter().enumerate() {
        if r.len() != d {
            return Err(CorpusError::Field {
                line,
                field: format!("{field}[{i}]"),
                message: format!("row has {} values, header feature_dim is {d}", r.len()),
            });
        }
        data.extend(r);
    }
    Ok(Tensor::from_vec(n, d, data))
}

/// Reads and validates a corpus file.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or(CorpusError::Malformed {
            line: 1,
            message: "missing header".into(),
        })?
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let header: Header = serde_json::from_str(&first).map_err(|e| CorpusError::Malformed {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(CorpusError::Field {
            line: 1,
            field: "format_version".into(),
            message: format!("unsupported version {}", header.format_version),
        });
    }
    let d = header.feature_dim;
    let mut corpus = Corpus {
        name: header.name,
        feature_dim: d,
        graphs: Vec::with_capacity(header.count),
        provenance: header.provenance,
    };
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: GraphIn = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: lineno,
            message: format!("graphs[{k}]: {e}"),
        })?;
        let prefix = format!("graphs[{k}]");
        let g = HeteroGraph {
            id: raw.id,
            label: raw.label,
            article_x: matrix(raw.article_x, d, lineno, &format!("{prefix}.article_x"))?,
            post_x: matrix(raw.post_x, d, lineno, &format!("{prefix}.post_x"))?,
            post_subtype: raw.post_subtype,
            user_x: matrix(raw.user_x, d, lineno, &format!("{prefix}.user_x"))?,
            edges: raw
                .edges
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().map(|[s, t]| (s, t)).collect()))
                .collect(),
        };
        corpus.graphs.push(g);
    }
    if corpus.graphs.len() != header.count {
        return Err(CorpusError::Field {
            line: 1,
            field: "count".into(),
            message: format!(
                "header declares {} graphs, file holds {}",
                header.count,
                corpus.graphs.len()
            ),
        });
    }
    validate_corpus(&corpus).map_err(CorpusError::Invalid)?;
    Ok(corpus)
}
