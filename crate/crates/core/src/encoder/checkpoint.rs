use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EncoderConfig, EncoderError, Model};
use crate::numerics::{ParamSet, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("checkpoint shape table mismatch at `{name}`: {message}")]
    Shape { name: String, message: String },
    #[error(transparent)]
    Config(#[from] EncoderError),
}

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    format_version: u32,
    config: EncoderConfig,
    params: BTreeMap<String, Entry>,
    head_seed: u64,
}

/// How a checkpoint is turned into a model.
#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Redraw all task heads from this seed instead of loading them.
    pub head_reinit: Option<u64>,
    /// Discard the auxiliary context encoder if present.
    pub drop_context_encoder: bool,
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let file = File {
        format_version: CHECKPOINT_VERSION,
        config: model.cfg.clone(),
        params: model
            .params
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    Entry {
                        shape: [t.rows(), t.cols()],
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect(),
        head_seed: model.head_seed,
    };
    let text = serde_json::to_string(&file).map_err(|e| CheckpointError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, text).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Model, CheckpointError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: File = serde_json::from_str(&text).map_err(|e| CheckpointError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Malformed {
            path: path.to_path_buf(),
            message: format!("unsupported format_version {}", file.format_version),
        });
    }
    file.config.validate()?;
    let cfg = file.config;
    let has_ctx = file
        .params
        .keys()
        .any(|k| k.starts_with(super::CONTEXT_ENCODER_PREFIX));
    let mut expected = cfg.encoder_shapes("");
    expected.extend(cfg.head_shapes());
    if has_ctx {
        expected.extend(cfg.encoder_shapes(super::CONTEXT_ENCODER_PREFIX));
    }

    // walk both tables in name order so the first mismatch is reported
    let mut params = ParamSet::new();
    let mut stored = file.params.into_iter().peekable();
    let mut wanted = expected.into_iter().peekable();
    loop {
        match (stored.peek(), wanted.peek()) {
            (None, None) => break,
            (Some((name, _)), None) => {
                return Err(shape_err(name, "not part of the model layout"));
            }
            (None, Some((name, _))) => return Err(shape_err(name, "missing from checkpoint")),
            (Some((sn, _)), Some((wn, _))) if sn < wn => {
                return Err(shape_err(sn, "not part of the model layout"));
            }
            (Some((sn, _)), Some((wn, _))) if sn > wn => {
                return Err(shape_err(wn, "missing from checkpoint"));
            }
            _ => {
                let (name, entry) = stored.next().unwrap();
                let (_, (r, c)) = wanted.next().unwrap();
                if entry.shape != [r, c] {
                    return Err(shape_err(
                        &name,
                        &format!("stored shape {:?}, layout needs [{r}, {c}]", entry.shape),
                    ));
                }
                if entry.data.len() != r * c {
                    return Err(shape_err(
                        &name,
                        &format!("{} values for shape [{r}, {c}]", entry.data.len()),
                    ));
                }
                params.insert(name, Tensor::from_vec(r, c, entry.data));
            }
        }
    }
    let mut model = Model {
        cfg,
        params,
        head_seed: file.head_seed,
    };
    if opts.drop_context_encoder {
        model.drop_context_encoder();
    }
    if let Some(seed) = opts.head_reinit {
        model.reinit_heads(seed);
    }
    Ok(model)
}

fn shape_err(name: &str, message: &str) -> CheckpointError {
    CheckpointError::Shape {
        name: name.to_string(),
        message: message.to_string(),
    }
}
