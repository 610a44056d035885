//! Single-file model checkpoint.
//!
//! Layout: magic `BOXTAG01`, a little-endian u64 byte length, a UTF-8 JSON
//! header, then every tensor of [`TaggerModel::tensors`] as little-endian
//! f64 in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{TaggerModel, TextProvider};
use super::TaggerConfig;
use crate::corpus::FieldLabel;
use crate::error::{Error, Result};
use crate::neural::Matrix;
use crate::text_features::{FrequencyTable, VectorFileEmbedding};

pub const MAGIC: &[u8; 8] = b"BOXTAG01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TaggerConfig,
    labels: BTreeMap<String, usize>,
    freq: FrequencyTable,
    tensors: Vec<TensorInfo>,
    /// Frozen vector-file words; their vectors follow the listed tensors.
    frozen_words: Option<Vec<String>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint(model: &TaggerModel) -> Vec<u8> {
    let tensors = model.tensors();
    let mut infos: Vec<TensorInfo> = tensors
        .iter()
        .map(|p| TensorInfo {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
        })
        .collect();
    let frozen = match &model.text {
        TextProvider::Frozen(f) => {
            infos.push(TensorInfo {
                name: "text.vectors".into(),
                rows: f.vectors.rows(),
                cols: f.vectors.cols(),
            });
            Some(f)
        }
        TextProvider::Hashed(_) => None,
    };
    let header = Header {
        config: model.config.clone(),
        labels: FieldLabel::ALL
            .iter()
            .map(|l| (l.name().to_string(), l.id()))
            .collect(),
        freq: model.freq.clone(),
        tensors: infos,
        frozen_words: frozen.map(|f| f.words.clone()),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut push = |m: &Matrix| {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in &tensors {
        push(&p.value);
    }
    if let Some(f) = frozen {
        push(&f.vectors);
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<TaggerModel> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a BOXTAG01 checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    for l in FieldLabel::ALL {
        if header.labels.get(l.name()) != Some(&l.id()) {
            return Err(bad(format!("label id mismatch for {}", l.name())));
        }
    }

    let mut body = &bytes[16 + len..];
    let mut take = |info: &TensorInfo| -> Result<Matrix> {
        let n = info.rows * info.cols;
        if body.len() < n * 8 {
            return Err(bad(format!("truncated tensor {}", info.name)));
        }
        let data = body[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        body = &body[n * 8..];
        Matrix::from_vec(info.rows, info.cols, data)
    };

    let mut config = header.config.clone();
    // the vector file is restored from the checkpoint, not from disk
    let embeddings = config.embeddings.take();
    let mut model = TaggerModel::new(config, header.freq.clone())?;
    model.config.embeddings = embeddings;
    let expected = model.tensors().len() + usize::from(header.frozen_words.is_some());
    if header.tensors.len() != expected {
        return Err(bad(format!(
            "{} tensors listed, model has {expected}",
            header.tensors.len()
        )));
    }
    let mut values = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        values.push(take(info)?);
    }
    if !body.is_empty() {
        return Err(bad(format!("{} trailing bytes", body.len())));
    }

    if let Some(words) = header.frozen_words {
        let vectors = values.pop().expect("frozen vectors");
        let fallback = match &model.text {
            TextProvider::Hashed(h) => h.clone(),
            TextProvider::Frozen(f) => f.fallback.clone(),
        };
        model.text = TextProvider::Frozen(VectorFileEmbedding::new(words, vectors, fallback)?);
    }
    for ((p, info), v) in model
        .tensors_mut()
        .into_iter()
        .zip(&header.tensors)
        .zip(values)
    {
        if p.name != info.name || p.value.shape() != v.shape() {
            return Err(bad(format!(
                "tensor {} {}x{} does not match model tensor {} {:?}",
                info.name,
                info.rows,
                info.cols,
                p.name,
                p.value.shape()
            )));
        }
        p.value = v;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &TaggerModel, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TaggerModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
