//! Token normalization and pooled textual box features.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::BoundingBox;
use crate::error::{Error, Result};
use crate::neural::{Matrix, Param};

pub const NUMBER_TOKEN: &str = "#NUMBER#";
pub const NAME_TOKEN: &str = "#NAME#";

const STOPLIST: &[&str] = &[
    "a", "an", "and", "at", "by", "for", "from", "in", "is", "of", "on", "or", "the", "to", "with",
    "thank", "thanks", "you", "please", "no",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub is_placeholder: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextFeatureConfig {
    pub dim: usize,
    pub pooling: Pooling,
    /// `a` in the token weight `a / (a + freq)`.
    pub weighting_constant: f64,
    pub lowercase: bool,
    pub number_placeholder: bool,
    pub name_heuristic: bool,
}

impl Default for TextFeatureConfig {
    fn default() -> Self {
        TextFeatureConfig {
            dim: 64,
            pooling: Pooling::Mean,
            weighting_constant: 1e-3,
            lowercase: true,
            number_placeholder: true,
            name_heuristic: false,
        }
    }
}

fn is_number_like(tok: &str) -> bool {
    tok.chars().any(|c| c.is_ascii_digit())
        && tok
            .chars()
            .all(|c| c.is_ascii_digit() || c == '.' || c == ',')
}

fn is_name_like(tok: &str) -> bool {
    let mut chars = tok.chars();
    let Some(first) = chars.next() else {
        return false;
    };
    tok.chars().count() >= 2
        && first.is_uppercase()
        && chars.all(|c| c.is_alphabetic() && c.is_lowercase())
        && !STOPLIST.contains(&tok.to_lowercase().as_str())
}

pub fn normalize_tokens(text: &str, cfg: &TextFeatureConfig) -> Vec<Token> {
    text.split_whitespace()
        .map(|raw| {
            if raw == NUMBER_TOKEN || raw == NAME_TOKEN {
                Token {
                    surface: raw.to_string(),
                    is_placeholder: true,
                }
            } else if cfg.number_placeholder && is_number_like(raw) {
                Token {
                    surface: NUMBER_TOKEN.to_string(),
                    is_placeholder: true,
                }
            } else if cfg.name_heuristic && is_name_like(raw) {
                Token {
                    surface: NAME_TOKEN.to_string(),
                    is_placeholder: true,
                }
            } else {
                Token {
                    surface: if cfg.lowercase {
                        raw.to_lowercase()
                    } else {
                        raw.to_string()
                    },
                    is_placeholder: false,
                }
            }
        })
        .collect()
}

/// Source of per-token vectors.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, token: &str) -> Vec<f64>;
    fn trainable(&self) -> bool;
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashing-trick embedding table: token -> hash -> row.
#[derive(Clone, Debug, PartialEq)]
pub struct HashedEmbedding {
    pub table: Param,
    pub seed: u64,
}

impl HashedEmbedding {
    pub fn vocab_size(&self) -> usize {
        self.table.value.rows()
    }

    pub fn row_index(&self, token: &str) -> usize {
        (stable_hash(token) % self.vocab_size() as u64) as usize
    }
}

impl EmbeddingProvider for HashedEmbedding {
    fn dim(&self) -> usize {
        self.table.value.cols()
    }

    fn embed(&self, token: &str) -> Vec<f64> {
        self.table.value.row(self.row_index(token)).to_vec()
    }

    fn trainable(&self) -> bool {
        true
    }
}

/// Trainable table initialized uniformly in `[-0.5/dim, 0.5/dim]`.
pub fn hashed_provider(dim: usize, vocab_size: usize, seed: u64) -> Result<HashedEmbedding> {
    if dim == 0 || vocab_size == 0 {
        return Err(Error::Config(format!(
            "embedding dim ({dim}) and vocab size ({vocab_size}) must be positive"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = Matrix::uniform(vocab_size, dim, 0.5 / dim as f64, &mut rng);
    Ok(HashedEmbedding {
        table: Param::new("text.embedding", table),
        seed,
    })
}

/// Frozen vectors read from a `word v1 .. vd` text file; unknown words
/// fall back to a frozen hashed table.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFileEmbedding {
    pub words: Vec<String>,
    pub vectors: Matrix,
    pub fallback: HashedEmbedding,
    index: HashMap<String, usize>,
}

impl VectorFileEmbedding {
    pub fn new(words: Vec<String>, vectors: Matrix, fallback: HashedEmbedding) -> Result<Self> {
        if words.len() != vectors.rows() || fallback.dim() != vectors.cols() {
            return Err(Error::Shape(format!(
                "{} words, {}x{} vectors, fallback dim {}",
                words.len(),
                vectors.rows(),
                vectors.cols(),
                fallback.dim()
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            index.entry(w.clone()).or_insert(i);
        }
        Ok(VectorFileEmbedding {
            words,
            vectors,
            fallback,
            index,
        })
    }

    pub fn lookup(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.vectors.row(i))
    }
}

impl EmbeddingProvider for VectorFileEmbedding {
    fn dim(&self) -> usize {
        self.vectors.cols()
    }

    fn embed(&self, token: &str) -> Vec<f64> {
        match self.lookup(token) {
            Some(v) => v.to_vec(),
            None => self.fallback.embed(token),
        }
    }

    fn trainable(&self) -> bool {
        false
    }
}

pub fn parse_vector_text(
    raw: &str,
    source: &str,
    vocab_size: usize,
    seed: u64,
) -> Result<VectorFileEmbedding> {
    let mut words = Vec::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (i, line) in raw.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else {
            continue;
        };
        let mut values = Vec::new();
        for p in parts {
            let v: f64 = p.parse().map_err(|_| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: format!("unparsable float {p:?}"),
            })?;
            values.push(v);
        }
        match dim {
            None if values.is_empty() => {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    msg: "word without a vector".into(),
                })
            }
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    msg: format!("vector has {} values, expected {d}", values.len()),
                })
            }
            _ => {}
        }
        words.push(word.to_string());
        data.extend(values);
    }
    let dim = dim.ok_or_else(|| Error::EmptyCorpus(source.to_string()))?;
    let vectors = Matrix::from_vec(words.len(), dim, data)?;
    VectorFileEmbedding::new(words, vectors, hashed_provider(dim, vocab_size, seed)?)
}

pub fn load_vector_file(path: &Path) -> Result<VectorFileEmbedding> {
    load_vector_file_with(path, 4096, 0)
}

pub fn load_vector_file_with(
    path: &Path,
    vocab_size: usize,
    seed: u64,
) -> Result<VectorFileEmbedding> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vector_text(&raw, &path.display().to_string(), vocab_size, seed)
}

/// Relative token frequencies over a training corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub freq: BTreeMap<String, f64>,
}

impl FrequencyTable {
    pub fn from_tokens<'a, I: IntoIterator<Item = &'a str>>(tokens: I) -> Self {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut total = 0u64;
        for t in tokens {
            *counts.entry(t.to_string()).or_default() += 1;
            total += 1;
        }
        let freq = counts
            .into_iter()
            .map(|(k, c)| (k, c as f64 / total.max(1) as f64))
            .collect();
        FrequencyTable { freq }
    }

    pub fn get(&self, token: &str) -> f64 {
        self.freq.get(token).copied().unwrap_or(0.0)
    }
}

/// Raw (unnormalized) pooling weights for a token list.
pub fn token_weights(
    tokens: &[Token],
    cfg: &TextFeatureConfig,
    freq: Option<&FrequencyTable>,
) -> Vec<f64> {
    match (cfg.pooling, freq) {
        (Pooling::Weighted, Some(f)) => {
            let a = cfg.weighting_constant;
            tokens.iter().map(|t| a / (a + f.get(&t.surface))).collect()
        }
        _ => vec![1.0; tokens.len()],
    }
}

/// `sum w_i v_i / sum w_i`; the zero vector for an empty list.
pub fn pool(vectors: &[Vec<f64>], weights: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let total: f64 = weights.iter().sum();
    if vectors.is_empty() || total == 0.0 {
        return out;
    }
    for (v, w) in vectors.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    out
}

pub fn embed_box<P: EmbeddingProvider + ?Sized>(
    b: &BoundingBox,
    provider: &P,
    cfg: &TextFeatureConfig,
    freq: Option<&FrequencyTable>,
) -> Result<Vec<f64>> {
    if provider.dim() != cfg.dim {
        return Err(Error::Shape(format!(
            "provider dim {} vs configured text dim {}",
            provider.dim(),
            cfg.dim
        )));
    }
    let tokens = normalize_tokens(&b.text, cfg);
    let vectors: Vec<Vec<f64>> = tokens.iter().map(|t| provider.embed(&t.surface)).collect();
    Ok(pool(&vectors, &token_weights(&tokens, cfg, freq), cfg.dim))
}
