//! Box-sequence tagger: fused per-box features, BiLSTM encoder, emission
//! projection and a linear-chain CRF (or per-step softmax) decoder.

pub mod checkpoint;
pub mod crf;
pub mod model;
pub mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial_features::SPATIAL_DIM;
use crate::text_features::TextFeatureConfig;
use crate::visual_features::VisualEncoderConfig;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use crf::CrfParams;
pub use model::{fuse, Encoded, Prediction, TaggerModel, Unit};
pub use train::{train, EpochRecord, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    Crf,
    Softmax,
}

/// Tagging unit: whole boxes, or the tokens of each box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Box,
    Word,
}

/// Sequence head (BiLSTM + projection) or context-free per-box affine head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Sequence,
    PerBox,
}

/// Which feature groups feed the fused vector. Disabled groups are
/// zero-filled so the fused length never changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub text: bool,
    pub visual: bool,
    pub spatial: bool,
}

impl FeatureSet {
    pub const ALL: FeatureSet = FeatureSet {
        text: true,
        visual: true,
        spatial: true,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub text: TextFeatureConfig,
    pub visual: VisualEncoderConfig,
    pub features: FeatureSet,
    pub hidden: usize,
    pub decoder: Decoder,
    pub granularity: Granularity,
    pub head: Head,
    /// Rows of the hashed embedding table.
    pub vocab_size: usize,
    /// Frozen `word v1 .. vd` vector file replacing the hashed table.
    pub embeddings: Option<PathBuf>,
    /// Precomputed visual vectors; covered boxes bypass the encoder.
    pub visual_precomputed: Option<PathBuf>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub clip: Option<f64>,
    /// Pad every batch to the longest invoice in the training set.
    pub global_max_padding: bool,
    pub seed: u64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            text: TextFeatureConfig::default(),
            visual: VisualEncoderConfig::default(),
            features: FeatureSet::ALL,
            hidden: 64,
            decoder: Decoder::Crf,
            granularity: Granularity::Box,
            head: Head::Sequence,
            vocab_size: 4096,
            embeddings: None,
            visual_precomputed: None,
            lr: 1e-3,
            batch_size: 8,
            epochs: 100,
            patience: 10,
            clip: Some(5.0),
            global_max_padding: false,
            seed: 0,
        }
    }
}

impl TaggerConfig {
    pub fn fused_dim(&self) -> usize {
        self.text.dim + self.visual.out_dim + SPATIAL_DIM
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.text.dim == 0 {
            return bad("text dim must be positive".into());
        }
        if self.hidden == 0 {
            return bad("hidden size must be positive".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            ));
        }
        if let Some(c) = self.clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("clip must be positive, got {c}"));
            }
        }
        if !(self.text.weighting_constant > 0.0) {
            return bad("weighting_constant must be positive".into());
        }
        if self.granularity == Granularity::Word && self.head == Head::PerBox {
            return bad("word granularity needs the sequence head".into());
        }
        self.visual.validate()
    }
}
