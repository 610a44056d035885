use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{Method, RuleConfig};
use crate::error::{Error, Result};
use crate::tagger::{Decoder, FeatureSet, TaggerConfig};
use crate::text_features::{Pooling, TextFeatureConfig};
use crate::visual_features::VisualEncoderConfig;

/// Every tunable as one flat JSON object. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub decoder: Decoder,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub hidden: usize,
    pub clip: Option<f64>,
    pub global_max_padding: bool,
    pub split_ratio: f64,

    pub text_dim: usize,
    pub vocab_size: usize,
    pub pooling: Pooling,
    pub weighting_constant: f64,
    pub lowercase: bool,
    pub number_placeholder: bool,
    pub name_heuristic: bool,
    pub embeddings: Option<PathBuf>,

    pub visual_dim: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub channels: usize,
    pub visual_precomputed: Option<PathBuf>,

    pub use_text: bool,
    pub use_visual: bool,
    pub use_spatial: bool,

    pub rule_radius: f64,
    pub total_keywords: Vec<String>,

    pub synth_n: usize,
    pub synth_render: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TaggerConfig::default();
        let r = RuleConfig::default();
        RunConfig {
            seed: t.seed,
            method: Method::BoxTagger,
            decoder: t.decoder,
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            patience: t.patience,
            hidden: t.hidden,
            clip: t.clip,
            global_max_padding: t.global_max_padding,
            split_ratio: 0.8,
            text_dim: t.text.dim,
            vocab_size: t.vocab_size,
            pooling: t.text.pooling,
            weighting_constant: t.text.weighting_constant,
            lowercase: t.text.lowercase,
            number_placeholder: t.text.number_placeholder,
            name_heuristic: t.text.name_heuristic,
            embeddings: None,
            visual_dim: t.visual.out_dim,
            crop_h: t.visual.crop_h,
            crop_w: t.visual.crop_w,
            channels: t.visual.channels,
            visual_precomputed: None,
            use_text: true,
            use_visual: true,
            use_spatial: true,
            rule_radius: r.radius,
            total_keywords: r.total_keywords,
            synth_n: 100,
            synth_render: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(raw: &str, source: &str) -> Result<Self> {
        serde_json::from_str(raw).map_err(|e| Error::Config(format!("{source}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw, &path.display().to_string())
    }

    /// Sets one key from its textual value. Values are parsed as JSON and
    /// fall back to a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut obj = serde_json::to_value(&*self).expect("config serializes");
        let map = obj.as_object_mut().expect("object");
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let parsed = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        map.insert(key.to_string(), parsed);
        *self = serde_json::from_value(obj)
            .map_err(|e| Error::Config(format!("{key}={value}: {e}")))?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn tagger_base(&self) -> TaggerConfig {
        TaggerConfig {
            text: TextFeatureConfig {
                dim: self.text_dim,
                pooling: self.pooling,
                weighting_constant: self.weighting_constant,
                lowercase: self.lowercase,
                number_placeholder: self.number_placeholder,
                name_heuristic: self.name_heuristic,
            },
            visual: VisualEncoderConfig {
                crop_h: self.crop_h,
                crop_w: self.crop_w,
                channels: self.channels,
                out_dim: self.visual_dim,
                ..VisualEncoderConfig::default()
            },
            features: FeatureSet {
                text: self.use_text,
                visual: self.use_visual,
                spatial: self.use_spatial,
            },
            hidden: self.hidden,
            decoder: self.decoder,
            vocab_size: self.vocab_size,
            embeddings: self.embeddings.clone(),
            visual_precomputed: self.visual_precomputed.clone(),
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            clip: self.clip,
            global_max_padding: self.global_max_padding,
            seed: self.seed,
            ..TaggerConfig::default()
        }
    }

    /// Tagger configuration for the selected method (`None` for rules).
    pub fn tagger(&self) -> Option<TaggerConfig> {
        self.method.tagger_config(&self.tagger_base())
    }

    pub fn rules(&self) -> RuleConfig {
        RuleConfig {
            total_keywords: self.total_keywords.clone(),
            radius: self.rule_radius,
            ..RuleConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "split_ratio must be in (0, 1), got {}",
                self.split_ratio
            )));
        }
        if !(self.rule_radius > 0.0) {
            return Err(Error::Config("rule_radius must be positive".into()));
        }
        self.rules().validate()?;
        self.tagger_base().validate()
    }
}
