//! Comparison methods: keyword/pattern rules, a context-free per-box
//! classifier and a word-level BiLSTM tagger.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{reading_order, FieldLabel, Invoice};
use crate::error::{Error, Result};
use crate::neural::{argmax, softmax, Adam, AdamConfig, Affine};
use crate::posteval::{refine_date, strip_total, FieldPrediction};
use crate::tagger::{Decoder, Granularity, Head, TaggerConfig};

pub use crate::tagger::model::majority_vote;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rule,
    BoxClf,
    WordLstm,
    BoxTagger,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Rule,
        Method::BoxClf,
        Method::WordLstm,
        Method::BoxTagger,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rule => "rule",
            Method::BoxClf => "boxclf",
            Method::WordLstm => "wordlstm",
            Method::BoxTagger => "boxtagger",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Tagger configuration realizing a learned method, or `None` for the
    /// rules.
    pub fn tagger_config(self, base: &TaggerConfig) -> Option<TaggerConfig> {
        let mut c = base.clone();
        match self {
            Method::Rule => return None,
            Method::BoxTagger => {}
            Method::BoxClf => {
                c.head = Head::PerBox;
                c.decoder = Decoder::Softmax;
                c.granularity = Granularity::Box;
            }
            Method::WordLstm => {
                c.head = Head::Sequence;
                c.decoder = Decoder::Softmax;
                c.granularity = Granularity::Word;
                c.features.visual = false;
            }
        }
        Some(c)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleConfig {
    /// Tried in order; the first pattern that matches a box wins.
    pub date_patterns: Vec<String>,
    pub total_keywords: Vec<String>,
    /// Search radius as a fraction of the page diagonal.
    pub radius: f64,
    /// Longest address run, in boxes.
    pub max_address_boxes: usize,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            date_patterns: vec![
                // NUM/NUM/NUM
                r"\b\d{1,4}[/.\-]\d{1,4}[/.\-]\d{1,4}\b".into(),
                // NUM/TEXT/NUM
                r"\b\d{1,2}[ /.\-][A-Za-z]{3,9}[ /.\-]\d{2,4}\b".into(),
            ],
            total_keywords: vec!["TOTAL".into(), "AMOUNT".into()],
            radius: 0.15,
            max_address_boxes: 6,
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.date_patterns.is_empty() || self.total_keywords.is_empty() {
            return Err(Error::Config(
                "rules need a date pattern and a total keyword".into(),
            ));
        }
        for p in &self.date_patterns {
            Regex::new(p).map_err(|e| Error::Config(format!("date pattern {p:?}: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuleOutput {
    pub fields: FieldPrediction,
    /// Per-box labels in original order.
    pub labels: Vec<FieldLabel>,
}

fn numeric_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^(?:rm|myr|usd|s?\$)?\s*\d[\d,]*(?:\.\d{1,2})?$").expect("valid pattern")
    })
}

fn is_numeric_like(text: &str) -> bool {
    numeric_regex().is_match(text.trim())
}

fn is_digit_heavy(token: &str) -> bool {
    let n = token.chars().count();
    let d = token.chars().filter(char::is_ascii_digit).count();
    d >= 4 && d as f64 >= 0.6 * n as f64
}

fn keyword_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_uppercase()
        })
        .collect()
}

/// Pattern and proximity extraction. Never fails on a parsed invoice; a
/// field that cannot be found is left empty.
pub fn rule_extract(invoice: &Invoice, cfg: &RuleConfig) -> RuleOutput {
    let boxes = &invoice.boxes;
    let order = reading_order(boxes);
    let mut labels = vec![FieldLabel::None; boxes.len()];
    let mut fields = FieldPrediction::default();

    // total: nearest amount to a keyword box, right of it on its row
    // first, then below, then anywhere within the radius
    let diag = invoice.page_width.hypot(invoice.page_height);
    let radius = cfg.radius * diag;
    let keywords: Vec<String> = cfg
        .total_keywords
        .iter()
        .map(|k| k.to_uppercase())
        .collect();
    let mut best: Option<(u8, f64, usize, usize)> = None;
    for (kp, &k) in order.iter().enumerate() {
        if !keyword_tokens(&boxes[k].text)
            .iter()
            .any(|t| keywords.contains(t))
        {
            continue;
        }
        let kh = boxes[k].hull();
        let (kx, ky) = kh.center();
        for (cp, &c) in order.iter().enumerate() {
            if c == k || !is_numeric_like(&boxes[c].text) {
                continue;
            }
            let ch = boxes[c].hull();
            let (cx, cy) = ch.center();
            let dist = (cx - kx).hypot(cy - ky);
            if dist > radius {
                continue;
            }
            let same_row = (cy - ky).abs() <= 0.5 * kh.height().max(ch.height());
            let tier = if same_row && cx > kx {
                0
            } else if cy > ky {
                1
            } else {
                2
            };
            let key = (tier, dist, cp, kp);
            if best.is_none_or(|b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
                best = Some(key);
            }
        }
    }
    if let Some((_, _, cp, _)) = best {
        let c = order[cp];
        labels[c] = FieldLabel::Total;
        fields.total = strip_total(&boxes[c].text);
    }

    // date: first pattern hit in reading order
    let patterns: Vec<Regex> = cfg
        .date_patterns
        .iter()
        .filter_map(|p| Regex::new(p).ok())
        .collect();
    'date: for &i in &order {
        if labels[i] != FieldLabel::None {
            continue;
        }
        for re in &patterns {
            if let Some(m) = re.find(&boxes[i].text) {
                labels[i] = FieldLabel::Date;
                fields.date = refine_date(m.as_str());
                break 'date;
            }
        }
    }

    // company: the first box; address: following boxes up to and including
    // the first one carrying a digit-heavy token (typically the postcode)
    if let Some(&first) = order.first() {
        if labels[first] == FieldLabel::None {
            labels[first] = FieldLabel::Company;
            fields.company = boxes[first]
                .text
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ");
        }
    }
    let mut address = Vec::new();
    for &i in order.iter().skip(1).take(cfg.max_address_boxes) {
        if labels[i] != FieldLabel::None {
            break;
        }
        labels[i] = FieldLabel::Address;
        address.push(
            boxes[i]
                .text
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" "),
        );
        if boxes[i].text.split_whitespace().any(is_digit_heavy) {
            break;
        }
    }
    fields.address = address.join(" ");
    RuleOutput { fields, labels }
}

/// Single affine layer + softmax trained per example with cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxClassifier {
    pub layer: Affine,
}

impl SoftmaxClassifier {
    pub fn new(input: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SoftmaxClassifier {
            layer: Affine::new("boxclf", input, classes, &mut rng),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.layer.forward(x)?))
    }

    /// Mini-batch Adam on mean cross-entropy; returns the final epoch loss.
    pub fn fit(
        &mut self,
        xs: &[Vec<f64>],
        ys: &[usize],
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<f64> {
        if xs.len() != ys.len() || xs.is_empty() {
            return Err(Error::Shape(format!(
                "{} examples vs {} labels",
                xs.len(),
                ys.len()
            )));
        }
        let mut adam = Adam::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        let mut last = f64::INFINITY;
        for _ in 0..epochs {
            idx.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in idx.chunks(8) {
                let scale = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let p = softmax(&self.layer.forward(&xs[i])?);
                    total -= p[ys[i]].max(f64::MIN_POSITIVE).ln();
                    let mut d: Vec<f64> = p.iter().map(|v| v * scale).collect();
                    d[ys[i]] -= scale;
                    self.layer.backward(&xs[i], &d, None);
                }
                adam.step(&mut [&mut self.layer.weight, &mut self.layer.bias])?;
            }
            last = total / xs.len() as f64;
        }
        Ok(last)
    }
}
