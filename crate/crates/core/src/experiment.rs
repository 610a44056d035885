//! Glue between data, methods and reports, shared by the CLI and tests.

use std::path::Path;

use crate::baselines::{rule_extract, Method, RuleConfig};
use crate::corpus::{
    align_labels, load_corpus_dir, split_by_id, AlignmentCoverage, FieldLabel, LabeledInvoice,
};
use crate::error::{Error, Result};
use crate::posteval::{
    aggregate_fields, evaluate_boxes, evaluate_fields, EvalReport, FieldPrediction,
};
use crate::synth::SynthInvoice;
use crate::tagger::{train, Granularity, Head, TaggerConfig, TaggerModel, TrainOutcome};

/// A labeled receipt with its gold field strings.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub labeled: LabeledInvoice,
    pub gold: FieldPrediction,
}

impl Sample {
    pub fn id(&self) -> &str {
        self.labeled.id()
    }
}

impl From<SynthInvoice> for Sample {
    fn from(s: SynthInvoice) -> Self {
        Sample {
            gold: FieldPrediction::from(&s.annotation),
            labeled: s.labeled,
        }
    }
}

/// Loads and aligns every annotated receipt in a corpus directory.
pub fn load_samples(dir: &Path) -> Result<(Vec<Sample>, AlignmentCoverage)> {
    let mut coverage = AlignmentCoverage::default();
    let mut out = Vec::new();
    for entry in load_corpus_dir(dir)? {
        let ann = entry.annotation.ok_or_else(|| {
            Error::data(
                dir.join(format!("{}.json", entry.invoice.id))
                    .display()
                    .to_string(),
                "missing annotation file",
            )
        })?;
        let (labeled, cov) = align_labels(entry.invoice, &ann);
        coverage.merge(&cov);
        out.push(Sample {
            labeled,
            gold: FieldPrediction::from(&ann),
        });
    }
    Ok((out, coverage))
}

pub fn split_samples(
    samples: Vec<Sample>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    split_by_id(samples, |s| s.id(), ratio, seed)
}

/// Which method a trained configuration realizes.
pub fn method_of(config: &TaggerConfig) -> Method {
    match (config.head, config.granularity) {
        (Head::PerBox, _) => Method::BoxClf,
        (_, Granularity::Word) => Method::WordLstm,
        _ => Method::BoxTagger,
    }
}

/// Per-box labels and confidences (original order) plus field strings.
#[derive(Clone, Debug, PartialEq)]
pub struct InvoiceOutput {
    pub id: String,
    pub labels: Vec<FieldLabel>,
    pub confidences: Vec<f64>,
    pub fields: FieldPrediction,
}

pub fn run_model(model: &TaggerModel, samples: &[Sample]) -> Result<Vec<InvoiceOutput>> {
    samples
        .iter()
        .map(|s| {
            let inv = &s.labeled.invoice;
            let p = model.predict(inv)?;
            Ok(InvoiceOutput {
                id: inv.id.clone(),
                fields: aggregate_fields(inv, &p.labels, &p.confidences),
                labels: p.labels,
                confidences: p.confidences,
            })
        })
        .collect()
}

pub fn run_rules(cfg: &RuleConfig, samples: &[Sample]) -> Vec<InvoiceOutput> {
    samples
        .iter()
        .map(|s| {
            let inv = &s.labeled.invoice;
            let out = rule_extract(inv, cfg);
            InvoiceOutput {
                id: inv.id.clone(),
                confidences: vec![1.0; out.labels.len()],
                labels: out.labels,
                fields: out.fields,
            }
        })
        .collect()
}

pub fn report(method: &str, outputs: &[InvoiceOutput], samples: &[Sample]) -> Result<EvalReport> {
    let preds: Vec<(String, FieldPrediction)> = outputs
        .iter()
        .map(|o| (o.id.clone(), o.fields.clone()))
        .collect();
    let golds: Vec<(String, FieldPrediction)> = samples
        .iter()
        .map(|s| (s.id().to_string(), s.gold.clone()))
        .collect();
    let pred_boxes: Vec<FieldLabel> = outputs
        .iter()
        .flat_map(|o| o.labels.iter().copied())
        .collect();
    let gold_boxes: Vec<FieldLabel> = samples
        .iter()
        .flat_map(|s| s.labeled.labels.iter().copied())
        .collect();
    Ok(EvalReport {
        method: method.to_string(),
        fields: evaluate_fields(&preds, &golds)?,
        boxes: evaluate_boxes(&pred_boxes, &gold_boxes)?,
    })
}

/// Trains `method` (unless it is the rule baseline) on `train_set`, using
/// `val_set` for model selection, and reports on `val_set`.
pub fn train_and_evaluate(
    method: Method,
    base: &TaggerConfig,
    rules: &RuleConfig,
    train_set: &[Sample],
    val_set: &[Sample],
) -> Result<(EvalReport, Option<TrainOutcome>)> {
    match method.tagger_config(base) {
        None => {
            let outputs = run_rules(rules, val_set);
            Ok((report(method.name(), &outputs, val_set)?, None))
        }
        Some(cfg) => {
            let tr: Vec<LabeledInvoice> = train_set.iter().map(|s| s.labeled.clone()).collect();
            let va: Vec<LabeledInvoice> = val_set.iter().map(|s| s.labeled.clone()).collect();
            let outcome = train(&tr, &va, &cfg)?;
            let outputs = run_model(&outcome.model, val_set)?;
            Ok((report(method.name(), &outputs, val_set)?, Some(outcome)))
        }
    }
}
