//! From per-box tags to field strings, and scoring of both.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{reading_order, FieldAnnotation, FieldLabel, Invoice};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldPrediction {
    pub company: String,
    pub date: String,
    pub address: String,
    pub total: String,
}

impl FieldPrediction {
    pub fn get(&self, label: FieldLabel) -> &str {
        match label {
            FieldLabel::Company => &self.company,
            FieldLabel::Address => &self.address,
            FieldLabel::Date => &self.date,
            FieldLabel::Total => &self.total,
            FieldLabel::None => "",
        }
    }
}

impl From<&FieldAnnotation> for FieldPrediction {
    fn from(a: &FieldAnnotation) -> Self {
        FieldPrediction {
            company: a.company.clone(),
            date: a.date.clone(),
            address: a.address.clone(),
            total: a.total.clone(),
        }
    }
}

const MONTHS: &str = "jan|feb|mar|apr|may|jun|jul|aug|sep|sept|oct|nov|dec|january|february|march|april|june|july|august|september|october|november|december";

fn date_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let pattern = format!(
            r"(?i)\b(?:\d{{1,4}}/\d{{1,4}}/\d{{1,4}}|\d{{1,4}}-\d{{1,4}}-\d{{1,4}}|\d{{1,4}}\.\d{{1,4}}\.\d{{1,4}}|\d{{1,2}}[ /\-]?(?:{MONTHS})[ /\-]?\d{{2,4}})\b"
        );
        Regex::new(&pattern).expect("valid date pattern")
    })
}

/// Keeps the first date-shaped substring, dropping times and other noise;
/// text without one comes back unchanged.
pub fn refine_date(text: &str) -> String {
    match date_regex().find(text) {
        Some(m) => m.as_str().to_string(),
        None => text.to_string(),
    }
}

/// Drops currency symbols and letters, keeping digits, `,` and one decimal
/// point (the last one).
pub fn strip_total(text: &str) -> String {
    let kept: String = text
        .chars()
        .filter(|c| c.is_ascii_digit() || *c == '.' || *c == ',')
        .collect();
    let trimmed = kept.trim_matches(|c| c == '.' || c == ',');
    match trimmed.rfind('.') {
        Some(last) => trimmed
            .char_indices()
            .filter(|&(i, c)| c != '.' || i == last)
            .map(|(_, c)| c)
            .collect(),
        None => trimmed.to_string(),
    }
}

/// Builds field strings from per-box labels (original box order).
pub fn aggregate_fields(
    invoice: &Invoice,
    labels: &[FieldLabel],
    confidences: &[f64],
) -> FieldPrediction {
    let order = reading_order(&invoice.boxes);
    let join = |want: FieldLabel| {
        order
            .iter()
            .filter(|&&i| labels[i] == want)
            .map(|&i| {
                invoice.boxes[i]
                    .text
                    .split_whitespace()
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    // highest confidence; ties go to the earlier box in reading order
    let best = |want: FieldLabel| {
        let mut pick: Option<usize> = None;
        for &i in &order {
            if labels[i] == want && pick.is_none_or(|p| confidences[i] > confidences[p]) {
                pick = Some(i);
            }
        }
        pick.map(|i| invoice.boxes[i].text.trim().to_string())
    };
    FieldPrediction {
        company: join(FieldLabel::Company),
        address: join(FieldLabel::Address),
        date: best(FieldLabel::Date)
            .map(|t| refine_date(&t))
            .unwrap_or_default(),
        total: best(FieldLabel::Total)
            .map(|t| strip_total(&t))
            .unwrap_or_default(),
    }
}

/// Case-fold, collapse whitespace, strip leading/trailing punctuation.
pub fn normalize_field(s: &str) -> String {
    let collapsed = s
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            correct,
            predicted,
            gold,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldScores {
    pub per_field: BTreeMap<String, Prf>,
    pub micro: Prf,
    pub invoices: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxScores {
    pub accuracy: f64,
    pub per_class: BTreeMap<String, Prf>,
    /// Mean F1 over the four field classes.
    pub macro_f1: f64,
    /// `confusion[gold][pred]` by label id.
    pub confusion: [[usize; FieldLabel::COUNT]; FieldLabel::COUNT],
    pub boxes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub fields: FieldScores,
    pub boxes: BoxScores,
}

/// SROIE-style exact match over `(invoice id, prediction)` pairs.
pub fn evaluate_fields(
    preds: &[(String, FieldPrediction)],
    golds: &[(String, FieldPrediction)],
) -> Result<FieldScores> {
    let gold_map: BTreeMap<&str, &FieldPrediction> =
        golds.iter().map(|(id, g)| (id.as_str(), g)).collect();
    let pred_map: BTreeMap<&str, &FieldPrediction> =
        preds.iter().map(|(id, p)| (id.as_str(), p)).collect();
    if gold_map.len() != golds.len() || pred_map.len() != preds.len() {
        return Err(Error::Shape("duplicate invoice ids in evaluation".into()));
    }
    if gold_map.keys().ne(pred_map.keys()) {
        let missing: Vec<&str> = gold_map
            .keys()
            .filter(|k| !pred_map.contains_key(*k))
            .chain(pred_map.keys().filter(|k| !gold_map.contains_key(*k)))
            .copied()
            .collect();
        return Err(Error::Shape(format!(
            "invoice ids differ: {}",
            missing.join(", ")
        )));
    }
    let mut counts = [(0usize, 0usize, 0usize); 4];
    for (id, g) in &gold_map {
        let p = pred_map[id];
        for (k, label) in FieldLabel::FIELDS.iter().enumerate() {
            let (pn, gn) = (
                normalize_field(p.get(*label)),
                normalize_field(g.get(*label)),
            );
            if !pn.is_empty() {
                counts[k].1 += 1;
            }
            if !gn.is_empty() {
                counts[k].2 += 1;
            }
            if !pn.is_empty() && pn == gn {
                counts[k].0 += 1;
            }
        }
    }
    let per_field = FieldLabel::FIELDS
        .iter()
        .zip(counts)
        .map(|(l, (c, p, g))| (l.name().to_string(), Prf::from_counts(c, p, g)))
        .collect();
    let (c, p, g) = counts
        .iter()
        .fold((0, 0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
    Ok(FieldScores {
        per_field,
        micro: Prf::from_counts(c, p, g),
        invoices: gold_map.len(),
    })
}

pub fn evaluate_boxes(pred: &[FieldLabel], gold: &[FieldLabel]) -> Result<BoxScores> {
    if pred.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predicted labels vs {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    let mut confusion = [[0usize; FieldLabel::COUNT]; FieldLabel::COUNT];
    for (p, g) in pred.iter().zip(gold) {
        confusion[g.id()][p.id()] += 1;
    }
    let correct: usize = (0..FieldLabel::COUNT).map(|k| confusion[k][k]).sum();
    let per_class: BTreeMap<String, Prf> = FieldLabel::ALL
        .iter()
        .map(|l| {
            let k = l.id();
            let predicted = (0..FieldLabel::COUNT).map(|g| confusion[g][k]).sum();
            let gold_n = confusion[k].iter().sum();
            (
                l.name().to_string(),
                Prf::from_counts(confusion[k][k], predicted, gold_n),
            )
        })
        .collect();
    let macro_f1 = FieldLabel::FIELDS
        .iter()
        .map(|l| per_class[l.name()].f1)
        .sum::<f64>()
        / FieldLabel::FIELDS.len() as f64;
    Ok(BoxScores {
        accuracy: ratio(correct, pred.len()),
        per_class,
        macro_f1,
        confusion,
        boxes: pred.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "table" => Ok(ReportFormat::Table),
            other => Err(Error::Config(format!(
                "unknown report format {other:?} (json, table)"
            ))),
        }
    }
}

/// Renders one or more method reports. JSON is an array of reports.
pub fn emit_report(reports: &[EvalReport], format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut v = serde_json::to_vec_pretty(reports).expect("report serializes");
            v.push(b'\n');
            v
        }
        ReportFormat::Table => render_table(reports).into_bytes(),
    }
}

fn render_table(reports: &[EvalReport]) -> String {
    let mut header = vec!["method".to_string()];
    header.extend(
        FieldLabel::FIELDS
            .iter()
            .map(|l| format!("{} F1", l.name())),
    );
    header.extend(["field F1", "box acc", "box macro-F1"].map(String::from));
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.method.clone()];
        for l in FieldLabel::FIELDS {
            let f1 = r.fields.per_field.get(l.name()).map_or(0.0, |p| p.f1);
            row.push(format!("{:.1}", 100.0 * f1));
        }
        row.push(format!("{:.1}", 100.0 * r.fields.micro.f1));
        row.push(format!("{:.1}", 100.0 * r.boxes.accuracy));
        row.push(format!("{:.1}", 100.0 * r.boxes.macro_f1));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| {
                if c == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::BoundingBox;
    use proptest::prelude::*;
    use FieldLabel::*;

    #[test]
    fn refine_date_cases() {
        let cases = [
            ("26/02/1998 18:12:12", "26/02/1998"),
            ("26/02/1998 18:12:1222", "26/02/1998"),
            ("2018-03-01", "2018-03-01"),
            ("LUNCH SPECIAL", "LUNCH SPECIAL"),
            ("DATE: 12/01/2019", "12/01/2019"),
            ("05.11.2017 10:45 AM", "05.11.2017"),
            ("25 MAR 2018", "25 MAR 2018"),
            ("25-Mar-2018 13:01", "25-Mar-2018"),
            ("1/2/18", "1/2/18"),
            ("Date 3 january 2019 time 12:00", "3 january 2019"),
            ("TOTAL 7.50", "TOTAL 7.50"),
            ("18:12:12", "18:12:12"),
            ("06/05/2018 06/06/2018", "06/05/2018"),
        ];
        for (input, want) in cases {
            assert_eq!(refine_date(input), want, "{input}");
        }
    }

    #[test]
    fn strip_total_cases() {
        assert_eq!(strip_total("RM 7.50"), "7.50");
        assert_eq!(strip_total("7.50"), "7.50");
        assert_eq!(strip_total("$1,234.56"), "1,234.56");
        assert_eq!(strip_total("TOTAL: 12.00."), "12.00");
        assert_eq!(strip_total("1.234.50"), "1234.50");
        assert_eq!(strip_total("RM"), "");
    }

    fn inv(texts: &[(&str, f64)]) -> Invoice {
        let boxes = texts
            .iter()
            .map(|(t, y)| BoundingBox::rect(10.0, *y, 80.0, 10.0, *t))
            .collect();
        Invoice::new("i", 200.0, 400.0, boxes, Option::None).unwrap()
    }

    #[test]
    fn aggregation_examples() {
        let invoice = inv(&[
            ("KUALA LUMPUR", 60.0),
            ("12 FOO ST", 40.0),
            ("26/02/1998 18:12", 100.0),
            ("27/02/1998", 120.0),
            ("RM 7.50", 300.0),
        ]);
        let labels = [Address, Address, Date, Date, Total];
        let f = aggregate_fields(&invoice, &labels, &[0.8, 0.8, 0.9, 0.4, 0.7]);
        assert_eq!(f.address, "12 FOO ST KUALA LUMPUR");
        assert_eq!(f.date, "26/02/1998");
        assert_eq!(f.total, "7.50");
        assert_eq!(f.company, "");
    }

    fn fp(company: &str, date: &str, address: &str, total: &str) -> FieldPrediction {
        FieldPrediction {
            company: company.into(),
            date: date.into(),
            address: address.into(),
            total: total.into(),
        }
    }

    #[test]
    fn field_matching_examples() {
        let s = evaluate_fields(
            &[("a".into(), fp("ACME SDN BHD", "", "", "7.50"))],
            &[("a".into(), fp("acme sdn bhd", "", "", "7.50"))],
        )
        .unwrap();
        assert_eq!(s.per_field["total"].correct, 1);
        assert_eq!(s.per_field["company"].correct, 1);
        assert_eq!(normalize_field("  Acme,  Sdn\tBhd. "), "acme, sdn bhd");
    }

    #[test]
    fn precision_recall_arithmetic() {
        // 4 predicted totals, 2 correct, 2 gold
        let preds = vec![
            ("a".to_string(), fp("", "", "", "1.00")),
            ("b".to_string(), fp("", "", "", "2.00")),
            ("c".to_string(), fp("", "", "", "3.00")),
            ("d".to_string(), fp("", "", "", "4.00")),
        ];
        let golds = vec![
            ("a".to_string(), fp("", "", "", "1.00")),
            ("b".to_string(), fp("", "", "", "2.00")),
            ("c".to_string(), fp("", "", "", "")),
            ("d".to_string(), fp("", "", "", "")),
        ];
        let s = evaluate_fields(&preds, &golds).unwrap();
        let t = &s.per_field["total"];
        assert_eq!((t.precision, t.recall), (0.5, 1.0));
        assert!((t.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(evaluate_fields(&preds[..3], &golds).is_err());
    }

    #[test]
    fn box_metric_examples() {
        let gold = [Company, Address, Date, Total, None];
        let s = evaluate_boxes(&gold, &gold).unwrap();
        assert_eq!((s.accuracy, s.macro_f1), (1.0, 1.0));

        let s = evaluate_boxes(&[None; 5], &gold).unwrap();
        assert_eq!(s.macro_f1, 0.0);

        let s = evaluate_boxes(&[Date, Date], &[Date, None]).unwrap();
        let d = &s.per_class["date"];
        assert_eq!((d.precision, d.recall), (0.5, 1.0));
        assert!((d.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(evaluate_boxes(&[Date], &[]).is_err());
    }

    fn report(method: &str) -> EvalReport {
        let gold = [Company, Address, Date, Total, None, None];
        let pred = [Company, Address, Date, None, None, Total];
        EvalReport {
            method: method.into(),
            fields: evaluate_fields(
                &[("a".into(), fp("x", "1/1/2000", "y", "1.00"))],
                &[("a".into(), fp("x", "1/1/2000", "z", "1.00"))],
            )
            .unwrap(),
            boxes: evaluate_boxes(&pred, &gold).unwrap(),
        }
    }

    #[test]
    fn report_output() {
        let reports = vec![report("rule"), report("boxtagger")];
        let json = emit_report(&reports, ReportFormat::Json);
        let back: Vec<EvalReport> = serde_json::from_slice(&json).unwrap();
        assert_eq!(back, reports);
        assert_eq!(json, emit_report(&reports, ReportFormat::Json));

        let table = String::from_utf8(emit_report(&reports, ReportFormat::Table)).unwrap();
        assert_eq!(table.lines().count(), 2 + reports.len());
        assert!(table.lines().nth(2).unwrap().starts_with("rule"));
        assert!("xml".parse::<ReportFormat>().is_err());
    }

    fn arb_label() -> impl Strategy<Value = FieldLabel> {
        (0usize..5).prop_map(|i| FieldLabel::from_id(i).unwrap())
    }

    proptest! {
        #[test]
        fn refine_date_is_idempotent(s in "[0-9A-Za-z /:.\\-]{0,30}") {
            let once = refine_date(&s);
            prop_assert_eq!(refine_date(&once), once);
        }

        #[test]
        fn confusion_consistency(pairs in prop::collection::vec((arb_label(), arb_label()), 1..60)) {
            let (pred, gold): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let s = evaluate_boxes(&pred, &gold).unwrap();
            let total: usize = s.confusion.iter().flatten().sum();
            prop_assert_eq!(total, pred.len());
            for l in FieldLabel::ALL {
                let row = &s.confusion[l.id()];
                let n = gold.iter().filter(|g| **g == l).count();
                prop_assert_eq!(row.iter().sum::<usize>(), n);
                let r = if n == 0 { 0.0 } else { row[l.id()] as f64 / n as f64 };
                prop_assert_eq!(r, s.per_class[l.name()].recall);
            }
            let mean = FieldLabel::FIELDS.iter().map(|l| s.per_class[l.name()].f1).sum::<f64>() / 4.0;
            prop_assert_eq!(mean, s.macro_f1);
            for p in s.per_class.values() {
                prop_assert!((0.0..=1.0).contains(&p.f1));
            }
        }

        #[test]
        fn field_eval_ignores_order(seed in 0u64..1000) {
            let mut preds: Vec<(String, FieldPrediction)> = (0..6)
                .map(|i| (format!("id{i}"), fp(&format!("c{}", (seed + i) % 3), "", "", &format!("{}.00", i % 2))))
                .collect();
            let golds: Vec<(String, FieldPrediction)> = (0..6)
                .map(|i| (format!("id{i}"), fp("c1", "", "", "1.00")))
                .collect();
            let a = evaluate_fields(&preds, &golds).unwrap();
            preds.reverse();
            prop_assert_eq!(a, evaluate_fields(&preds, &golds).unwrap());
        }
    }
}
