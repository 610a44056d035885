//! SROIE-style corpus handling: box files, field annotations, label
//! alignment, reading order and train/test splitting.
//!
//! A corpus directory holds, per receipt `<id>`:
//! - `<id>.txt`: one box per line, `x1,y1,x2,y2,x3,y3,x4,y4,transcript`
//! - `<id>.json`: `{"company": .., "date": .., "address": .., "total": ..}`
//! - optionally `<id>.jpg` or `<id>.png`

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::visual_features::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// One OCR text block. Corners run top-left, top-right, bottom-right,
/// bottom-left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub corners: [Point; 4],
    pub text: String,
}

/// Axis-aligned extent of a quad.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hull {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Hull {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.min_x + self.max_x) / 2.0,
            (self.min_y + self.max_y) / 2.0,
        )
    }
}

impl BoundingBox {
    pub fn new(corners: [Point; 4], text: impl Into<String>) -> Self {
        BoundingBox {
            corners,
            text: text.into(),
        }
    }

    /// Axis-aligned rectangle from its top-left corner and size.
    pub fn rect(x: f64, y: f64, w: f64, h: f64, text: impl Into<String>) -> Self {
        BoundingBox::new(
            [
                Point::new(x, y),
                Point::new(x + w, y),
                Point::new(x + w, y + h),
                Point::new(x, y + h),
            ],
            text,
        )
    }

    pub fn hull(&self) -> Hull {
        let mut h = Hull {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for p in &self.corners {
            h.min_x = h.min_x.min(p.x);
            h.min_y = h.min_y.min(p.y);
            h.max_x = h.max_x.max(p.x);
            h.max_y = h.max_y.max(p.y);
        }
        h
    }

    pub fn center(&self) -> (f64, f64) {
        self.hull().center()
    }

    fn clamp(&mut self, width: f64, height: f64) {
        for p in &mut self.corners {
            p.x = p.x.clamp(0.0, width);
            p.y = p.y.clamp(0.0, height);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Invoice {
    pub id: String,
    pub page_width: f64,
    pub page_height: f64,
    pub boxes: Vec<BoundingBox>,
    pub image: Option<Raster>,
}

impl Invoice {
    /// Builds an invoice, clamping all corners into the page.
    pub fn new(
        id: impl Into<String>,
        page_width: f64,
        page_height: f64,
        mut boxes: Vec<BoundingBox>,
        image: Option<Raster>,
    ) -> Result<Self> {
        let id = id.into();
        if !(page_width > 0.0 && page_height > 0.0) {
            return Err(Error::data(&id, "page dimensions must be positive"));
        }
        if boxes.is_empty() {
            return Err(Error::EmptyCorpus(id));
        }
        for b in &mut boxes {
            b.clamp(page_width, page_height);
        }
        Ok(Invoice {
            id,
            page_width,
            page_height,
            boxes,
            image,
        })
    }

    /// Checks the corpus invariants: non-empty boxes and transcripts, all
    /// corners finite and within the page.
    pub fn validate(&self) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::EmptyCorpus(self.id.clone()));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.text.trim().is_empty() {
                return Err(Error::data(
                    &self.id,
                    format!("box {i} has an empty transcript"),
                ));
            }
            for p in &b.corners {
                if !(p.x.is_finite() && p.y.is_finite())
                    || p.x < 0.0
                    || p.y < 0.0
                    || p.x > self.page_width
                    || p.y > self.page_height
                {
                    return Err(Error::data(
                        &self.id,
                        format!("box {i} has a corner outside the page: ({}, {})", p.x, p.y),
                    ));
                }
            }
        }
        if let Some(img) = &self.image {
            if img.width() == 0 || img.height() == 0 {
                return Err(Error::data(&self.id, "empty image"));
            }
        }
        Ok(())
    }
}

/// The five per-box classes. Ids are fixed: Company 0 .. None 4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldLabel {
    Company,
    Address,
    Date,
    Total,
    None,
}

impl FieldLabel {
    pub const ALL: [FieldLabel; 5] = [
        FieldLabel::Company,
        FieldLabel::Address,
        FieldLabel::Date,
        FieldLabel::Total,
        FieldLabel::None,
    ];
    pub const FIELDS: [FieldLabel; 4] = [
        FieldLabel::Company,
        FieldLabel::Address,
        FieldLabel::Date,
        FieldLabel::Total,
    ];
    pub const COUNT: usize = 5;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<FieldLabel> {
        FieldLabel::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FieldLabel::Company => "company",
            FieldLabel::Address => "address",
            FieldLabel::Date => "date",
            FieldLabel::Total => "total",
            FieldLabel::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<FieldLabel> {
        FieldLabel::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for FieldLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Gold field strings for one receipt; empty means absent.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldAnnotation {
    pub company: String,
    pub date: String,
    pub address: String,
    pub total: String,
}

impl FieldAnnotation {
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

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledInvoice {
    pub invoice: Invoice,
    pub labels: Vec<FieldLabel>,
}

impl LabeledInvoice {
    pub fn new(invoice: Invoice, labels: Vec<FieldLabel>) -> Result<Self> {
        if labels.len() != invoice.boxes.len() {
            return Err(Error::data(
                &invoice.id,
                format!("{} labels for {} boxes", labels.len(), invoice.boxes.len()),
            ));
        }
        Ok(LabeledInvoice { invoice, labels })
    }

    pub fn id(&self) -> &str {
        &self.invoice.id
    }
}

// ---------------------------------------------------------------------------
// Box files

fn parse_line(line: &str, line_no: usize) -> Result<([f64; 8], String)> {
    let fields: Vec<&str> = line.splitn(9, ',').collect();
    if fields.len() < 9 {
        return Err(Error::Parse {
            path: String::new(),
            line: line_no,
            msg: format!(
                "expected 8 coordinates and a transcript, found {} fields",
                fields.len()
            ),
        });
    }
    let mut coords = [0.0; 8];
    for (k, raw) in fields[..8].iter().enumerate() {
        let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
            path: String::new(),
            line: line_no,
            msg: format!("coordinate {} is not a number: {:?}", k + 1, raw),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                path: String::new(),
                line: line_no,
                msg: format!("coordinate {} is not finite", k + 1),
            });
        }
        coords[k] = v;
    }
    Ok((coords, fields[8].trim().to_string()))
}

fn parse_unclamped(raw_text: &str) -> Result<Vec<BoundingBox>> {
    let mut boxes = Vec::new();
    for (i, line) in raw_text.lines().enumerate() {
        let line = line.trim_start_matches('\u{feff}');
        if line.trim().is_empty() {
            continue;
        }
        let (c, text) = parse_line(line, i + 1)?;
        if text.is_empty() {
            log::warn!("line {}: empty transcript, box skipped", i + 1);
            continue;
        }
        boxes.push(BoundingBox::new(
            [
                Point::new(c[0], c[1]),
                Point::new(c[2], c[3]),
                Point::new(c[4], c[5]),
                Point::new(c[6], c[7]),
            ],
            text,
        ));
    }
    if boxes.is_empty() {
        return Err(Error::EmptyCorpus(String::from("<box file>")));
    }
    Ok(boxes)
}

/// Parses a box file. The transcript is everything after the eighth comma,
/// so amounts such as `1,000.00` survive. Corners are clamped to the page.
pub fn parse_box_file(
    raw_text: &str,
    page_width: f64,
    page_height: f64,
) -> Result<Vec<BoundingBox>> {
    let mut boxes = parse_unclamped(raw_text)?;
    for b in &mut boxes {
        b.clamp(page_width, page_height);
    }
    Ok(boxes)
}

pub fn serialize_box_file(boxes: &[BoundingBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        for p in &b.corners {
            out.push_str(&format!("{},{},", p.x, p.y));
        }
        out.push_str(&b.text);
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Label alignment

/// Case-folded, whitespace-split tokens.
pub fn normalized_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_lowercase()).collect()
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty()
        && needle.len() <= haystack.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Per-field outcome of [`align_labels`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldCoverage {
    pub annotated: bool,
    pub matched_boxes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCoverage {
    pub fields: BTreeMap<String, FieldCoverage>,
    pub warnings: Vec<String>,
}

impl AlignmentCoverage {
    pub fn merge(&mut self, other: &AlignmentCoverage) {
        for (k, v) in &other.fields {
            let e = self.fields.entry(k.clone()).or_default();
            e.annotated |= v.annotated;
            e.matched_boxes += v.matched_boxes;
        }
        self.warnings.extend(other.warnings.iter().cloned());
    }
}

const ALIGN_PRIORITY: [FieldLabel; 4] = [
    FieldLabel::Total,
    FieldLabel::Date,
    FieldLabel::Company,
    FieldLabel::Address,
];

/// Assigns each box the field whose normalized gold string contains the
/// box's tokens as a contiguous run. Date and Total also match when the box
/// contains the whole field (e.g. `26/02/1998 18:12` or `RM 7.50`). Ties go
/// Total > Date > Company > Address; everything else is None.
pub fn align_labels(
    invoice: Invoice,
    ann: &FieldAnnotation,
) -> (LabeledInvoice, AlignmentCoverage) {
    let field_tokens: Vec<(FieldLabel, Vec<String>)> = ALIGN_PRIORITY
        .iter()
        .map(|&l| (l, normalized_tokens(ann.get(l))))
        .collect();
    let mut coverage = AlignmentCoverage::default();
    for (l, toks) in &field_tokens {
        coverage.fields.insert(
            l.name().to_string(),
            FieldCoverage {
                annotated: !toks.is_empty(),
                matched_boxes: 0,
            },
        );
    }

    let labels: Vec<FieldLabel> = invoice
        .boxes
        .iter()
        .map(|b| {
            let bt = normalized_tokens(&b.text);
            for (label, ft) in &field_tokens {
                let atomic = matches!(label, FieldLabel::Total | FieldLabel::Date);
                if contains_run(ft, &bt) || (atomic && contains_run(&bt, ft)) {
                    return *label;
                }
            }
            FieldLabel::None
        })
        .collect();

    for l in &labels {
        if *l != FieldLabel::None {
            if let Some(c) = coverage.fields.get_mut(l.name()) {
                c.matched_boxes += 1;
            }
        }
    }
    for (name, c) in &coverage.fields {
        if c.annotated && c.matched_boxes == 0 {
            coverage
                .warnings
                .push(format!("{}: annotated {name} matched no box", invoice.id));
        }
    }
    (LabeledInvoice { invoice, labels }, coverage)
}

// ---------------------------------------------------------------------------
// Reading order

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Row-major reading order. Boxes whose vertical centers are within half
/// the median box height of a row's first box share that row; rows run top
/// to bottom and boxes within a row left to right. Returns `order` with
/// `order[k]` the index of the k-th box read.
pub fn reading_order(boxes: &[BoundingBox]) -> Vec<usize> {
    let hulls: Vec<Hull> = boxes.iter().map(BoundingBox::hull).collect();
    let tol = median(hulls.iter().map(Hull::height).collect()) / 2.0;
    let centers: Vec<(f64, f64)> = hulls.iter().map(Hull::center).collect();

    let mut by_y: Vec<usize> = (0..boxes.len()).collect();
    by_y.sort_by(|&a, &b| {
        centers[a]
            .1
            .total_cmp(&centers[b].1)
            .then(centers[a].0.total_cmp(&centers[b].0))
    });

    let mut order = Vec::with_capacity(boxes.len());
    let mut row: Vec<usize> = Vec::new();
    let mut anchor = f64::NAN;
    for i in by_y {
        let cy = centers[i].1;
        if row.is_empty() || cy - anchor < tol {
            if row.is_empty() {
                anchor = cy;
            }
            row.push(i);
        } else {
            row.sort_by(|&a, &b| centers[a].0.total_cmp(&centers[b].0));
            order.append(&mut row);
            anchor = cy;
            row.push(i);
        }
    }
    row.sort_by(|&a, &b| centers[a].0.total_cmp(&centers[b].0));
    order.extend(row);
    order
}

// ---------------------------------------------------------------------------
// Splitting

/// Deduplicates by id (first occurrence wins), shuffles under `seed` and
/// puts `ceil(ratio * n)` items in the training half, keeping at least one
/// item on each side.
pub fn split_by_id<T, F>(items: Vec<T>, id: F, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)>
where
    F: Fn(&T) -> &str,
{
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio {ratio} must be in (0, 1)"
        )));
    }
    let mut seen = HashSet::new();
    let mut unique: Vec<T> = Vec::with_capacity(items.len());
    for item in items {
        if seen.insert(id(&item).to_string()) {
            unique.push(item);
        }
    }
    let n = unique.len();
    if n < 2 {
        return Err(Error::data(
            "corpus",
            format!("need at least 2 distinct invoices to split, found {n}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let n_train = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let test = unique.split_off(n_train);
    Ok((unique, test))
}

pub fn split_dataset(
    invoices: Vec<LabeledInvoice>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<LabeledInvoice>, Vec<LabeledInvoice>)> {
    split_by_id(invoices, |i| i.id(), ratio, seed)
}

// ---------------------------------------------------------------------------
// Directory layout

#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub invoice: Invoice,
    pub annotation: Option<FieldAnnotation>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn find_image(dir: &Path, id: &str) -> Option<PathBuf> {
    ["jpg", "jpeg", "png"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads one receipt. Page size comes from the image when present,
/// otherwise from the largest box coordinate.
pub fn load_entry(dir: &Path, id: &str) -> Result<CorpusEntry> {
    let txt = dir.join(format!("{id}.txt"));
    let path_str = txt.display().to_string();
    let raw = read_to_string(&txt)?;
    let with_path = |e: Error| match e {
        Error::Parse { line, msg, .. } => Error::Parse {
            path: path_str.clone(),
            line,
            msg,
        },
        Error::EmptyCorpus(_) => Error::EmptyCorpus(path_str.clone()),
        other => other,
    };
    let boxes = parse_unclamped(&raw).map_err(with_path)?;

    let image = match find_image(dir, id) {
        Some(p) => Some(Raster::load(&p)?),
        None => None,
    };
    let (w, h) = match &image {
        Some(img) => (img.width() as f64, img.height() as f64),
        None => {
            let mut w: f64 = 1.0;
            let mut h: f64 = 1.0;
            for b in &boxes {
                let hull = b.hull();
                w = w.max(hull.max_x);
                h = h.max(hull.max_y);
            }
            (w.ceil(), h.ceil())
        }
    };
    let invoice = Invoice::new(id, w, h, boxes, image)?;

    let json = dir.join(format!("{id}.json"));
    let annotation = if json.is_file() {
        let raw = read_to_string(&json)?;
        let ann: FieldAnnotation = serde_json::from_str(&raw)
            .map_err(|e| Error::data(json.display().to_string(), e.to_string()))?;
        Some(ann)
    } else {
        None
    };
    Ok(CorpusEntry {
        invoice,
        annotation,
    })
}

/// Loads every `<id>.txt` in `dir`, in id order.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<CorpusEntry>> {
    if !dir.is_dir() {
        return Err(Error::data(
            dir.display().to_string(),
            "corpus directory does not exist",
        ));
    }
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::EmptyCorpus(dir.display().to_string()));
    }
    ids.iter().map(|id| load_entry(dir, id)).collect()
}

/// Loads a directory and aligns labels for every annotated receipt.
pub fn load_labeled_dir(dir: &Path) -> Result<(Vec<LabeledInvoice>, AlignmentCoverage)> {
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
        out.push(labeled);
    }
    Ok((out, coverage))
}

/// Writes one receipt in the corpus layout. Images are written as PNG.
pub fn write_entry(dir: &Path, invoice: &Invoice, ann: &FieldAnnotation) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let txt = dir.join(format!("{}.txt", invoice.id));
    fs::write(&txt, serialize_box_file(&invoice.boxes)).map_err(|e| Error::io(&txt, e))?;
    let json = dir.join(format!("{}.json", invoice.id));
    let body = serde_json::to_string_pretty(ann).expect("annotation serializes");
    fs::write(&json, body + "\n").map_err(|e| Error::io(&json, e))?;
    if let Some(img) = &invoice.image {
        img.save_png(&dir.join(format!("{}.png", invoice.id)))?;
    }
    Ok(())
}
