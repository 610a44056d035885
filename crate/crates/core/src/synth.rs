//! Seeded synthetic receipts with the usual layout regularities: company
//! on top, address below it, date near the top and the total at the bottom
//! right next to its keyword.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    write_entry, BoundingBox, FieldAnnotation, FieldLabel, Invoice, LabeledInvoice,
};
use crate::error::Result;
use crate::visual_features::Raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_invoices: usize,
    pub seed: u64,
    pub page_width: f64,
    pub page_height: f64,
    /// Global shift per invoice as a fraction of the page.
    pub jitter: f64,
    pub time_probability: f64,
    pub min_items: usize,
    pub max_items: usize,
    /// Render a grayscale page with one filled block per box.
    pub render: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_invoices: 100,
            seed: 7,
            page_width: 600.0,
            page_height: 1000.0,
            jitter: 0.03,
            time_probability: 0.1,
            min_items: 5,
            max_items: 15,
            render: true,
        }
    }
}

/// A generated receipt with its gold field strings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthInvoice {
    pub labeled: LabeledInvoice,
    pub annotation: FieldAnnotation,
}

const COMPANY_HEADS: &[&str] = &[
    "GOLDEN",
    "MEGA",
    "SUNRISE",
    "LUCKY",
    "ROYAL",
    "EVERGREEN",
    "PERDANA",
    "SRI",
    "HAPPY",
    "UNITED",
    "BINTANG",
    "CAHAYA",
    "JAYA",
    "EASTERN",
    "PRIMA",
    "SENTOSA",
    "HARMONY",
    "PACIFIC",
];
const COMPANY_BODIES: &[&str] = &[
    "BAKERY",
    "HARDWARE",
    "STATIONERY",
    "MINI MARKET",
    "PHARMACY",
    "RESTAURANT",
    "BOOKSTORE",
    "CAFE",
    "TRADING",
    "ELECTRICAL",
    "FROZEN FOOD",
    "KITCHEN",
];
const COMPANY_SUFFIXES: &[&str] = &["SDN BHD", "ENTERPRISE", "(M) SDN BHD", "TRADING CO", "PLT"];
const STREETS: &[&str] = &[
    "JALAN MAJU",
    "JALAN BUNGA RAYA",
    "JALAN KENARI",
    "LORONG SENTUL",
    "JALAN PUCHONG",
    "JALAN USJ 10",
    "PERSIARAN GURNEY",
    "JALAN AMPANG",
    "JALAN KLANG LAMA",
];
const AREAS: &[&str] = &[
    "TAMAN SRI MUDA",
    "TAMAN MELAWATI",
    "BANDAR BARU BANGI",
    "TAMAN CONNAUGHT",
    "SEKSYEN 13",
    "TAMAN DESA",
    "BANDAR SUNWAY",
];
const CITIES: &[(&str, &str)] = &[
    ("KUALA LUMPUR", "WILAYAH PERSEKUTUAN"),
    ("SHAH ALAM", "SELANGOR"),
    ("PETALING JAYA", "SELANGOR"),
    ("JOHOR BAHRU", "JOHOR"),
    ("IPOH", "PERAK"),
    ("GEORGE TOWN", "PULAU PINANG"),
    ("KAJANG", "SELANGOR"),
];
const ITEMS: &[&str] = &[
    "NASI LEMAK",
    "TEH TARIK",
    "ROTI CANAI",
    "MEE GORENG",
    "KOPI O",
    "AIR SIRAP",
    "A4 PAPER",
    "BLUE PEN",
    "GLUE STICK",
    "BATTERY AA",
    "LED BULB",
    "PVC PIPE",
    "SCREW SET",
    "MILO ICE",
    "CHICKEN RICE",
    "BREAD LOAF",
    "EGG TART",
    "CURRY PUFF",
    "MINERAL WATER",
    "TISSUE BOX",
];
const FOOTERS: &[&str] = &[
    "THANK YOU PLEASE COME AGAIN",
    "GOODS SOLD ARE NOT RETURNABLE",
    "THANK YOU",
    "HAVE A NICE DAY",
];
const HEADERS: &[&str] = &["WELCOME", "BRANCH 02", "OUTLET KL", "HQ"];
const MONTHS: &[&str] = &[
    "JAN", "FEB", "MAR", "APR", "MAY", "JUN", "JUL", "AUG", "SEP", "OCT", "NOV", "DEC",
];
const TOTAL_KEYWORDS: &[&str] = &["TOTAL", "TOTAL AMOUNT", "AMOUNT DUE", "TOTAL (RM)"];

/// Gray level of the rendered block for each class.
fn class_intensity(label: FieldLabel) -> u8 {
    match label {
        FieldLabel::Company => 30,
        FieldLabel::Address => 85,
        FieldLabel::Date => 120,
        FieldLabel::Total => 55,
        FieldLabel::None => 160,
    }
}

fn cents(v: u64) -> String {
    format!("{}.{:02}", v / 100, v % 100)
}

fn random_date<R: Rng>(rng: &mut R) -> String {
    let d = rng.gen_range(1..=28);
    let m = rng.gen_range(1..=12usize);
    let y = rng.gen_range(2015..=2019);
    match rng.gen_range(0..20) {
        0..=9 => format!("{d:02}/{m:02}/{y}"),
        10..=12 => format!("{d:02}-{m:02}-{y}"),
        13..=14 => format!("{y}-{m:02}-{d:02}"),
        15..=17 => format!("{d:02} {} {y}", MONTHS[m - 1]),
        _ => format!("{d:02}.{m:02}.{y}"),
    }
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    cfg: &'a SynthConfig,
    dx: f64,
    dy: f64,
    boxes: Vec<BoundingBox>,
    labels: Vec<FieldLabel>,
}

impl Builder<'_> {
    /// Adds a box whose width follows the text length.
    fn add(&mut self, x: f64, y: f64, char_w: f64, h: f64, text: &str, label: FieldLabel) -> f64 {
        let jx = self.rng.gen_range(-2.0..2.0);
        let jy = self.rng.gen_range(-1.5..1.5);
        let w = (text.chars().count() as f64 * char_w).min(self.cfg.page_width - 20.0);
        let x0 = (x + self.dx + jx).clamp(2.0, self.cfg.page_width - w - 2.0);
        let y0 = (y + self.dy + jy).clamp(2.0, self.cfg.page_height - h - 2.0);
        self.boxes.push(BoundingBox::rect(
            x0.round(),
            y0.round(),
            w.round(),
            h,
            text,
        ));
        self.labels.push(label);
        x0 + w
    }

    fn centered(&mut self, y: f64, char_w: f64, h: f64, text: &str, label: FieldLabel) {
        let w = text.chars().count() as f64 * char_w;
        let x = ((self.cfg.page_width - w) / 2.0).max(10.0);
        self.add(x, y, char_w, h, text, label);
    }
}

fn generate_one(cfg: &SynthConfig, index: usize, rng: &mut ChaCha8Rng) -> SynthInvoice {
    let (pw, ph) = (cfg.page_width, cfg.page_height);
    let dx = rng.gen_range(-cfg.jitter..=cfg.jitter) * pw;
    let dy = rng.gen_range(-cfg.jitter..=cfg.jitter) * ph;
    let mut b = Builder {
        rng,
        cfg,
        dx,
        dy,
        boxes: Vec::new(),
        labels: Vec::new(),
    };

    if b.rng.gen_bool(0.25) {
        let h = *HEADERS.choose(b.rng).expect("non-empty");
        b.centered(12.0, 8.0, 14.0, h, FieldLabel::None);
    }

    // company: one or two large dark lines
    let head = *COMPANY_HEADS.choose(b.rng).expect("non-empty");
    let body = *COMPANY_BODIES.choose(b.rng).expect("non-empty");
    let suffix = *COMPANY_SUFFIXES.choose(b.rng).expect("non-empty");
    let company_lines: Vec<String> = if b.rng.gen_bool(0.5) {
        vec![format!("{head} {body}"), suffix.to_string()]
    } else {
        vec![format!("{head} {body} {suffix}")]
    };
    let mut y = 40.0;
    for line in &company_lines {
        b.centered(y, 15.0, 32.0, line, FieldLabel::Company);
        y += 40.0;
    }
    let company = company_lines.join(" ");

    // address: two or three lines, the last with the postcode
    let (city, state) = *CITIES.choose(b.rng).expect("non-empty");
    let street = *STREETS.choose(b.rng).expect("non-empty");
    let mut address_lines = vec![format!("NO {}, {street},", b.rng.gen_range(1..200))];
    if b.rng.gen_bool(0.6) {
        address_lines.push(format!("{},", AREAS.choose(b.rng).expect("non-empty")));
    }
    address_lines.push(format!(
        "{} {city}, {state}.",
        b.rng.gen_range(10000..99999)
    ));
    y += 4.0;
    for line in &address_lines {
        b.centered(y, 8.5, 17.0, line, FieldLabel::Address);
        y += 22.0;
    }
    let address = address_lines.join(" ");

    let reg = format!(
        "CO REG {}-{}",
        b.rng.gen_range(100000..999999),
        ['A', 'D', 'K', 'X'].choose(b.rng).expect("non-empty")
    );
    b.centered(y, 7.5, 14.0, &reg, FieldLabel::None);
    y += 26.0;

    // date line
    let date = random_date(b.rng);
    let date_text = if b.rng.gen_bool(cfg.time_probability) {
        format!(
            "{date} {:02}:{:02}:{:02}",
            b.rng.gen_range(8..23),
            b.rng.gen_range(0..60),
            b.rng.gen_range(0..60)
        )
    } else {
        date.clone()
    };
    b.add(40.0, y, 8.0, 16.0, "DATE:", FieldLabel::None);
    b.add(100.0, y, 9.0, 16.0, &date_text, FieldLabel::Date);
    let inv_no = format!("INV NO: {}", b.rng.gen_range(10000..99999));
    b.add(380.0, y, 8.0, 16.0, &inv_no, FieldLabel::None);
    y += 30.0;

    // amounts first so item texts can avoid the total string
    let n_items = b.rng.gen_range(cfg.min_items..=cfg.max_items);
    let mut prices: Vec<(usize, u64)> = (0..n_items)
        .map(|_| (b.rng.gen_range(1..4), b.rng.gen_range(200..3000)))
        .collect();
    let subtotal: u64 = prices.iter().map(|(q, p)| *q as u64 * p).sum();
    let tax = (subtotal * 6).div_ceil(100);
    let total = subtotal + tax;
    let total_s = cents(total);
    for (q, p) in &mut prices {
        while cents(*q as u64 * *p) == total_s {
            *p += 1;
        }
    }

    let items_top = y.max(320.0);
    y = items_top;
    for (q, p) in &prices {
        let name = *ITEMS.choose(b.rng).expect("non-empty");
        let line = format!("{name} {q} {}", cents(*q as u64 * p));
        b.add(40.0, y, 8.5, 16.0, &line, FieldLabel::None);
        y += 22.0;
    }

    // totals block anchored in the bottom half, each keyword just left of
    // its amount
    y = (y + 16.0).max(0.56 * ph);
    let mut cash = (total / 1000 + 1) * 1000;
    if cash - total == total {
        cash += 1000;
    }
    let amount_x = 470.0;
    let total_text = if b.rng.gen_bool(0.3) {
        format!("RM {total_s}")
    } else {
        total_s.clone()
    };
    let keyword = *TOTAL_KEYWORDS.choose(b.rng).expect("non-empty");
    let rows: [(&str, String, FieldLabel); 5] = [
        ("SUBTOTAL", cents(subtotal), FieldLabel::None),
        ("GST 6%", cents(tax), FieldLabel::None),
        (keyword, total_text, FieldLabel::Total),
        ("CASH", cents(cash), FieldLabel::None),
        ("CHANGE", cents(cash - total), FieldLabel::None),
    ];
    for (kw, amount, label) in rows.iter() {
        let h = if *label == FieldLabel::Total {
            20.0
        } else {
            16.0
        };
        b.add(340.0, y, 9.0, h, kw, FieldLabel::None);
        b.add(amount_x, y, 9.0, h, amount, *label);
        y += 28.0;
    }
    let footer = *FOOTERS.choose(b.rng).expect("non-empty");
    b.centered(y + 20.0, 8.0, 15.0, footer, FieldLabel::None);

    let Builder { boxes, labels, .. } = b;
    let image = cfg.render.then(|| render(&boxes, &labels, pw, ph, rng));
    let invoice = Invoice::new(format!("synth{index:05}"), pw, ph, boxes, image)
        .expect("valid synthetic invoice");
    SynthInvoice {
        labeled: LabeledInvoice::new(invoice, labels).expect("one label per box"),
        annotation: FieldAnnotation {
            company,
            date,
            address,
            total: total_s,
        },
    }
}

fn render(
    boxes: &[BoundingBox],
    labels: &[FieldLabel],
    pw: f64,
    ph: f64,
    rng: &mut ChaCha8Rng,
) -> Raster {
    let mut img = Raster::filled(pw as usize, ph as usize, 1, 255);
    for (bx, l) in boxes.iter().zip(labels) {
        let h = bx.hull();
        let shade = (i32::from(class_intensity(*l)) + rng.gen_range(-8..=8)).clamp(0, 255) as u8;
        img.fill_rect(
            h.min_x.floor() as usize,
            h.min_y.floor() as usize,
            h.max_x.ceil() as usize,
            h.max_y.ceil() as usize,
            shade,
        );
    }
    img
}

/// Deterministic under `cfg.seed`; invoice `i` uses its own derived stream.
pub fn generate(cfg: &SynthConfig) -> Vec<SynthInvoice> {
    (0..cfg.n_invoices)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            generate_one(cfg, i, &mut rng)
        })
        .collect()
}

/// Writes the corpus layout (`<id>.txt`, `<id>.json`, `<id>.png`).
pub fn write_corpus(dir: &Path, invoices: &[SynthInvoice]) -> Result<()> {
    for s in invoices {
        write_entry(dir, &s.labeled.invoice, &s.annotation)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{align_labels, load_labeled_dir, serialize_box_file};

    fn cfg(n: usize, render: bool) -> SynthConfig {
        SynthConfig {
            n_invoices: n,
            render,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate(&cfg(5, true));
        let b = generate(&cfg(5, true));
        assert_eq!(a, b);
        let c = generate(&SynthConfig {
            seed: 8,
            ..cfg(5, true)
        });
        assert_ne!(a[0].annotation, c[0].annotation);
    }

    #[test]
    fn invoices_validate_and_follow_layout() {
        for s in generate(&cfg(200, false)) {
            let li = &s.labeled;
            li.invoice.validate().unwrap();
            let count = |l: FieldLabel| li.labels.iter().filter(|x| **x == l).count();
            assert_eq!(count(FieldLabel::Date), 1);
            assert_eq!(count(FieldLabel::Total), 1);
            assert!(count(FieldLabel::Address) >= 1);
            assert!((1..=2).contains(&count(FieldLabel::Company)));
            for (b, l) in li.invoice.boxes.iter().zip(&li.labels) {
                let (cx, cy) = b.center();
                match l {
                    FieldLabel::Company => assert!(cy < 0.15 * 1000.0, "{}", li.id()),
                    FieldLabel::Date => assert!(cy < 0.3 * 1000.0, "{}", li.id()),
                    FieldLabel::Total => assert!(cx > 300.0 && cy > 500.0, "{}", li.id()),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn total_keyword_sits_within_default_rule_radius() {
        let radius = crate::baselines::RuleConfig::default().radius;
        for s in generate(&cfg(200, false)) {
            let inv = &s.labeled.invoice;
            let t = s
                .labeled
                .labels
                .iter()
                .position(|&l| l == FieldLabel::Total)
                .unwrap();
            let (tx, ty) = inv.boxes[t].hull().center();
            // the keyword is the box just before the amount
            let (kx, ky) = inv.boxes[t - 1].hull().center();
            assert!(TOTAL_KEYWORDS.contains(&inv.boxes[t - 1].text.as_str()));
            assert!(kx < tx);
            let diag = inv.page_width.hypot(inv.page_height);
            assert!((tx - kx).hypot(ty - ky) < radius * diag, "{}", inv.id);
        }
    }

    #[test]
    fn alignment_recovers_constructed_labels() {
        let (mut agree, mut total) = (0usize, 0usize);
        for s in generate(&cfg(200, false)) {
            let (aligned, _) = align_labels(s.labeled.invoice.clone(), &s.annotation);
            agree += aligned
                .labels
                .iter()
                .zip(&s.labeled.labels)
                .filter(|(a, b)| a == b)
                .count();
            total += aligned.labels.len();
        }
        assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
    }

    #[test]
    fn trailing_time_rate() {
        let data = generate(&cfg(1000, false));
        let with_time = data
            .iter()
            .filter(|s| {
                let li = &s.labeled;
                let i = li
                    .labels
                    .iter()
                    .position(|l| *l == FieldLabel::Date)
                    .unwrap();
                li.invoice.boxes[i].text.contains(':')
            })
            .count();
        // 10% with a 3-sigma band for n = 1000
        let sigma = (1000.0f64 * 0.1 * 0.9).sqrt();
        assert!(
            (with_time as f64 - 100.0).abs() < 3.0 * sigma,
            "{with_time}"
        );
    }

    #[test]
    fn images_carry_class_intensity() {
        let s = &generate(&cfg(1, true))[0];
        let img = s.labeled.invoice.image.as_ref().unwrap();
        let i = s
            .labeled
            .labels
            .iter()
            .position(|l| *l == FieldLabel::Company)
            .unwrap();
        let (cx, cy) = s.labeled.invoice.boxes[i].center();
        let v = img.get(cx as usize, cy as usize, 0) * 255.0;
        assert!((v - 30.0).abs() <= 8.0 + 1e-9);
        assert_eq!(img.get(0, 999, 0), 1.0);
    }

    #[test]
    fn written_corpus_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&cfg(3, true));
        write_corpus(dir.path(), &data).unwrap();
        let (loaded, _) = load_labeled_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in loaded.iter().zip(&data) {
            assert_eq!(a.labels, b.labeled.labels);
            assert_eq!(
                serialize_box_file(&a.invoice.boxes),
                serialize_box_file(&b.labeled.invoice.boxes)
            );
            assert_eq!(a.invoice.image, b.labeled.invoice.image);
        }
    }
}
