//! Synthetic datasets and scripted prediction files.
//!
//! The table fixture encodes published per-model ratios. For every model the
//! generator first solves integer field counts whose ratios round to the
//! published one-decimal percentages, then assigns each field instance a
//! category (exact box, box inside the region, shifted box, box in the margin,
//! no box; correct or wrong value) so that scoring recovers exactly those
//! counts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use groundeval::adapter::{AdapterConfig, AdaptersFile};
use groundeval::ingest::{DatasetManifest, PredictionLine, RawPredictedField, Split};
use groundeval::normalize::normalized_match;
use groundeval::report::percent;
use groundeval::{Convention, FieldSpec, FormSchema, PageSize, Regime, ValueKind};
use serde::Serialize;

pub const TABLE_DOCS: usize = 47;
pub const TABLE_TRAIN_DOCS: usize = 3;
pub const NULLS_PER_DOC: usize = 3;
pub const PAGE: PageSize = PageSize {
    width: 1654,
    height: 2339,
};

/// Directory holding the checked-in table fixture.
pub fn table_fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("table2")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AuditTarget {
    /// Share of all fields.
    OverFields(f64),
    /// Share of boxed fields; used where the field-level figure is not
    /// attainable.
    OverBoxes(f64),
    /// No boxes, so audit equals strict.
    Undefined,
}

/// Published percentages for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub reading: f64,
    pub strict: f64,
    pub audit: AuditTarget,
    pub coverage: f64,
    pub evidence_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub model_id: &'static str,
    pub regime: Regime,
    pub convention: Convention,
    pub targets: Targets,
}

fn spec(
    model_id: &'static str,
    regime: Regime,
    convention: Convention,
    reading: f64,
    strict: f64,
    audit: AuditTarget,
    coverage: f64,
    evidence_precision: Option<f64>,
) -> ModelSpec {
    ModelSpec {
        model_id,
        regime,
        convention,
        targets: Targets {
            reading,
            strict,
            audit,
            coverage,
            evidence_precision,
        },
    }
}

/// The nine models of the results table.
pub fn table_models() -> Vec<ModelSpec> {
    use AuditTarget::*;
    use Convention::*;
    use Regime::*;
    vec![
        spec("gemini-2.5-flash", ZeroShot, Thousandths, 92.6, 1.2, OverFields(41.4), 70.0, Some(73.5)),
        spec("claude-opus-4.6", ZeroShot, Pixels, 95.2, 0.2, OverFields(1.0), 81.9, Some(41.4)),
        spec("qwen3-vl-32b", ZeroShot, Thousandths, 95.3, 8.0, OverFields(60.9), 85.0, Some(80.4)),
        spec("qwen3-vl-8b", ZeroShot, Thousandths, 88.4, 6.2, OverFields(37.2), 60.0, Some(70.1)),
        spec("qwen3-vl-4b", ZeroShot, Thousandths, 87.5, 0.3, OverBoxes(33.3), 1.3, Some(94.4)),
        spec("qwen3-vl-2b", ZeroShot, Thousandths, 62.3, 0.0, Undefined, 0.0, None),
        spec("qwen3-vl-8b-ft", FineTuned, UnitInterval, 96.1, 60.6, OverFields(75.4), 88.0, Some(88.5)),
        spec("qwen3-vl-4b-ft", FineTuned, UnitInterval, 90.1, 25.9, OverFields(46.4), 82.8, Some(78.0)),
        spec("qwen3-vl-2b-ft", FineTuned, UnitInterval, 88.3, 21.0, OverFields(32.9), 87.6, Some(72.0)),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolveError(pub String);

impl fmt::Display for SolveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SolveError {}

/// Integer outcome counts for one model over `fields` field instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub fields: usize,
    pub value_correct: usize,
    pub strict: usize,
    pub audit: usize,
    pub boxes: usize,
    pub hits: usize,
}

fn shown(num: usize, den: usize) -> String {
    percent(num as f64 / den as f64)
}

fn target_str(pct: f64) -> String {
    format!("{pct:.1}%")
}

/// Smallest-deviation count `k <= den` whose ratio displays as `pct`.
pub fn count_for(pct: f64, den: usize) -> Option<usize> {
    let want = target_str(pct);
    let centre = (pct / 100.0 * den as f64).round() as i64;
    (0..=3i64)
        .flat_map(|d| [centre - d, centre + d])
        .filter(|k| (0..=den as i64).contains(k))
        .map(|k| k as usize)
        .find(|&k| shown(k, den) == want)
}

pub fn solve_counts(t: &Targets, fields: usize) -> Result<Counts, SolveError> {
    let err = |what: &str| SolveError(format!("no count of {fields} displays {what}"));
    let value_correct = count_for(t.reading, fields).ok_or_else(|| err("reading"))?;
    let strict = count_for(t.strict, fields).ok_or_else(|| err("strict"))?;

    let (boxes, hits) = match t.evidence_precision {
        None => {
            if t.coverage != 0.0 {
                return Err(SolveError("boxes without evidence precision".into()));
            }
            (0, 0)
        }
        Some(ep) => {
            let want = target_str(t.coverage);
            let centre = (t.coverage / 100.0 * fields as f64).round() as i64;
            (0..=40i64)
                .flat_map(|d| [centre - d, centre + d])
                .filter(|b| *b > 0 && *b <= fields as i64)
                .map(|b| b as usize)
                .filter(|&b| shown(b, fields) == want)
                .find_map(|b| count_for(ep, b).map(|h| (b, h)))
                .ok_or_else(|| err("coverage with evidence precision"))?
        }
    };

    let audit = match t.audit {
        AuditTarget::OverFields(p) => count_for(p, fields).ok_or_else(|| err("audit"))?,
        AuditTarget::OverBoxes(p) => {
            // Strict successes here are vacuous nulls, so every boxed audit
            // success is on top of them.
            strict + count_for(p, boxes).ok_or_else(|| err("audit over boxes"))?
        }
        AuditTarget::Undefined => strict,
    };
    Ok(Counts {
        fields,
        value_correct,
        strict,
        audit,
        boxes,
        hits,
    })
}

/// How a field instance is predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    /// Correct value, box equal to the evidence region.
    Exact,
    /// Correct value, quarter-area box inside the region.
    Inside,
    /// Correct value, box shifted off most of the region.
    Shifted,
    /// Correct value, box in an empty margin.
    Margin,
    /// Correct value, no box.
    NoBox,
    /// Wrong value, box on the region.
    WrongHit,
    /// Wrong value, box in the margin.
    WrongMiss,
    /// Wrong value, no box.
    WrongNoBox,
    /// Null field answered null without a box.
    Vacuous,
    /// Null field answered null, box on another field's evidence.
    NullHit,
    /// Null field answered null, box in the margin.
    NullMiss,
    /// Null field given a value.
    Hallucinated,
}

impl Category {
    pub fn gt_null(self) -> bool {
        matches!(
            self,
            Category::Vacuous | Category::NullHit | Category::NullMiss | Category::Hallucinated
        )
    }
}

/// Category sizes realising a [`Counts`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Plan {
    pub sizes: BTreeMap<Category, usize>,
}

impl Plan {
    pub fn get(&self, c: Category) -> usize {
        self.sizes.get(&c).copied().unwrap_or(0)
    }
}

pub fn plan(c: &Counts, non_null: usize, null: usize) -> Result<Plan, SolveError> {
    use Category::*;
    let fail = |m: &str| SolveError(format!("{m} for {c:?}"));
    if non_null + null != c.fields {
        return Err(fail("field total mismatch"));
    }
    let vacuous = c.strict.min(null);
    let exact = c.strict - vacuous;
    let inside = c.audit.checked_sub(c.strict).ok_or_else(|| fail("audit below strict"))?;
    let grounded = exact + inside;
    let rest_null = null - vacuous;
    let rest_non_null = non_null.checked_sub(grounded).ok_or_else(|| fail("too many grounded"))?;
    let rest_correct = c
        .value_correct
        .checked_sub(vacuous + grounded)
        .ok_or_else(|| fail("reading below audit"))?;
    let rest_wrong = (rest_null + rest_non_null)
        .checked_sub(rest_correct)
        .ok_or_else(|| fail("reading above total"))?;
    let rest_boxes = c.boxes.checked_sub(grounded).ok_or_else(|| fail("boxes below audit"))?;
    let rest_hits = c.hits.checked_sub(grounded).ok_or_else(|| fail("hits below audit"))?;

    let null_correct = rest_null.saturating_sub(rest_wrong);
    let hallucinated = rest_null - null_correct;
    if null_correct > rest_boxes || null_correct > rest_correct {
        return Err(fail("null fields cannot all fail"));
    }
    let correct = rest_correct - null_correct;
    let wrong = rest_wrong - hallucinated;
    let non_null_boxes = rest_boxes - null_correct;
    if non_null_boxes > rest_non_null {
        return Err(fail("more boxes than fields"));
    }
    let correct_boxed = correct.min(non_null_boxes);
    let wrong_boxed = non_null_boxes - correct_boxed;
    let shifted = rest_hits.min(correct_boxed);
    let wrong_hit = (rest_hits - shifted).min(wrong_boxed);
    let null_hit = rest_hits - shifted - wrong_hit;
    if null_hit > null_correct {
        return Err(fail("hits exceed boxes"));
    }

    let sizes = [
        (Exact, exact),
        (Inside, inside),
        (Shifted, shifted),
        (Margin, correct_boxed - shifted),
        (NoBox, correct - correct_boxed),
        (WrongHit, wrong_hit),
        (WrongMiss, wrong_boxed - wrong_hit),
        (WrongNoBox, wrong - wrong_boxed),
        (Vacuous, vacuous),
        (NullHit, null_hit),
        (NullMiss, null_correct - null_hit),
        (Hallucinated, hallucinated),
    ]
    .into_iter()
    .collect();
    Ok(Plan { sizes })
}

fn field(id: &str, label: &str, kind: ValueKind, nullable: bool) -> FieldSpec {
    FieldSpec {
        field_id: id.into(),
        label: label.into(),
        value_kind: kind,
        enum_values: None,
        unit_lexicon: None,
        nullable,
    }
}

/// Bundled referral fields plus fifteen more history and investigation
/// fields.
pub fn table_schema() -> FormSchema {
    let mut schema = FormSchema::bundled();
    schema.schema_id = "crc-urgent-referral-extended".into();
    let strings = |xs: &[&str]| Some(xs.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    let mut extra = vec![
        field("gp_practice", "GP practice name", ValueKind::Text, false),
        field("symptom_onset_date", "Date symptoms started", ValueKind::Date, true),
        field("tenesmus", "Tenesmus", ValueKind::Boolean, true),
        field("anal_pain", "Anal or rectal pain", ValueKind::Boolean, true),
        field("family_history_crc", "Family history of colorectal cancer", ValueKind::Boolean, true),
        field("previous_colonoscopy", "Previous colonoscopy", ValueKind::Boolean, true),
        field("colonoscopy_date", "Date of last colonoscopy", ValueKind::Date, true),
        field("ferritin", "Serum ferritin", ValueKind::Numeric, true),
        field("platelets", "Platelet count", ValueKind::Numeric, true),
        field("anticoagulated", "On anticoagulants", ValueKind::Boolean, true),
        field("smoking_status", "Smoking status", ValueKind::Enum, true),
        field("referral_urgency", "Referral pathway", ValueKind::Enum, false),
        field("next_of_kin", "Next of kin", ValueKind::Text, true),
        field("contact_phone", "Patient telephone", ValueKind::Text, true),
        field("clinical_notes", "Additional clinical information", ValueKind::Text, true),
    ];
    extra[7].unit_lexicon = strings(&["ug/l", "ng/ml"]);
    extra[8].unit_lexicon = strings(&["x10^9/l"]);
    extra[10].enum_values = strings(&["never", "former", "current"]);
    extra[11].enum_values = strings(&["2ww", "urgent", "routine"]);
    schema.fields.extend(extra);
    schema
}

const FIRST: &[&str] = &[
    "Alice", "Brian", "Carys", "Deepak", "Eilidh", "Farah", "Gareth", "Hannah", "Imran", "Joan",
    "Kwame", "Lorna", "Mehmet", "Niamh", "Owen", "Priya", "Quentin",
];
const LAST: &[&str] = &[
    "Ashworth", "Bennett", "Chaudhry", "Davies", "Evans", "Fraser", "Greaves", "Hussain", "Iqbal",
    "Jones", "Kowalski", "Lloyd", "McAllister", "Nowak", "Okafor", "Patel", "Quinn", "Roberts", "Singh",
];
const PRACTICES: &[&str] = &[
    "Riverside Surgery", "Oakfield Medical Centre", "Station Road Practice", "The Grange Surgery",
    "Hillview Health Centre",
];
const NOTES: &[&str] = &[
    "intermittent bleeding for six weeks",
    "loose stools since spring",
    "tired all the time, pale",
    "weight down about 5 kg",
    "mother had bowel cancer aged 60",
];

fn pick<'a>(xs: &[&'a str], i: usize) -> &'a str {
    xs[i % xs.len()]
}

/// Ground-truth value and two predicted surfaces (one equivalent, one not).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Surfaces {
    pub gt: String,
    pub correct: String,
    pub wrong: String,
}

fn date_surfaces(date: NaiveDate, variant: usize) -> Surfaces {
    let correct = match variant % 4 {
        0 => date.format("%d/%m/%Y").to_string(),
        1 => date.format("%-d %B %Y").to_string(),
        2 => date.format("%B %-d, %Y").to_string(),
        _ => date.format("%Y-%m-%d").to_string(),
    };
    Surfaces {
        gt: date.format("%Y-%m-%d").to_string(),
        correct,
        wrong: (date + Days::new(1)).format("%Y-%m-%d").to_string(),
    }
}

/// Values for field `f` of document `d`.
pub fn surfaces(spec: &FieldSpec, d: usize, f: usize) -> Surfaces {
    let v = d * 31 + f * 7;
    let id = spec.field_id.as_str();
    let text = |gt: String, wrong: String| Surfaces {
        correct: if v % 2 == 0 { gt.to_uppercase() } else { format!("  {gt} ") },
        gt,
        wrong,
    };
    match spec.value_kind {
        ValueKind::Text => match id {
            "patient_name" | "next_of_kin" => {
                let o = if id == "next_of_kin" { 5 } else { 0 };
                let first = pick(FIRST, d + o);
                text(
                    format!("{first} {}", pick(LAST, d * 7 + o)),
                    format!("{first} {}", pick(LAST, d * 7 + o + 1)),
                )
            }
            "referring_gp" => text(
                format!("Dr {}", pick(LAST, d * 3 + 2)),
                format!("Dr {}", pick(LAST, d * 3 + 3)),
            ),
            "gp_practice" => text(pick(PRACTICES, d).into(), pick(PRACTICES, d + 1).into()),
            "nhs_number" | "contact_phone" => {
                let n = 4_000_000_000u64 + (d as u64 * 7_919_113 + f as u64 * 104_729) % 999_999_999;
                let s = n.to_string();
                let gt = if id == "nhs_number" {
                    format!("{} {} {}", &s[..3], &s[3..6], &s[6..])
                } else {
                    format!("0{s}")
                };
                let mut wrong = gt.clone();
                let last = wrong.pop().unwrap();
                wrong.push(if last == '9' { '0' } else { '9' });
                Surfaces {
                    correct: gt.clone(),
                    gt,
                    wrong,
                }
            }
            _ => text(pick(NOTES, d).into(), pick(NOTES, d + 2).into()),
        },
        ValueKind::Boolean => {
            let gt = (d + f) % 2 == 0;
            let (yes, no) = (["Yes", "Y", "TRUE", "checked", "\u{2713}"], ["No", "N", "false", "unchecked"]);
            let correct = if gt { pick(&yes, v) } else { pick(&no, v) };
            Surfaces {
                gt: if gt { "yes" } else { "no" }.into(),
                correct: correct.into(),
                wrong: if gt { "no" } else { "yes" }.into(),
            }
        }
        ValueKind::Numeric => {
            let tenths = 10 + v % 190;
            let units = spec.unit_lexicon().unwrap_or(&[]);
            let unit = units.first().map(String::as_str).unwrap_or("");
            let num = format!("{}.{}", tenths / 10, tenths % 10);
            let gt = format!("{num} {unit}").trim().to_string();
            let alt_unit = match unit {
                "ug/g" => "\u{b5}g/g",
                "g/l" => "gm/l",
                other => other,
            };
            let correct = if v % 2 == 0 {
                format!("{num}0 {alt_unit}")
            } else {
                format!("{num}{unit}")
            };
            let wrong = format!("{}.{} {unit}", tenths / 10 + 1, tenths % 10);
            Surfaces {
                gt,
                correct: correct.trim().to_string(),
                wrong: wrong.trim().to_string(),
            }
        }
        ValueKind::Date => {
            let base = NaiveDate::from_ymd_opt(2024, 1, 8).unwrap();
            let offset = match id {
                "date_of_birth" => return date_surfaces(
                    NaiveDate::from_ymd_opt(1940, 1, 1).unwrap() + Days::new((d * 379 + 97) as u64 % 14_000),
                    v,
                ),
                "referral_date" => d * 5,
                "fit_date" => d * 5 + 30,
                _ => d * 5 + 60 + f,
            };
            date_surfaces(base + Days::new(offset as u64 % 600), v)
        }
        ValueKind::Enum => {
            let opts = spec.enum_values.as_deref().unwrap_or(&[]);
            let i = (d + f) % opts.len();
            Surfaces {
                gt: opts[i].clone(),
                correct: opts[i].to_uppercase(),
                wrong: opts[(i + 1) % opts.len()].clone(),
            }
        }
    }
}

/// Evidence region of field `f` in pixels: two columns of fifteen rows.
pub fn region_px(f: usize) -> [f64; 4] {
    let (col, row) = (f / 15, f % 15);
    let x0 = 100.0 + col as f64 * 760.0;
    let y0 = 150.0 + row as f64 * 140.0;
    [x0, y0, x0 + 600.0, y0 + 80.0]
}

/// Box in the footer band, clear of every region.
pub fn margin_px(i: usize) -> [f64; 4] {
    let x0 = 40.0 + (i % 12) as f64 * 130.0;
    [x0, 2240.0, x0 + 110.0, 2310.0]
}

/// Prediction box in pixels for an instance of `cat` on field `f`.
pub fn box_px(cat: Category, f: usize, neighbour: usize, i: usize) -> Option<[f64; 4]> {
    let [x0, y0, x1, y1] = region_px(f);
    let (w, h) = (x1 - x0, y1 - y0);
    use Category::*;
    match cat {
        Exact | WrongHit => Some([x0, y0, x1, y1]),
        Inside => Some([x0 + w / 4.0, y0 + h / 4.0, x1 - w / 4.0, y1 - h / 4.0]),
        Shifted => Some([x0, y0 + 0.75 * h, x1, y1 + 0.75 * h]),
        Margin | WrongMiss | NullMiss => Some(margin_px(i)),
        NullHit => Some(region_px(neighbour)),
        NoBox | WrongNoBox | Vacuous | Hallucinated => None,
    }
}

fn to_native(b: [f64; 4], conv: Convention) -> [f64; 4] {
    let (w, h) = (PAGE.width as f64, PAGE.height as f64);
    match conv {
        Convention::Pixels => b,
        Convention::UnitInterval => {
            let r = |v: f64| (v * 1e6).round() / 1e6;
            [r(b[0] / w), r(b[1] / h), r(b[2] / w), r(b[3] / h)]
        }
        Convention::Thousandths => {
            let r = |v: f64| (v * 100.0).round() / 100.0;
            [r(b[0] / w * 1000.0), r(b[1] / h * 1000.0), r(b[2] / w * 1000.0), r(b[3] / h * 1000.0)]
        }
    }
}

/// Fields of document `d` annotated null: three nullable fields, rotating.
pub fn null_fields(schema: &FormSchema, d: usize) -> Vec<usize> {
    let nullable: Vec<usize> = (0..schema.fields.len()).filter(|&i| schema.fields[i].nullable).collect();
    let mut out: Vec<usize> = (0..NULLS_PER_DOC)
        .map(|k| nullable[(d * NULLS_PER_DOC + k) % nullable.len()])
        .collect();
    out.sort_unstable();
    out
}

pub fn doc_id(i: usize) -> String {
    format!("ref-{i:03}")
}

#[derive(Serialize)]
struct AnnotationOut<'a> {
    doc_id: String,
    image: String,
    width: u32,
    height: u32,
    fields: Vec<AnnotationFieldOut<'a>>,
}

#[derive(Serialize)]
struct AnnotationFieldOut<'a> {
    field_id: &'a str,
    value: Option<String>,
    evidence: Vec<[f64; 4]>,
}

/// Spreads `n` items across slots: a fixed stride coprime to `n`.
fn permutation(n: usize, seed: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut stride = (n as f64 * 0.618_033_988_7) as usize + seed;
    while gcd(stride, n) != 1 {
        stride += 1;
    }
    (0..n).map(|i| (i * stride + seed) % n).collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Generated fixture: relative path to file contents.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Fixture {
    pub files: BTreeMap<PathBuf, Vec<u8>>,
}

/// 1x1 white greyscale PNG standing in for a scanned page.
pub const PLACEHOLDER_PNG: &[u8] = &[
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52,
    0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x00, 0x00, 0x00, 0x00, 0x3a, 0x7e, 0x9b,
    0x55, 0x00, 0x00, 0x00, 0x0a, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0xf8, 0x0f, 0x00, 0x01,
    0x01, 0x01, 0x00, 0xb1, 0x38, 0xf6, 0x14, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae,
    0x42, 0x60, 0x82,
];

impl Fixture {
    pub fn put(&mut self, rel: impl Into<PathBuf>, body: impl Into<Vec<u8>>) {
        self.files.insert(rel.into(), body.into());
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        for (rel, body) in &self.files {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, body)?;
        }
        Ok(())
    }

    /// Relative paths whose contents under `dir` differ from the generated
    /// ones.
    pub fn diff(&self, dir: &Path) -> Vec<PathBuf> {
        self.files
            .iter()
            .filter(|(rel, body)| std::fs::read(dir.join(rel)).ok().as_ref() != Some(*body))
            .map(|(rel, _)| rel.clone())
            .collect()
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).unwrap() + "\n").collect()
}

/// Model whose scripted responses are also written as replay files.
pub const REPLAY_MODEL: &str = "qwen3-vl-8b-ft";

pub fn build_table_fixture() -> Result<Fixture, SolveError> {
    let schema = table_schema();
    let nf = schema.fields.len();
    let test: Vec<usize> = (1..=TABLE_DOCS).collect();
    let train: Vec<usize> = (TABLE_DOCS + 1..=TABLE_DOCS + TABLE_TRAIN_DOCS).collect();
    let mut fx = Fixture::default();

    let mut annotations = Vec::new();
    for &d in test.iter().chain(&train) {
        fx.put(format!("dataset/images/{}.png", doc_id(d)), PLACEHOLDER_PNG);
        let nulls = null_fields(&schema, d);
        annotations.push(AnnotationOut {
            doc_id: doc_id(d),
            image: format!("{}.png", doc_id(d)),
            width: PAGE.width,
            height: PAGE.height,
            fields: schema
                .fields
                .iter()
                .enumerate()
                .map(|(f, spec)| {
                    let null = nulls.contains(&f);
                    AnnotationFieldOut {
                        field_id: &spec.field_id,
                        value: (!null).then(|| surfaces(spec, d, f).gt),
                        evidence: if null { vec![] } else { vec![region_px(f)] },
                    }
                })
                .collect(),
        });
    }
    let manifest = DatasetManifest {
        schema_path: "schema.toml".into(),
        annotations_path: "annotations.jsonl".into(),
        images_dir: "images".into(),
        split: Split {
            train_ids: train.iter().map(|&d| doc_id(d)).collect(),
            test_ids: test.iter().map(|&d| doc_id(d)).collect(),
        },
    };
    fx.put("dataset/schema.toml", schema.to_toml_string());
    fx.put("dataset/annotations.jsonl", jsonl(&annotations));
    fx.put("dataset/manifest.toml",
        toml::to_string(&manifest).map_err(|e| SolveError(e.to_string()))?,
    );

    let mut null_slots = Vec::new();
    let mut value_slots = Vec::new();
    for &d in &test {
        let nulls = null_fields(&schema, d);
        for f in 0..nf {
            if nulls.contains(&f) {
                null_slots.push((d, f));
            } else {
                value_slots.push((d, f));
            }
        }
    }

    let mut adapters = Vec::new();
    for (m, model) in table_models().iter().enumerate() {
        let counts = solve_counts(&model.targets, null_slots.len() + value_slots.len())?;
        let plan = plan(&counts, value_slots.len(), null_slots.len())?;
        let mut assigned: BTreeMap<(usize, usize), Category> = BTreeMap::new();
        for (slots, null) in [(&value_slots, false), (&null_slots, true)] {
            let order = permutation(slots.len(), m + 1);
            let mut cats = plan
                .sizes
                .iter()
                .filter(|(c, _)| c.gt_null() == null)
                .flat_map(|(c, n)| std::iter::repeat_n(*c, *n));
            for &i in &order {
                let cat = cats.next().ok_or_else(|| SolveError(format!("{}: plan too small", model.model_id)))?;
                assigned.insert(slots[i], cat);
            }
            if cats.next().is_some() {
                return Err(SolveError(format!("{}: plan too large", model.model_id)));
            }
        }

        let mut lines = Vec::new();
        for &d in &test {
            let nulls = null_fields(&schema, d);
            let neighbour = (0..nf).find(|f| !nulls.contains(f)).unwrap();
            let fields = schema
                .fields
                .iter()
                .enumerate()
                .map(|(f, spec)| {
                    let cat = assigned[&(d, f)];
                    let s = surfaces(spec, d, f);
                    use Category::*;
                    let value = match cat {
                        Exact | Inside | Shifted | Margin | NoBox => Some(s.correct),
                        WrongHit | WrongMiss | WrongNoBox | Hallucinated => Some(s.wrong),
                        Vacuous | NullHit | NullMiss => None,
                    };
                    RawPredictedField {
                        field_id: spec.field_id.clone(),
                        value,
                        bbox: box_px(cat, f, neighbour, d + f).map(|b| to_native(b, model.convention)),
                    }
                })
                .collect();
            lines.push(PredictionLine {
                doc_id: doc_id(d),
                model_id: model.model_id.into(),
                fields,
                raw_response: None,
                parse_failed: false,
            });
        }
        if model.model_id == REPLAY_MODEL {
            for (i, line) in lines.iter().enumerate() {
                fx.put(
                    format!("replay/{}/{}.txt", model.model_id, line.doc_id),
                    replay_text(line, i),
                );
            }
        }
        fx.put(
            format!("predictions/{}.jsonl", model.model_id),
            jsonl(&lines),
        );
        adapters.push(AdapterConfig {
            model_id: model.model_id.into(),
            regime: model.regime,
            endpoint_url: format!("replay://replay/{}", model.model_id),
            coord_convention: model.convention,
            max_retries: 0,
            backoff_base_ms: 10,
            max_parallel: 4,
            timeout_ms: 10_000,
            auth_token_env: None,
        });
    }
    fx.put("adapters.toml",
        toml::to_string(&AdaptersFile { models: adapters }).map_err(|e| SolveError(e.to_string()))?,
    );
    fx.put("run.toml",
        "manifest = \"dataset/manifest.toml\"\nadapters = \"adapters.toml\"\noutput_dir = \"out\"\n\
         iou_thresh = 0.5\niop_thresh = 0.5\nep_scope = \"document\"\nparallel = 4\n",
    );
    Ok(fx)
}

/// Raw model response carrying the same fields as `line`, in the shapes
/// models tend to produce.
fn replay_text(line: &PredictionLine, i: usize) -> String {
    let mut obj = serde_json::Map::new();
    for f in &line.fields {
        obj.insert(
            f.field_id.clone(),
            serde_json::json!({ "value": f.value, "box": f.bbox }),
        );
    }
    let body = serde_json::to_string_pretty(&serde_json::Value::Object(obj)).unwrap();
    match i % 3 {
        0 => format!("```json\n{body}\n```\n"),
        1 => format!("Here are the extracted fields:\n{body}\n"),
        _ => body + "\n",
    }
}

/// Checks the generated surfaces against the scorer's normaliser.
pub fn check_surfaces(schema: &FormSchema, docs: usize) -> Vec<String> {
    let mut bad = Vec::new();
    for d in 1..=docs {
        for (f, spec) in schema.fields.iter().enumerate() {
            let s = surfaces(spec, d, f);
            let lex = spec.unit_lexicon();
            if !normalized_match(Some(&s.correct), Some(&s.gt), spec.value_kind, lex) {
                bad.push(format!("{}/{}: {:?} !~ {:?}", d, spec.field_id, s.correct, s.gt));
            }
            if normalized_match(Some(&s.wrong), Some(&s.gt), spec.value_kind, lex) {
                bad.push(format!("{}/{}: {:?} ~ {:?}", d, spec.field_id, s.wrong, s.gt));
            }
        }
    }
    bad
}
