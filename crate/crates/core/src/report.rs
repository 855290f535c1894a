//! Leaderboards, scatter exports and per-document audit packets.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::AnnotationRecord;
use crate::metrics::{FailureMode, FieldJudgement, ModelScore, Regime, ScoringConfig};
use crate::schema::{FormSchema, PageSize};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportError {
    #[error("no scores to report")]
    Empty,
    #[error("{doc_id}: judgements do not match the schema: {reason}")]
    FieldMismatch { doc_id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeaderboardFormat {
    Markdown,
    Csv,
}

/// Evaluation settings printed under every leaderboard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFooter {
    pub scoring: ScoringConfig,
    pub rules_version: String,
    /// model_id -> prompt hash
    pub prompt_hashes: BTreeMap<String, String>,
}

/// Leaderboard row order: regime group, then strict safety, reading
/// accuracy (both descending) and model id.
pub fn leaderboard_order(scores: &[ModelScore]) -> Vec<&ModelScore> {
    let mut rows: Vec<&ModelScore> = scores.iter().collect();
    rows.sort_by(|a, b| {
        a.regime
            .cmp(&b.regime)
            .then_with(|| b.strict_safety.total_cmp(&a.strict_safety))
            .then_with(|| b.reading_acc.total_cmp(&a.reading_acc))
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    Reading,
    Evidence,
    Coverage,
    Strict,
    Audit,
}

const COLUMNS: [Column; 5] = [
    Column::Reading,
    Column::Evidence,
    Column::Coverage,
    Column::Strict,
    Column::Audit,
];

impl Column {
    fn header(self) -> &'static str {
        match self {
            Column::Reading => "Reading Acc.",
            Column::Evidence => "Evidence Precision",
            Column::Coverage => "Coverage",
            Column::Strict => "Strict Safety",
            Column::Audit => "Audit Precision",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Column::Reading => "reading_acc",
            Column::Evidence => "evidence_precision",
            Column::Coverage => "bbox_coverage",
            Column::Strict => "strict_safety",
            Column::Audit => "audit_precision",
        }
    }

    fn raw(self, s: &ModelScore) -> f64 {
        match self {
            Column::Reading => s.reading_acc,
            Column::Evidence => s.evidence_precision,
            Column::Coverage => s.bbox_coverage,
            Column::Strict => s.strict_safety,
            Column::Audit => s.audit_precision,
        }
    }

    /// `None` where the metric is undefined for the model.
    fn value(self, s: &ModelScore) -> Option<f64> {
        match self {
            Column::Evidence if !s.has_boxes => None,
            other => Some(other.raw(s)),
        }
    }

    fn shown(self, s: &ModelScore) -> Option<f64> {
        match self {
            Column::Audit if !s.has_boxes => None,
            other => other.value(s),
        }
    }
}

/// Dense rank (1 = best) of each row's value in `col`.
fn ranks(rows: &[&ModelScore], col: Column) -> Vec<Option<usize>> {
    let mut distinct: Vec<f64> = rows.iter().filter_map(|s| col.value(s)).collect();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    rows.iter()
        .map(|s| {
            col.value(s).map(|v| {
                distinct
                    .iter()
                    .position(|d| d.total_cmp(&v) == Ordering::Equal)
                    .expect("value present")
                    + 1
            })
        })
        .collect()
}

pub fn percent(v: f64) -> String {
    format!("{:.1}%", v * 100.0)
}

pub fn render_leaderboard(
    scores: &[ModelScore],
    format: LeaderboardFormat,
    footer: &ReportFooter,
) -> Result<String, ReportError> {
    if scores.is_empty() {
        return Err(ReportError::Empty);
    }
    let rows = leaderboard_order(scores);
    let rank_table: Vec<Vec<Option<usize>>> = COLUMNS.iter().map(|c| ranks(&rows, *c)).collect();
    Ok(match format {
        LeaderboardFormat::Markdown => markdown(&rows, &rank_table, footer),
        LeaderboardFormat::Csv => csv(&rows, &rank_table),
    })
}

fn markdown(rows: &[&ModelScore], rank_table: &[Vec<Option<usize>>], footer: &ReportFooter) -> String {
    let mut out = String::from("| Model | Regime |");
    for c in COLUMNS {
        let _ = write!(out, " {} |", c.header());
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---:|".repeat(COLUMNS.len()));
    out.push('\n');
    for (i, s) in rows.iter().enumerate() {
        let _ = write!(out, "| {} | {} |", s.model_id, s.regime);
        for (ci, c) in COLUMNS.iter().enumerate() {
            let cell = match (c.shown(s), rank_table[ci][i]) {
                (None, _) => "---".to_string(),
                (Some(v), Some(1)) => format!("**{}**", percent(v)),
                (Some(v), Some(2)) => format!("*{}*", percent(v)),
                (Some(v), _) => percent(v),
            };
            let _ = write!(out, " {cell} |");
        }
        out.push('\n');
    }
    let cfg = &footer.scoring;
    let _ = write!(
        out,
        "\nBold = best per column; italics = second best; `---` = model emitted no boxes.\n\n\
         Strict Safety: value match and IoU > {}. Audit Precision: value match and IoP > {}. \
         Evidence Precision scope: {}. Normalization rules: {}.\n",
        cfg.iou_thresh, cfg.iop_thresh, cfg.ep_scope, footer.rules_version
    );
    if !footer.prompt_hashes.is_empty() {
        out.push_str("\nPrompt hashes:");
        for (model, hash) in &footer.prompt_hashes {
            let _ = write!(out, " {model}={hash}");
        }
        out.push('\n');
    }
    out
}

fn csv(rows: &[&ModelScore], rank_table: &[Vec<Option<usize>>]) -> String {
    let mut out = String::from("model_id,regime,n_fields");
    for c in COLUMNS {
        let _ = write!(out, ",{0},{0}_rank", c.key());
    }
    out.push_str(",confident_mislocalisation\n");
    for (i, s) in rows.iter().enumerate() {
        let _ = write!(out, "{},{},{}", s.model_id, s.regime.slug(), s.n_fields);
        for (ci, c) in COLUMNS.iter().enumerate() {
            match (c.value(s), rank_table[ci][i]) {
                (Some(v), Some(r)) => {
                    let _ = write!(out, ",{v},{r}");
                }
                _ => out.push_str(",,"),
            }
        }
        let _ = writeln!(out, ",{}", s.confident_mislocalisation);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zone {
    HighPerformance,
    LowCoverage,
    LowPrecision,
    LowBoth,
}

impl Zone {
    pub fn of(evidence_precision: f64, coverage: f64) -> Zone {
        match (evidence_precision >= 0.5, coverage >= 0.5) {
            (true, true) => Zone::HighPerformance,
            (true, false) => Zone::LowCoverage,
            (false, true) => Zone::LowPrecision,
            (false, false) => Zone::LowBoth,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Zone::HighPerformance => "high_performance",
            Zone::LowCoverage => "low_coverage",
            Zone::LowPrecision => "low_precision",
            Zone::LowBoth => "low_both",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub model_id: String,
    pub regime: Regime,
    pub evidence_precision: f64,
    pub bbox_coverage: f64,
    pub zone: Zone,
}

/// Evidence precision against coverage, one point per model.
pub fn export_scatter(scores: &[ModelScore]) -> Vec<ScatterPoint> {
    leaderboard_order(scores)
        .into_iter()
        .map(|s| ScatterPoint {
            model_id: s.model_id.clone(),
            regime: s.regime,
            evidence_precision: s.evidence_precision,
            bbox_coverage: s.bbox_coverage,
            zone: Zone::of(s.evidence_precision, s.bbox_coverage),
        })
        .collect()
}

pub fn render_scatter_csv(points: &[ScatterPoint]) -> String {
    let mut out = String::from("model_id,regime,evidence_precision,bbox_coverage,zone\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.model_id,
            p.regime.slug(),
            p.evidence_precision,
            p.bbox_coverage,
            p.zone.as_str()
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub field_id: String,
    pub label: String,
    pub gt_value: Option<String>,
    pub pred_value: Option<String>,
    pub value_correct: bool,
    /// Pixel coordinates on the source image.
    pub gt_regions: Vec<[f64; 4]>,
    pub pred_box: Option<[f64; 4]>,
    pub iou: f64,
    pub iop: f64,
    pub failure: FailureMode,
    pub needs_review: bool,
}

/// Everything a reviewer needs to check one model's output on one form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditPacket {
    pub doc_id: String,
    pub image_path: PathBuf,
    pub page: PageSize,
    pub model_id: String,
    pub prompt_hash: String,
    pub entries: Vec<AuditEntry>,
}

impl AuditPacket {
    pub fn review_count(&self) -> usize {
        self.entries.iter().filter(|e| e.needs_review).count()
    }
}

fn clamp_to_page(c: [f64; 4], page: PageSize) -> [f64; 4] {
    let (w, h) = (f64::from(page.width), f64::from(page.height));
    [c[0].clamp(0.0, w), c[1].clamp(0.0, h), c[2].clamp(0.0, w), c[3].clamp(0.0, h)]
}

pub fn build_audit_packet(
    doc: &AnnotationRecord,
    image_path: PathBuf,
    judgements: &[FieldJudgement],
    schema: &FormSchema,
    model_id: &str,
    prompt_hash: &str,
) -> Result<AuditPacket, ReportError> {
    let mismatch = |reason: String| ReportError::FieldMismatch {
        doc_id: doc.doc_id.clone(),
        reason,
    };
    if judgements.len() != schema.fields.len() {
        return Err(mismatch(format!(
            "{} judgements for {} schema fields",
            judgements.len(),
            schema.fields.len()
        )));
    }
    let mut entries = Vec::with_capacity(schema.fields.len());
    for spec in &schema.fields {
        let j = judgements
            .iter()
            .find(|j| j.field_id == spec.field_id && j.doc_id == doc.doc_id)
            .ok_or_else(|| mismatch(format!("no judgement for {:?}", spec.field_id)))?;
        let gt = doc
            .field(&spec.field_id)
            .ok_or_else(|| mismatch(format!("no annotation for {:?}", spec.field_id)))?;
        entries.push(AuditEntry {
            field_id: spec.field_id.clone(),
            label: spec.label.clone(),
            gt_value: gt.gt_value.clone(),
            pred_value: j.pred_value.clone(),
            value_correct: j.value_correct,
            gt_regions: gt
                .regions
                .iter()
                .map(|r| clamp_to_page(r.to_pixels(doc.page), doc.page))
                .collect(),
            pred_box: j.pred_box.map(|b| clamp_to_page(b.to_pixels(doc.page), doc.page)),
            iou: j.iou,
            iop: j.iop,
            failure: j.failure,
            needs_review: j.needs_review(),
        });
    }
    Ok(AuditPacket {
        doc_id: doc.doc_id.clone(),
        image_path,
        page: doc.page,
        model_id: model_id.to_string(),
        prompt_hash: prompt_hash.to_string(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ScoreCounts;

    fn score(id: &str, regime: Regime, r: f64, ep: f64, cov: f64, s: f64, a: f64) -> ModelScore {
        ModelScore {
            model_id: id.into(),
            regime,
            n_fields: 100,
            reading_acc: r,
            evidence_precision: ep,
            has_boxes: cov > 0.0,
            bbox_coverage: cov,
            strict_safety: s,
            audit_precision: a,
            failure_histogram: BTreeMap::new(),
            confident_mislocalisation: false,
            counts: ScoreCounts::default(),
        }
    }

    fn footer() -> ReportFooter {
        ReportFooter {
            scoring: ScoringConfig::default(),
            rules_version: "builtin-1".into(),
            prompt_hashes: BTreeMap::from([("a".to_string(), "0123".to_string())]),
        }
    }

    #[test]
    fn tie_on_strict_orders_by_reading_then_name() {
        let scores = vec![
            score("b", Regime::ZeroShot, 0.8, 0.5, 0.5, 0.1, 0.2),
            score("c", Regime::ZeroShot, 0.9, 0.5, 0.5, 0.1, 0.2),
            score("a", Regime::ZeroShot, 0.8, 0.5, 0.5, 0.1, 0.2),
        ];
        let ids: Vec<_> = leaderboard_order(&scores).iter().map(|s| s.model_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn single_model_gets_every_best() {
        let md = render_leaderboard(
            &[score("a", Regime::FineTuned, 0.961, 0.885, 0.9, 0.606, 0.754)],
            LeaderboardFormat::Markdown,
            &footer(),
        )
        .unwrap();
        let row = md.lines().nth(2).unwrap();
        assert_eq!(
            row,
            "| a | Fine-tuned | **96.1%** | **88.5%** | **90.0%** | **60.6%** | **75.4%** |"
        );
        assert!(md.contains("IoU > 0.5"));
        assert!(md.contains("a=0123"));
    }

    #[test]
    fn no_box_model_renders_dashes() {
        let scores = vec![
            score("a", Regime::ZeroShot, 0.623, 0.0, 0.0, 0.0, 0.0),
            score("b", Regime::ZeroShot, 0.9, 0.7, 0.6, 0.1, 0.3),
        ];
        let md = render_leaderboard(&scores, LeaderboardFormat::Markdown, &footer()).unwrap();
        let row = md.lines().find(|l| l.starts_with("| a ")).unwrap();
        assert_eq!(row, "| a | Zero-shot | *62.3%* | --- | *0.0%* | *0.0%* | --- |");
        let csv = render_leaderboard(&scores, LeaderboardFormat::Csv, &footer()).unwrap();
        let line = csv.lines().find(|l| l.starts_with("a,")).unwrap();
        assert_eq!(line, "a,zero-shot,100,0.623,2,,,0,2,0,2,0,2,false");
    }

    #[test]
    fn empty_is_error() {
        assert_eq!(
            render_leaderboard(&[], LeaderboardFormat::Csv, &footer()),
            Err(ReportError::Empty)
        );
    }

    #[test]
    fn scatter_zones() {
        assert_eq!(Zone::of(0.885, 0.95), Zone::HighPerformance);
        assert_eq!(Zone::of(0.944, 0.013), Zone::LowCoverage);
        assert_eq!(Zone::of(0.0, 0.0), Zone::LowBoth);
        assert_eq!(Zone::of(0.414, 0.819), Zone::LowPrecision);
        let pts = export_scatter(&[score("a", Regime::FineTuned, 0.9, 0.885, 0.95, 0.6, 0.7)]);
        assert_eq!(
            render_scatter_csv(&pts),
            "model_id,regime,evidence_precision,bbox_coverage,zone\na,fine-tuned,0.885,0.95,high_performance\n"
        );
    }
}
