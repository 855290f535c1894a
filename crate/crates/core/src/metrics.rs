//! Field-level joint judgement and model-level aggregation.
//!
//! A field is strictly safe when its value matches and its box clears the
//! IoU threshold; it is audit-useful when the value matches and the box
//! clears the IoP threshold. Both thresholds are strict inequalities.
//! Fields whose ground truth is null count in every denominator and succeed
//! vacuously when the model also returns no value and no box.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{best_match, iou, BBox, RegionMatch};
use crate::normalize::Normalizer;
use crate::schema::ValueKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    None,
    WrongValue,
    AbstainedBox,
    HallucinatedPointing,
    Mislocalized,
    HallucinatedValue,
    MissedNull,
    ParseFailure,
}

impl FailureMode {
    pub const ALL: [FailureMode; 8] = [
        FailureMode::None,
        FailureMode::WrongValue,
        FailureMode::AbstainedBox,
        FailureMode::HallucinatedPointing,
        FailureMode::Mislocalized,
        FailureMode::HallucinatedValue,
        FailureMode::MissedNull,
        FailureMode::ParseFailure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureMode::None => "none",
            FailureMode::WrongValue => "wrong_value",
            FailureMode::AbstainedBox => "abstained_box",
            FailureMode::HallucinatedPointing => "hallucinated_pointing",
            FailureMode::Mislocalized => "mislocalized",
            FailureMode::HallucinatedValue => "hallucinated_value",
            FailureMode::MissedNull => "missed_null",
            FailureMode::ParseFailure => "parse_failure",
        }
    }
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which ground-truth regions count for Evidence Precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EpScope {
    /// Any evidence region on the same document.
    #[default]
    Document,
    /// Only the field's own regions.
    Field,
}

impl fmt::Display for EpScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EpScope::Document => "document",
            EpScope::Field => "field",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    FineTuned,
    ZeroShot,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::FineTuned => "Fine-tuned",
            Regime::ZeroShot => "Zero-shot",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Regime::FineTuned => "fine-tuned",
            Regime::ZeroShot => "zero-shot",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("{name} must lie strictly between 0 and 1, got {value}")]
    Threshold { name: &'static str, value: f64 },
    #[error("iop threshold {iop} above iou threshold {iou} would let strict success outrank audit success")]
    ThresholdOrder { iou: f64, iop: f64 },
    #[error("cannot aggregate an empty judgement set")]
    Empty,
    #[error("judgement for model {found:?} in the set for {expected:?}")]
    MixedModels { expected: String, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub iou_thresh: f64,
    pub iop_thresh: f64,
    pub ep_scope: EpScope,
    /// Coverage at or above which a near-zero strict score is flagged.
    pub mislocalisation_min_coverage: f64,
    /// Strict safety below which a high-coverage model is flagged.
    pub mislocalisation_max_strict: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            iop_thresh: 0.5,
            ep_scope: EpScope::Document,
            mislocalisation_min_coverage: 0.5,
            mislocalisation_max_strict: 0.05,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        for (name, value) in [("iou_thresh", self.iou_thresh), ("iop_thresh", self.iop_thresh)] {
            if !(value > 0.0 && value < 1.0) {
                return Err(MetricsError::Threshold { name, value });
            }
        }
        if self.iop_thresh > self.iou_thresh {
            return Err(MetricsError::ThresholdOrder {
                iou: self.iou_thresh,
                iop: self.iop_thresh,
            });
        }
        Ok(())
    }
}

/// Everything needed to judge one field of one document.
#[derive(Debug, Clone, Copy)]
pub struct FieldCase<'a> {
    pub model_id: &'a str,
    pub doc_id: &'a str,
    pub field_id: &'a str,
    pub kind: ValueKind,
    pub unit_lexicon: Option<&'a [String]>,
    pub pred_value: Option<&'a str>,
    pub pred_box: Option<BBox>,
    pub parse_failed: bool,
    pub gt_value: Option<&'a str>,
    pub gt_regions: &'a [BBox],
    pub doc_regions: &'a [BBox],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldJudgement {
    pub model_id: String,
    pub doc_id: String,
    pub field_id: String,
    pub pred_value: Option<String>,
    pub pred_box: Option<BBox>,
    pub value_correct: bool,
    pub gt_has_evidence: bool,
    pub box_present: bool,
    pub matched_region: Option<usize>,
    pub iou: f64,
    pub iop: f64,
    pub evidence_hit: bool,
    pub strict_ok: bool,
    pub audit_ok: bool,
    pub failure: FailureMode,
}

impl FieldJudgement {
    pub fn needs_review(&self) -> bool {
        self.failure != FailureMode::None
    }
}

pub fn judge_field(case: &FieldCase<'_>, cfg: &ScoringConfig, normalizer: &Normalizer) -> FieldJudgement {
    let value_correct =
        normalizer.normalized_match(case.pred_value, case.gt_value, case.kind, case.unit_lexicon);
    let hit_regions = match cfg.ep_scope {
        EpScope::Document => case.doc_regions,
        EpScope::Field => case.gt_regions,
    };
    let evidence_hit = case
        .pred_box
        .is_some_and(|b| hit_regions.iter().any(|r| iou(&b, r) > 0.0));
    let box_present = case.pred_box.is_some();
    let gt_null = case.gt_value.is_none();

    let (matched, strict_ok, audit_ok, failure) = if gt_null {
        let ok = value_correct && !box_present;
        let failure = if !value_correct {
            FailureMode::HallucinatedValue
        } else if box_present {
            FailureMode::HallucinatedPointing
        } else {
            FailureMode::None
        };
        (RegionMatch::NONE, ok, ok, failure)
    } else {
        let matched = case
            .pred_box
            .map_or(RegionMatch::NONE, |b| best_match(&b, case.gt_regions));
        let strict_ok = value_correct && matched.iou > cfg.iou_thresh;
        let audit_ok = value_correct && matched.iop > cfg.iop_thresh;
        let failure = if case.parse_failed {
            FailureMode::ParseFailure
        } else if !value_correct && case.pred_value.is_none() {
            FailureMode::MissedNull
        } else if !value_correct {
            FailureMode::WrongValue
        } else if !box_present {
            FailureMode::AbstainedBox
        } else if !evidence_hit {
            FailureMode::HallucinatedPointing
        } else if !strict_ok {
            FailureMode::Mislocalized
        } else {
            FailureMode::None
        };
        (matched, strict_ok, audit_ok, failure)
    };

    FieldJudgement {
        model_id: case.model_id.to_string(),
        doc_id: case.doc_id.to_string(),
        field_id: case.field_id.to_string(),
        pred_value: case.pred_value.map(String::from),
        pred_box: case.pred_box,
        value_correct,
        gt_has_evidence: !case.gt_regions.is_empty(),
        box_present,
        matched_region: matched.index,
        iou: matched.iou,
        iop: matched.iop,
        evidence_hit,
        strict_ok,
        audit_ok,
        failure,
    }
}

/// Raw counts behind a [`ModelScore`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreCounts {
    pub fields: usize,
    pub value_correct: usize,
    pub strict_ok: usize,
    pub audit_ok: usize,
    pub boxes: usize,
    pub evidence_hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model_id: String,
    pub regime: Regime,
    pub n_fields: usize,
    pub reading_acc: f64,
    /// Zero when the model emitted no boxes; see `has_boxes`.
    pub evidence_precision: f64,
    pub has_boxes: bool,
    pub bbox_coverage: f64,
    pub strict_safety: f64,
    pub audit_precision: f64,
    pub failure_histogram: BTreeMap<FailureMode, usize>,
    pub confident_mislocalisation: bool,
    pub counts: ScoreCounts,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged score over all field judgements of one model.
pub fn aggregate(
    judgements: &[FieldJudgement],
    model_id: &str,
    regime: Regime,
    cfg: &ScoringConfig,
) -> Result<ModelScore, MetricsError> {
    if judgements.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut counts = ScoreCounts::default();
    let mut histogram: BTreeMap<FailureMode, usize> =
        FailureMode::ALL.iter().map(|m| (*m, 0)).collect();
    for j in judgements {
        if j.model_id != model_id {
            return Err(MetricsError::MixedModels {
                expected: model_id.to_string(),
                found: j.model_id.clone(),
            });
        }
        counts.fields += 1;
        counts.value_correct += usize::from(j.value_correct);
        counts.strict_ok += usize::from(j.strict_ok);
        counts.audit_ok += usize::from(j.audit_ok);
        counts.boxes += usize::from(j.box_present);
        counts.evidence_hits += usize::from(j.evidence_hit);
        *histogram.entry(j.failure).or_default() += 1;
    }
    let n = counts.fields;
    let bbox_coverage = ratio(counts.boxes, n);
    let strict_safety = ratio(counts.strict_ok, n);
    Ok(ModelScore {
        model_id: model_id.to_string(),
        regime,
        n_fields: n,
        reading_acc: ratio(counts.value_correct, n),
        evidence_precision: ratio(counts.evidence_hits, counts.boxes),
        has_boxes: counts.boxes > 0,
        bbox_coverage,
        strict_safety,
        audit_precision: ratio(counts.audit_ok, n),
        failure_histogram: histogram,
        confident_mislocalisation: bbox_coverage >= cfg.mislocalisation_min_coverage
            && strict_safety < cfg.mislocalisation_max_strict,
        counts,
    })
}

/// Reading accuracy left unverified by strict grounding.
pub fn grounding_gap(score: &ModelScore) -> f64 {
    (score.reading_acc - score.strict_safety).clamp(0.0, 1.0)
}
