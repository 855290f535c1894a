//! Judging a model's predictions over the test split.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::adapter::{build_prompt, prompt_hash, AdapterConfig};
use crate::ingest::{AnnotationRecord, GroundTruth, LoadStats, LoadedPredictions, PredictionRecord};
use crate::metrics::{aggregate, judge_field, FieldCase, FieldJudgement, MetricsError, ModelScore, ScoringConfig};
use crate::normalize::Normalizer;
use crate::schema::FormSchema;

#[derive(Debug, Clone)]
pub struct ModelEvaluation {
    pub model_id: String,
    pub prompt_hash: String,
    /// Test-split order, schema field order within each document.
    pub judgements: Vec<FieldJudgement>,
    pub score: ModelScore,
    pub stats: LoadStats,
    /// Test documents with no prediction line, scored as abstentions.
    pub missing_docs: Vec<String>,
}

pub fn judge_document(
    record: &AnnotationRecord,
    prediction: &PredictionRecord,
    schema: &FormSchema,
    cfg: &ScoringConfig,
    normalizer: &Normalizer,
) -> Vec<FieldJudgement> {
    let doc_regions = record.all_regions();
    schema
        .fields
        .iter()
        .map(|spec| {
            let gt = record.field(&spec.field_id);
            let pred = prediction.field(&spec.field_id);
            let case = FieldCase {
                model_id: &prediction.model_id,
                doc_id: &record.doc_id,
                field_id: &spec.field_id,
                kind: spec.value_kind,
                unit_lexicon: spec.unit_lexicon(),
                pred_value: pred.and_then(|p| p.value.as_deref()),
                pred_box: pred.and_then(|p| p.bbox),
                parse_failed: prediction.parse_failed,
                gt_value: gt.and_then(|g| g.gt_value.as_deref()),
                gt_regions: gt.map(|g| g.regions.as_slice()).unwrap_or(&[]),
                doc_regions: &doc_regions,
            };
            judge_field(&case, cfg, normalizer)
        })
        .collect()
}

/// Judges every test document. Documents without a prediction count as
/// all-null abstentions rather than being dropped.
pub fn evaluate_model(
    gt: &GroundTruth,
    adapter: &AdapterConfig,
    predictions: &LoadedPredictions,
    cfg: &ScoringConfig,
    normalizer: &Normalizer,
) -> Result<ModelEvaluation, MetricsError> {
    let model_id = adapter.model_id.as_str();
    let by_doc: HashMap<&str, &PredictionRecord> = predictions
        .records
        .iter()
        .map(|r| (r.doc_id.as_str(), r))
        .collect();
    let docs = gt.test_records();
    let missing_docs: Vec<String> = docs
        .iter()
        .filter(|d| !by_doc.contains_key(d.doc_id.as_str()))
        .map(|d| d.doc_id.clone())
        .collect();

    let judgements: Vec<FieldJudgement> = docs
        .par_iter()
        .map(|doc| match by_doc.get(doc.doc_id.as_str()) {
            Some(pred) => judge_document(doc, pred, &gt.schema, cfg, normalizer),
            None => {
                let empty = PredictionRecord::abstention(&doc.doc_id, model_id, &gt.schema, false);
                judge_document(doc, &empty, &gt.schema, cfg, normalizer)
            }
        })
        .flatten_iter()
        .collect();

    let score = aggregate(&judgements, model_id, adapter.regime, cfg)?;
    Ok(ModelEvaluation {
        model_id: model_id.to_string(),
        prompt_hash: prompt_hash(&build_prompt(&gt.schema, adapter.coord_convention)),
        judgements,
        score,
        stats: predictions.stats.clone(),
        missing_docs,
    })
}
