//! Ground-truth datasets, prediction files, and recovery of grounded JSON
//! from raw model text.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::geometry::{
    exceeds_declared_range, to_canonical, BBox, CanonicalBox, Convention, CoordConvention,
};
use crate::schema::{check_record_fields, load_schema, FormSchema, PageSize, SchemaError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    #[serde(default)]
    pub train_ids: Vec<String>,
    #[serde(default)]
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_path: PathBuf,
    pub annotations_path: PathBuf,
    pub images_dir: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationField {
    pub field_id: String,
    pub gt_value: Option<String>,
    /// Evidence as written in the annotation file (pixels).
    pub evidence_px: Vec<[f64; 4]>,
    /// The same evidence, canonicalised.
    pub regions: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub doc_id: String,
    pub image_path: PathBuf,
    pub page: PageSize,
    /// One entry per schema field, in schema order.
    pub fields: Vec<AnnotationField>,
}

impl AnnotationRecord {
    pub fn field(&self, field_id: &str) -> Option<&AnnotationField> {
        self.fields.iter().find(|f| f.field_id == field_id)
    }

    /// Every evidence region on the document, across fields.
    pub fn all_regions(&self) -> Vec<BBox> {
        self.fields.iter().flat_map(|f| f.regions.iter().copied()).collect()
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct AnnotationLine {
    doc_id: String,
    image: PathBuf,
    width: u32,
    height: u32,
    fields: Vec<AnnotationLineField>,
}

#[derive(Debug, Deserialize, Serialize)]
struct AnnotationLineField {
    field_id: String,
    value: Option<String>,
    #[serde(default)]
    evidence: Vec<[f64; 4]>,
}

/// One problem found while validating a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetViolation {
    pub doc_id: Option<String>,
    pub field_id: Option<String>,
    pub problem: String,
}

impl fmt::Display for DatasetViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.doc_id, &self.field_id) {
            (Some(d), Some(fid)) => write!(f, "{d}/{fid}: {}", self.problem),
            (Some(d), None) => write!(f, "{d}: {}", self.problem),
            _ => f.write_str(&self.problem),
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("dataset failed validation with {} violation(s)", .0.len())]
    Invalid(Vec<DatasetViolation>),
    #[error("prediction for unknown document {doc_id:?}")]
    UnknownDocument { doc_id: String },
    #[error("prediction file mixes model ids {0:?} and {1:?}")]
    MixedModels(String, String),
}

fn read(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A validated dataset, with paths resolved against the manifest location.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub manifest: DatasetManifest,
    pub schema: FormSchema,
    pub records: Vec<AnnotationRecord>,
}

impl GroundTruth {
    pub fn record(&self, doc_id: &str) -> Option<&AnnotationRecord> {
        self.records.iter().find(|r| r.doc_id == doc_id)
    }

    /// Test-split records in manifest order.
    pub fn test_records(&self) -> Vec<&AnnotationRecord> {
        let by_id: HashMap<&str, &AnnotationRecord> =
            self.records.iter().map(|r| (r.doc_id.as_str(), r)).collect();
        self.manifest
            .split
            .test_ids
            .iter()
            .filter_map(|id| by_id.get(id.as_str()).copied())
            .collect()
    }

    pub fn test_page_dims(&self) -> BTreeMap<String, PageSize> {
        self.test_records()
            .into_iter()
            .map(|r| (r.doc_id.clone(), r.page))
            .collect()
    }

    pub fn image_path(&self, record: &AnnotationRecord) -> PathBuf {
        self.manifest.images_dir.join(&record.image_path)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, IngestError> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| IngestError::Manifest {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for p in [
        &mut manifest.schema_path,
        &mut manifest.annotations_path,
        &mut manifest.images_dir,
    ] {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(manifest)
}

fn violation(doc: Option<&str>, field: Option<&str>, problem: impl Into<String>) -> DatasetViolation {
    DatasetViolation {
        doc_id: doc.map(String::from),
        field_id: field.map(String::from),
        problem: problem.into(),
    }
}

/// Loads and validates a dataset. All violations are collected before
/// failing, so one run reports every offending record.
pub fn load_ground_truth(manifest_path: impl AsRef<Path>) -> Result<GroundTruth, IngestError> {
    let manifest = load_manifest(manifest_path)?;
    let schema = load_schema(&manifest.schema_path)?;
    let text = read(&manifest.annotations_path)?;

    let mut violations = Vec::new();
    let mut records = Vec::new();
    let mut seen_docs = HashSet::new();
    let pixels = Convention::Pixels;

    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AnnotationLine = match serde_json::from_str(line) {
            Ok(p) => p,
            Err(e) => {
                violations.push(violation(
                    None,
                    None,
                    format!("annotations line {}: {e}", lineno + 1),
                ));
                continue;
            }
        };
        let doc = parsed.doc_id.as_str();
        if !seen_docs.insert(parsed.doc_id.clone()) {
            violations.push(violation(Some(doc), None, "duplicate doc_id"));
            continue;
        }
        let page = PageSize::new(parsed.width, parsed.height);
        if !page.is_valid() {
            violations.push(violation(Some(doc), None, "page dimensions must be positive"));
            continue;
        }
        let ids: Vec<&str> = parsed.fields.iter().map(|f| f.field_id.as_str()).collect();
        for v in check_record_fields(&ids, &schema) {
            violations.push(violation(Some(doc), None, v.to_string()));
        }
        let mut by_id: HashMap<&str, &AnnotationLineField> = HashMap::new();
        for f in &parsed.fields {
            if by_id.insert(f.field_id.as_str(), f).is_some() {
                violations.push(violation(Some(doc), Some(&f.field_id), "field listed twice"));
            }
        }

        let mut fields = Vec::with_capacity(schema.fields.len());
        for spec in &schema.fields {
            let fid = spec.field_id.as_str();
            let Some(f) = by_id.get(fid) else { continue };
            match (&f.value, f.evidence.is_empty()) {
                (None, false) => violations.push(violation(
                    Some(doc),
                    Some(fid),
                    "null value must not carry evidence",
                )),
                (Some(_), true) => violations.push(violation(
                    Some(doc),
                    Some(fid),
                    "non-null value requires at least one evidence box",
                )),
                _ => {}
            }
            if f.value.is_none() && !spec.nullable {
                violations.push(violation(Some(doc), Some(fid), "field is not nullable"));
            }
            let mut regions = Vec::with_capacity(f.evidence.len());
            for raw in &f.evidence {
                match to_canonical(*raw, CoordConvention::pixels(page), page) {
                    Ok(CanonicalBox::Valid(b)) => regions.push(b),
                    _ => violations.push(violation(
                        Some(doc),
                        Some(fid),
                        format!("degenerate evidence box {raw:?}"),
                    )),
                }
                if exceeds_declared_range(*raw, CoordConvention::new(pixels), page) {
                    warn!("{doc}/{fid}: evidence {raw:?} extends past the page");
                }
            }
            fields.push(AnnotationField {
                field_id: fid.to_string(),
                gt_value: f.value.clone(),
                evidence_px: f.evidence.clone(),
                regions,
            });
        }
        records.push(AnnotationRecord {
            doc_id: parsed.doc_id,
            image_path: parsed.image,
            page,
            fields,
        });
    }

    let train: BTreeSet<&str> = manifest.split.train_ids.iter().map(String::as_str).collect();
    let test: BTreeSet<&str> = manifest.split.test_ids.iter().map(String::as_str).collect();
    for id in train.intersection(&test) {
        violations.push(violation(Some(id), None, "document appears in both train and test splits"));
    }
    for id in train.union(&test) {
        if !seen_docs.contains(*id) {
            violations.push(violation(Some(id), None, "split references a document with no annotation"));
        }
    }

    if !violations.is_empty() {
        return Err(IngestError::Invalid(violations));
    }
    Ok(GroundTruth {
        manifest,
        schema,
        records,
    })
}

/// A predicted field as it appears on disk: the box is in the model's
/// native convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPredictedField {
    pub field_id: String,
    pub value: Option<String>,
    #[serde(rename = "box")]
    pub bbox: Option<[f64; 4]>,
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub doc_id: String,
    pub model_id: String,
    pub fields: Vec<RawPredictedField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub parse_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedField {
    pub field_id: String,
    pub value: Option<String>,
    #[serde(rename = "box")]
    pub bbox: Option<BBox>,
}

/// A loaded prediction with canonical boxes, one field per schema entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub doc_id: String,
    pub model_id: String,
    pub fields: Vec<PredictedField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub parse_failed: bool,
}

impl PredictionRecord {
    /// All-null record standing in for a document the model produced nothing
    /// usable for.
    pub fn abstention(doc_id: &str, model_id: &str, schema: &FormSchema, parse_failed: bool) -> Self {
        Self {
            doc_id: doc_id.to_string(),
            model_id: model_id.to_string(),
            fields: schema
                .fields
                .iter()
                .map(|f| PredictedField {
                    field_id: f.field_id.clone(),
                    value: None,
                    bbox: None,
                })
                .collect(),
            raw_response: None,
            parse_failed,
        }
    }

    pub fn field(&self, field_id: &str) -> Option<&PredictedField> {
        self.fields.iter().find(|f| f.field_id == field_id)
    }
}

/// Fields recovered from a model response, in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub fields: Vec<RawPredictedField>,
    pub dropped_keys: Vec<String>,
    pub missing_keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unparseable model response: {reason}")]
pub struct ParseFailure {
    pub reason: String,
}

fn strip_code_fence(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let end = body.find("```").unwrap_or(body.len());
    Some(&body[..end])
}

/// End offset (exclusive) of the balanced object starting at `start`.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escape = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match (escape, b) {
                (true, _) => escape = false,
                (false, b'\\') => escape = true,
                (false, b'"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn first_json_object(text: &str) -> Option<Map<String, Value>> {
    let mut from = 0;
    while let Some(rel) = text[from..].find('{') {
        let start = from + rel;
        if let Some(end) = balanced_end(text, start) {
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text[start..end]) {
                return Some(map);
            }
        }
        from = start + 1;
    }
    None
}

fn value_to_string(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Number(n) => Some(n.to_string()),
        other => Some(other.to_string()),
    }
}

fn value_to_box(v: &Value) -> Option<[f64; 4]> {
    let arr = v.as_array()?;
    if arr.len() != 4 {
        return None;
    }
    let mut out = [0.0; 4];
    for (slot, item) in out.iter_mut().zip(arr) {
        *slot = item.as_f64()?;
    }
    Some(out)
}

fn field_entry(v: &Value) -> (Option<String>, Option<[f64; 4]>) {
    match v {
        Value::Object(obj) => {
            let value = obj.get("value").and_then(value_to_string);
            let bbox = obj
                .get("box")
                .or_else(|| obj.get("bbox"))
                .and_then(value_to_box);
            (value, bbox)
        }
        other => (value_to_string(other), None),
    }
}

/// Recovers a grounded field map from arbitrary model text. Total: every
/// input yields fields or a [`ParseFailure`].
pub fn parse_model_response(raw: &str, schema: &FormSchema) -> Result<ParsedResponse, ParseFailure> {
    let candidates = strip_code_fence(raw).into_iter().chain(std::iter::once(raw));
    let mut object = None;
    for text in candidates {
        if let Some(obj) = first_json_object(text) {
            object = Some(obj);
            break;
        }
    }
    let Some(mut object) = object else {
        return Err(ParseFailure {
            reason: "no balanced JSON object found".into(),
        });
    };

    let known: HashSet<&str> = schema.field_ids().collect();
    if !object.keys().any(|k| known.contains(k.as_str())) {
        if let Some(Value::Object(inner)) = object.get("fields").cloned() {
            object = inner;
        }
    }
    if !object.keys().any(|k| known.contains(k.as_str())) {
        return Err(ParseFailure {
            reason: "JSON object has no schema fields".into(),
        });
    }

    let dropped_keys: Vec<String> = object
        .keys()
        .filter(|k| !known.contains(k.as_str()))
        .cloned()
        .collect();
    let mut missing_keys = Vec::new();
    let fields = schema
        .fields
        .iter()
        .map(|spec| {
            let (value, bbox) = match object.get(&spec.field_id) {
                Some(v) => field_entry(v),
                None => {
                    missing_keys.push(spec.field_id.clone());
                    (None, None)
                }
            };
            RawPredictedField {
                field_id: spec.field_id.clone(),
                value,
                bbox,
            }
        })
        .collect();
    for k in &dropped_keys {
        warn!("dropping unknown key {k:?} from model response");
    }
    Ok(ParsedResponse {
        fields,
        dropped_keys,
        missing_keys,
    })
}

/// Counters for everything load_predictions repaired or skipped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub lines: usize,
    pub malformed_lines: usize,
    pub duplicate_docs: usize,
    pub degenerate_boxes: usize,
    pub out_of_range_boxes: usize,
    pub unknown_fields: usize,
    pub missing_fields: usize,
}

impl LoadStats {
    pub fn malformed_fraction(&self) -> f64 {
        if self.lines == 0 {
            0.0
        } else {
            self.malformed_lines as f64 / self.lines as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedPredictions {
    pub model_id: Option<String>,
    pub records: Vec<PredictionRecord>,
    pub stats: LoadStats,
}

/// Normalises one on-disk line against the schema and convention.
pub fn normalize_line(
    line: PredictionLine,
    conv: CoordConvention,
    schema: &FormSchema,
    page: PageSize,
    stats: &mut LoadStats,
) -> PredictionRecord {
    let mut by_id: HashMap<&str, &RawPredictedField> = HashMap::new();
    for f in &line.fields {
        if schema.field(&f.field_id).is_none() {
            stats.unknown_fields += 1;
            warn!("{}: dropping unknown field {:?}", line.doc_id, f.field_id);
            continue;
        }
        by_id.entry(f.field_id.as_str()).or_insert(f);
    }
    let fields = schema
        .fields
        .iter()
        .map(|spec| {
            let Some(f) = by_id.get(spec.field_id.as_str()).filter(|_| !line.parse_failed) else {
                if !line.parse_failed {
                    stats.missing_fields += 1;
                }
                return PredictedField {
                    field_id: spec.field_id.clone(),
                    value: None,
                    bbox: None,
                };
            };
            let bbox = f.bbox.and_then(|raw| {
                if exceeds_declared_range(raw, conv, page) {
                    stats.out_of_range_boxes += 1;
                    warn!(
                        "{}/{}: box {raw:?} outside the declared {} range",
                        line.doc_id, spec.field_id, conv.tag
                    );
                }
                match to_canonical(raw, conv, page) {
                    Ok(CanonicalBox::Valid(b)) => Some(b),
                    _ => {
                        stats.degenerate_boxes += 1;
                        warn!(
                            "{}/{}: degenerate box {raw:?} treated as absent",
                            line.doc_id, spec.field_id
                        );
                        None
                    }
                }
            });
            PredictedField {
                field_id: spec.field_id.clone(),
                value: f.value.clone(),
                bbox,
            }
        })
        .collect();
    PredictionRecord {
        doc_id: line.doc_id,
        model_id: line.model_id,
        fields,
        raw_response: line.raw_response,
        parse_failed: line.parse_failed,
    }
}

/// Loads a line-delimited prediction file. Malformed lines are skipped and
/// counted; a record naming a document outside `page_dims_by_doc` is an
/// error.
pub fn load_predictions(
    path: impl AsRef<Path>,
    conv: CoordConvention,
    schema: &FormSchema,
    page_dims_by_doc: &BTreeMap<String, PageSize>,
) -> Result<LoadedPredictions, IngestError> {
    let text = read(path.as_ref())?;
    let mut stats = LoadStats::default();
    let mut records = Vec::new();
    let mut model_id: Option<String> = None;
    let mut seen = HashSet::new();

    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        let parsed: PredictionLine = match serde_json::from_str(line) {
            Ok(p) => p,
            Err(e) => {
                stats.malformed_lines += 1;
                warn!("{}:{}: skipping malformed line: {e}", path.as_ref().display(), lineno + 1);
                continue;
            }
        };
        let Some(page) = page_dims_by_doc.get(&parsed.doc_id).copied() else {
            return Err(IngestError::UnknownDocument {
                doc_id: parsed.doc_id,
            });
        };
        match &model_id {
            None => model_id = Some(parsed.model_id.clone()),
            Some(m) if *m != parsed.model_id => {
                return Err(IngestError::MixedModels(m.clone(), parsed.model_id))
            }
            _ => {}
        }
        if !seen.insert(parsed.doc_id.clone()) {
            stats.duplicate_docs += 1;
            warn!("{}: duplicate prediction ignored", parsed.doc_id);
            continue;
        }
        records.push(normalize_line(parsed, conv, schema, page, &mut stats));
    }
    Ok(LoadedPredictions {
        model_id,
        records,
        stats,
    })
}
