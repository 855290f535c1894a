//! Reviewer decisions written back by the audit UI, and agreement between
//! reviewers and automated judgements.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::metrics::FieldJudgement;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected,
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditDecision {
    pub doc_id: String,
    pub field_id: String,
    pub model_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer_note: Option<String>,
    pub timestamp: String,
    /// Time the reviewer spent on the field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

/// Optional first line of a decisions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub session: String,
    pub decided: usize,
    pub total: usize,
    pub complete: bool,
}

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecisionFile {
    pub header: Option<SessionHeader>,
    pub decisions: Vec<AuditDecision>,
}

pub fn parse_decisions(text: &str) -> Result<DecisionFile, ReviewError> {
    let mut out = DecisionFile::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| ReviewError::Malformed {
            line: i + 1,
            reason,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        if value.get("session").is_some() {
            if out.header.is_some() || !out.decisions.is_empty() {
                return Err(malformed("session header must be the first line".into()));
            }
            out.header = Some(serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?);
            continue;
        }
        let d: AuditDecision = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        if d.verdict == Verdict::Corrected && d.corrected_value.is_none() {
            return Err(malformed("corrected verdict without corrected_value".into()));
        }
        out.decisions.push(d);
    }
    Ok(out)
}

pub fn load_decisions(path: impl AsRef<Path>) -> Result<DecisionFile, ReviewError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ReviewError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_decisions(&text)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Agreement {
    pub decisions: usize,
    pub matched: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub corrected: usize,
    /// Reviewer accepted a value the scorer marked correct, or rejected or
    /// corrected one it marked wrong.
    pub agreeing: usize,
    pub agreement_rate: f64,
}

/// Joins decisions to judgements on (model, doc, field).
pub fn agreement(decisions: &[AuditDecision], judgements: &[FieldJudgement]) -> Agreement {
    let index: HashMap<(&str, &str, &str), &FieldJudgement> = judgements
        .iter()
        .map(|j| ((j.model_id.as_str(), j.doc_id.as_str(), j.field_id.as_str()), j))
        .collect();
    let mut a = Agreement {
        decisions: decisions.len(),
        ..Agreement::default()
    };
    for d in decisions {
        match d.verdict {
            Verdict::Accepted => a.accepted += 1,
            Verdict::Rejected => a.rejected += 1,
            Verdict::Corrected => a.corrected += 1,
        }
        let key = (d.model_id.as_str(), d.doc_id.as_str(), d.field_id.as_str());
        let Some(j) = index.get(&key) else { continue };
        a.matched += 1;
        if (d.verdict == Verdict::Accepted) == j.value_correct {
            a.agreeing += 1;
        }
    }
    if a.matched > 0 {
        a.agreement_rate = a.agreeing as f64 / a.matched as f64;
    }
    a
}
