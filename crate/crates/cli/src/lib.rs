//! Command implementations behind the `groundeval` binary.
//!
//! Exit codes: 0 success, 1 completed with failures, 2 usage or
//! configuration error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use groundeval::adapter::{run_model_over_split, transport_for, write_atomic, AdaptersFile, RunSummary};
use groundeval::evaluate::{evaluate_model, ModelEvaluation};
use groundeval::ingest::{load_ground_truth, load_predictions, GroundTruth, IngestError, LoadStats};
use groundeval::metrics::{EpScope, FieldJudgement, ScoringConfig};
use groundeval::normalize::{NormalizationRules, Normalizer};
use groundeval::report::{
    build_audit_packet, export_scatter, render_leaderboard, render_scatter_csv, LeaderboardFormat,
    ReportFooter,
};
use groundeval::review::{agreement, load_decisions};
use groundeval::ModelScore;
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURES: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Malformed prediction lines above this fraction fail the score run.
pub const MALFORMED_LINE_LIMIT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn failed(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURES,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completed {
    pub code: i32,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub adapters: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "half")]
    pub iou_thresh: f64,
    #[serde(default = "half")]
    pub iop_thresh: f64,
    #[serde(default)]
    pub ep_scope: EpScope,
    #[serde(default = "default_parallel")]
    pub parallel: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<PathBuf>,
}

fn half() -> f64 {
    0.5
}

fn default_parallel() -> usize {
    4
}

impl RunConfig {
    /// Loads a run config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("malformed config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.adapters, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(rules) = &mut cfg.rules {
            if rules.is_relative() {
                *rules = base.join(&*rules);
            }
        }
        if cfg.parallel == 0 {
            return Err(CliError::usage("parallel must be at least 1"));
        }
        Ok(cfg)
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            iou_thresh: self.iou_thresh,
            iop_thresh: self.iop_thresh,
            ep_scope: self.ep_scope,
            ..ScoringConfig::default()
        }
    }

    pub fn rules(&self) -> Result<NormalizationRules, CliError> {
        match &self.rules {
            Some(p) => NormalizationRules::load(p).map_err(|e| CliError::usage(e.to_string())),
            None => Ok(NormalizationRules::default()),
        }
    }

    pub fn predictions_path(&self, model_id: &str) -> PathBuf {
        self.output_dir.join("predictions").join(format!("{model_id}.jsonl"))
    }
}

/// Command-line overrides for `score`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreOverrides {
    pub iou_thresh: Option<f64>,
    pub iop_thresh: Option<f64>,
    pub ep_scope: Option<EpScope>,
}

fn ground_truth(manifest: &Path) -> Result<GroundTruth, CliError> {
    load_ground_truth(manifest).map_err(|e| match e {
        IngestError::Invalid(vs) => {
            let mut msg = format!("dataset {} is invalid:", manifest.display());
            for v in vs {
                let _ = write!(msg, "\n  {v}");
            }
            CliError::failed(msg)
        }
        other => CliError::usage(other.to_string()),
    })
}

pub fn cmd_validate_dataset(manifest: &Path) -> Result<Completed, CliError> {
    match load_ground_truth(manifest) {
        Ok(gt) => {
            log::info!(
                "{}: {} documents ({} train, {} test), {} fields each",
                manifest.display(),
                gt.records.len(),
                gt.manifest.split.train_ids.len(),
                gt.manifest.split.test_ids.len(),
                gt.schema.fields.len()
            );
            Ok(Completed {
                code: EXIT_OK,
                report: String::new(),
            })
        }
        Err(IngestError::Invalid(vs)) => {
            let mut report = String::new();
            for v in &vs {
                let _ = writeln!(
                    report,
                    "{}\t{}\t{}",
                    v.doc_id.as_deref().unwrap_or("-"),
                    v.field_id.as_deref().unwrap_or("-"),
                    v.problem
                );
            }
            let _ = writeln!(report, "{} violation(s)", vs.len());
            Ok(Completed {
                code: EXIT_FAILURES,
                report,
            })
        }
        Err(e) => Err(CliError::usage(e.to_string())),
    }
}

fn load_adapters(cfg: &RunConfig) -> Result<AdaptersFile, CliError> {
    AdaptersFile::load(&cfg.adapters).map_err(|e| CliError::usage(e.to_string()))
}

pub fn cmd_run(cfg: &RunConfig, model_id: &str) -> Result<(Completed, RunSummary), CliError> {
    let adapters = load_adapters(cfg)?;
    let Some(adapter) = adapters.get(model_id) else {
        return Err(CliError::usage(format!(
            "unknown model {model_id:?}; configured: {}",
            adapters.ids().join(", ")
        )));
    };
    let gt = ground_truth(&cfg.manifest)?;
    let transport = transport_for(adapter).map_err(|e| CliError::usage(e.to_string()))?;
    let out = cfg.predictions_path(model_id);
    let summary = run_model_over_split(adapter, transport.as_ref(), &gt, &out)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let mut report = format!(
        "{}: {} documents, {} reused, {} queried, {} succeeded, {} failed -> {}\n",
        summary.model_id,
        summary.total,
        summary.skipped_existing,
        summary.queried,
        summary.succeeded,
        summary.failed.len(),
        out.display()
    );
    for f in &summary.failed {
        let _ = writeln!(report, "  failed {f}");
    }
    let code = if summary.failed.is_empty() { EXIT_OK } else { EXIT_FAILURES };
    Ok((Completed { code, report }, summary))
}

/// Settings and provenance written next to every score run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub manifest: PathBuf,
    pub scoring: ScoringConfig,
    pub rules_version: String,
    pub models: Vec<ModelMetadata>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub model_id: String,
    pub prompt_hash: String,
    pub predictions: PathBuf,
    pub load_stats: LoadStats,
    pub missing_docs: Vec<String>,
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    write_atomic(path, contents.as_bytes())
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

fn write_audit_packets(
    gt: &GroundTruth,
    eval_model: &str,
    prompt_hash: &str,
    judgements: &[FieldJudgement],
    out: &Path,
) -> Result<usize, CliError> {
    let dir = out.join("audit").join(eval_model);
    let mut by_doc: BTreeMap<&str, Vec<FieldJudgement>> = BTreeMap::new();
    for j in judgements {
        by_doc.entry(j.doc_id.as_str()).or_default().push(j.clone());
    }
    let mut written = 0;
    for doc in gt.test_records() {
        let Some(js) = by_doc.get(doc.doc_id.as_str()) else { continue };
        let packet = build_audit_packet(doc, gt.image_path(doc), js, &gt.schema, eval_model, prompt_hash)
            .map_err(|e| CliError::usage(e.to_string()))?;
        let body = serde_json::to_string_pretty(&packet).expect("serializable") + "\n";
        write_file(&dir.join(format!("{}.json", doc.doc_id)), &body)?;
        written += 1;
    }
    Ok(written)
}

/// Scores prediction files against the configured ground truth and writes
/// judgements, scores, leaderboards, scatter export and audit packets to
/// `out`.
pub fn cmd_score(
    cfg: &RunConfig,
    predictions: &[PathBuf],
    out: &Path,
    overrides: ScoreOverrides,
) -> Result<(Completed, Vec<ModelScore>), CliError> {
    if predictions.is_empty() {
        return Err(CliError::usage("no prediction files given"));
    }
    let mut scoring = cfg.scoring();
    if let Some(v) = overrides.iou_thresh {
        scoring.iou_thresh = v;
    }
    if let Some(v) = overrides.iop_thresh {
        scoring.iop_thresh = v;
    }
    if let Some(v) = overrides.ep_scope {
        scoring.ep_scope = v;
    }
    scoring.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let rules = cfg.rules()?;
    let normalizer = Normalizer::new(rules.clone());
    let adapters = load_adapters(cfg)?;
    let gt = ground_truth(&cfg.manifest)?;
    let pages = gt.test_page_dims();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel)
        .build()
        .map_err(|e| CliError::usage(e.to_string()))?;

    let mut evaluations: Vec<ModelEvaluation> = Vec::new();
    let mut metadata = Vec::new();
    let mut seen = BTreeSet::new();
    let mut over_limit = Vec::new();
    for path in predictions {
        // Peek the model id to pick the adapter's convention.
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        let model_id = text
            .lines()
            .find_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
            .and_then(|v| v.get("model_id").and_then(|m| m.as_str()).map(String::from))
            .ok_or_else(|| CliError::usage(format!("{}: no prediction records", path.display())))?;
        let adapter = adapters.get(&model_id).ok_or_else(|| {
            CliError::usage(format!(
                "{}: model {model_id:?} is not configured; configured: {}",
                path.display(),
                adapters.ids().join(", ")
            ))
        })?;
        if !seen.insert(model_id.clone()) {
            return Err(CliError::usage(format!("model {model_id:?} given twice")));
        }
        let loaded = load_predictions(path, adapter.convention(), &gt.schema, &pages)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        if loaded.records.is_empty() {
            return Err(CliError::usage(format!("{}: no valid prediction records", path.display())));
        }
        if loaded.stats.malformed_fraction() > MALFORMED_LINE_LIMIT {
            over_limit.push(format!(
                "{}: {} of {} lines malformed",
                path.display(),
                loaded.stats.malformed_lines,
                loaded.stats.lines
            ));
        }
        let evaluation = pool
            .install(|| evaluate_model(&gt, adapter, &loaded, &scoring, &normalizer))
            .map_err(|e| CliError::usage(e.to_string()))?;
        metadata.push(ModelMetadata {
            model_id: model_id.clone(),
            prompt_hash: evaluation.prompt_hash.clone(),
            predictions: path.clone(),
            load_stats: loaded.stats.clone(),
            missing_docs: evaluation.missing_docs.clone(),
        });
        evaluations.push(evaluation);
    }
    metadata.sort_by(|a, b| a.model_id.cmp(&b.model_id));

    let scores: Vec<ModelScore> = evaluations.iter().map(|e| e.score.clone()).collect();
    let footer = ReportFooter {
        scoring,
        rules_version: rules.version.clone(),
        prompt_hashes: evaluations
            .iter()
            .map(|e| (e.model_id.clone(), e.prompt_hash.clone()))
            .collect(),
    };
    let md = render_leaderboard(&scores, LeaderboardFormat::Markdown, &footer)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let csv = render_leaderboard(&scores, LeaderboardFormat::Csv, &footer)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let ordered: Vec<&ModelScore> = groundeval::report::leaderboard_order(&scores);

    write_file(&out.join("leaderboard.md"), &md)?;
    write_file(&out.join("leaderboard.csv"), &csv)?;
    write_file(&out.join("scatter.csv"), &render_scatter_csv(&export_scatter(&scores)))?;
    write_file(
        &out.join("scores.json"),
        &(serde_json::to_string_pretty(&ordered).expect("serializable") + "\n"),
    )?;
    for e in &evaluations {
        write_file(
            &out.join("judgements").join(format!("{}.jsonl", e.model_id)),
            &jsonl(&e.judgements),
        )?;
        write_audit_packets(&gt, &e.model_id, &e.prompt_hash, &e.judgements, out)?;
    }
    let meta = RunMetadata {
        manifest: cfg.manifest.clone(),
        scoring,
        rules_version: rules.version,
        models: metadata,
    };
    write_file(
        &out.join("run.json"),
        &(serde_json::to_string_pretty(&meta).expect("serializable") + "\n"),
    )?;

    let mut report = md;
    let code = if over_limit.is_empty() {
        EXIT_OK
    } else {
        report.push('\n');
        for line in &over_limit {
            let _ = writeln!(report, "too many malformed lines: {line}");
        }
        EXIT_FAILURES
    };
    Ok((Completed { code, report }, scores))
}

fn read_metadata(out: &Path) -> Result<RunMetadata, CliError> {
    let path = out.join("run.json");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        CliError::usage(format!("{}: {e}; run `score` into this directory first", path.display()))
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn read_judgements(out: &Path, model_id: &str) -> Result<Vec<FieldJudgement>, CliError> {
    let path = out.join("judgements").join(format!("{model_id}.jsonl"));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::usage(format!("{}: {e}", path.display()))))
        .collect()
}

/// Rewrites the audit packets of one scored model from the judgement dump
/// in `out`.
pub fn cmd_audit_export(model_id: &str, out: &Path, manifest: Option<&Path>) -> Result<Completed, CliError> {
    let meta = read_metadata(out)?;
    let Some(model) = meta.models.iter().find(|m| m.model_id == model_id) else {
        let ids: Vec<&str> = meta.models.iter().map(|m| m.model_id.as_str()).collect();
        return Err(CliError::usage(format!(
            "model {model_id:?} was not scored in {}; scored: {}",
            out.display(),
            ids.join(", ")
        )));
    };
    let gt = ground_truth(manifest.unwrap_or(&meta.manifest))?;
    let judgements = read_judgements(out, model_id)?;
    let n = write_audit_packets(&gt, model_id, &model.prompt_hash, &judgements, out)?;
    Ok(Completed {
        code: EXIT_OK,
        report: format!(
            "wrote {n} audit packet(s) to {}\n",
            out.join("audit").join(model_id).display()
        ),
    })
}

/// Agreement between reviewer decisions and the scorer's value verdicts.
pub fn cmd_audit_stats(out: &Path, decisions: &[PathBuf]) -> Result<Completed, CliError> {
    let meta = read_metadata(out)?;
    let mut all_judgements = Vec::new();
    for m in &meta.models {
        all_judgements.extend(read_judgements(out, &m.model_id)?);
    }
    let mut all = Vec::new();
    for path in decisions {
        let file = load_decisions(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        all.extend(file.decisions);
    }
    let stats = agreement(&all, &all_judgements);
    Ok(Completed {
        code: EXIT_OK,
        report: serde_json::to_string_pretty(&stats).expect("serializable") + "\n",
    })
}
