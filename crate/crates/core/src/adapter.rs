//! Prompt construction and the model-endpoint boundary.
//!
//! Models are reached through a [`Transport`]: HTTP for live endpoints, a
//! directory of canned responses for replay, or any test double.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use base64::Engine;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{exceeds_declared_range, to_canonical, CanonicalBox, Convention, CoordConvention};
use crate::ingest::{parse_model_response, GroundTruth, PredictionLine, RawPredictedField};
use crate::metrics::Regime;
use crate::schema::{FormSchema, ValueKind};

pub const PROMPT_VERSION: &str = "grounded-extraction-v1";
const REPLAY_SCHEME: &str = "replay://";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub model_id: String,
    pub regime: Regime,
    pub endpoint_url: String,
    pub coord_convention: Convention,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
}

fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_parallel() -> usize {
    4
}
fn default_timeout_ms() -> u64 {
    120_000
}

impl AdapterConfig {
    pub fn backoff_base(&self) -> Duration {
        Duration::from_millis(self.backoff_base_ms)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn convention(&self) -> CoordConvention {
        CoordConvention::new(self.coord_convention)
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.max_parallel == 0 {
            return Err(AdapterError::Config(format!(
                "{}: max_parallel must be at least 1",
                self.model_id
            )));
        }
        if self.model_id.is_empty() {
            return Err(AdapterError::Config("empty model_id".into()));
        }
        Ok(())
    }
}

/// Adapter config file: one `[[model]]` block per model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptersFile {
    #[serde(rename = "model")]
    pub models: Vec<AdapterConfig>,
}

impl AdaptersFile {
    /// Loads the file; relative `replay://` paths resolve against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, AdapterError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| AdapterError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut file: AdaptersFile =
            toml::from_str(&text).map_err(|e| AdapterError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut seen = HashSet::new();
        for m in &mut file.models {
            m.validate()?;
            if !seen.insert(m.model_id.clone()) {
                return Err(AdapterError::Config(format!("duplicate model_id {:?}", m.model_id)));
            }
            if let Some(rest) = m.endpoint_url.strip_prefix(REPLAY_SCHEME) {
                if Path::new(rest).is_relative() {
                    m.endpoint_url = format!("{REPLAY_SCHEME}{}", base.join(rest).display());
                }
            }
        }
        Ok(file)
    }

    pub fn get(&self, model_id: &str) -> Option<&AdapterConfig> {
        self.models.iter().find(|m| m.model_id == model_id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.models.iter().map(|m| m.model_id.as_str()).collect()
    }
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter config: {0}")]
    Config(String),
    #[error("auth token variable {0} is not set")]
    MissingAuthToken(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn kind_hint(kind: ValueKind) -> &'static str {
    match kind {
        ValueKind::Text => "text",
        ValueKind::Boolean => "yes/no",
        ValueKind::Numeric => "number",
        ValueKind::Date => "date, as written",
        ValueKind::Enum => "one of the listed options",
    }
}

/// The fixed extraction instruction for `schema`. Byte-identical for equal
/// inputs; field order follows the schema.
pub fn build_prompt(schema: &FormSchema, convention: Convention) -> String {
    let mut p = String::new();
    p.push_str(&format!(
        "Task: {PROMPT_VERSION} (schema {} version {}).\n",
        schema.schema_id, schema.version
    ));
    p.push_str(
        "Read the attached referral form image and return a single JSON object and nothing else.\n\
         The object has exactly one key per field listed below. Each key maps to an object \
         {\"value\": <string or null>, \"box\": [x0, y0, x1, y1] or null}.\n\
         Give exactly one evidence box per field: the rectangle enclosing the text or mark on the \
         form that supports the value, with (x0, y0) its top-left and (x1, y1) its bottom-right \
         corner.\n",
    );
    p.push_str(&format!(
        "Box coordinates: {}, origin at the top-left corner of the page.\n",
        convention.describe()
    ));
    p.push_str(
        "Copy values as written on the form. If a field is blank or absent, set both value and \
         box to null. If you are unsure where the evidence is, set box to null rather than \
         guessing.\n\nFields:\n",
    );
    for f in &schema.fields {
        let mut line = format!("- {} ({}", f.field_id, kind_hint(f.value_kind));
        if let Some(opts) = &f.enum_values {
            line.push_str(&format!("; options: {}", opts.join(" | ")));
        }
        if let Some(units) = &f.unit_lexicon {
            line.push_str(&format!("; units: {}", units.join(", ")));
        }
        line.push_str(if f.nullable {
            "; null when not present on the form"
        } else {
            "; always present on the form"
        });
        line.push_str(&format!("): {}\n", f.label));
        p.push_str(&line);
    }
    p
}

/// Short stable digest identifying a prompt in reports.
pub fn prompt_hash(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct ModelRequest<'a> {
    pub doc_id: &'a str,
    pub image: &'a [u8],
    pub prompt: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    /// Worth retrying: timeouts, connection resets, 5xx, 429.
    Transient(String),
    Permanent(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &ModelRequest<'_>) -> Result<String, TransportFailure>;
}

#[derive(Serialize)]
struct OutboundBody<'a> {
    image: String,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct InboundBody {
    text: String,
}

/// POST `{image, prompt}` and read back `{text}`.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(url: &str, token: Option<String>, timeout: Duration) -> Result<Self, AdapterError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| AdapterError::Config(format!("http client: {e}")))?;
        Ok(Self {
            client,
            url: url.to_string(),
            token,
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ModelRequest<'_>) -> Result<String, TransportFailure> {
        let body = OutboundBody {
            image: base64::engine::general_purpose::STANDARD.encode(request.image),
            prompt: request.prompt,
        };
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| TransportFailure::Transient(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(TransportFailure::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(TransportFailure::Permanent(format!("HTTP {status}")));
        }
        let text = resp
            .text()
            .map_err(|e| TransportFailure::Transient(e.to_string()))?;
        serde_json::from_str::<InboundBody>(&text)
            .map(|b| b.text)
            .map_err(|e| TransportFailure::Permanent(format!("response lacks a text field: {e}")))
    }
}

/// Serves `<dir>/<doc_id>.txt` as the model's answer.
pub struct ReplayTransport {
    dir: PathBuf,
}

impl ReplayTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl Transport for ReplayTransport {
    fn send(&self, request: &ModelRequest<'_>) -> Result<String, TransportFailure> {
        let path = self.dir.join(format!("{}.txt", request.doc_id));
        std::fs::read_to_string(&path)
            .map_err(|e| TransportFailure::Permanent(format!("{}: {e}", path.display())))
    }
}

/// Builds the transport an adapter config points at.
pub fn transport_for(cfg: &AdapterConfig) -> Result<Box<dyn Transport>, AdapterError> {
    if let Some(dir) = cfg.endpoint_url.strip_prefix(REPLAY_SCHEME) {
        return Ok(Box::new(ReplayTransport::new(dir)));
    }
    let token = match &cfg.auth_token_env {
        Some(var) => Some(
            std::env::var(var).map_err(|_| AdapterError::MissingAuthToken(var.clone()))?,
        ),
        None => None,
    };
    Ok(Box::new(HttpTransport::new(&cfg.endpoint_url, token, cfg.timeout())?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub text: String,
    #[serde(with = "millis")]
    pub latency: Duration,
    pub retry_count: u32,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{doc_id}: transport failed after {attempts} attempt(s): {message}")]
pub struct TransportError {
    pub doc_id: String,
    pub attempts: u32,
    pub message: String,
}

/// Sends one request, retrying transient failures with exponential backoff.
pub fn query_model(
    cfg: &AdapterConfig,
    transport: &dyn Transport,
    request: &ModelRequest<'_>,
) -> Result<QueryOutcome, TransportError> {
    let start = Instant::now();
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        match transport.send(request) {
            Ok(text) => {
                return Ok(QueryOutcome {
                    text,
                    latency: start.elapsed(),
                    retry_count: attempt - 1,
                })
            }
            Err(TransportFailure::Transient(msg)) if attempt <= cfg.max_retries => {
                let delay = cfg.backoff_base().saturating_mul(1 << (attempt - 1).min(16));
                warn!(
                    "{}: attempt {attempt} failed ({msg}); retrying in {delay:?}",
                    request.doc_id
                );
                std::thread::sleep(delay);
            }
            Err(TransportFailure::Transient(message) | TransportFailure::Permanent(message)) => {
                return Err(TransportError {
                    doc_id: request.doc_id.to_string(),
                    attempts: attempt,
                    message,
                })
            }
        }
    }
}

/// Turns model text into an on-disk prediction line. Boxes stay in the
/// adapter's convention; they are only checked here.
pub fn response_to_line(
    doc_id: &str,
    cfg: &AdapterConfig,
    schema: &FormSchema,
    page: crate::schema::PageSize,
    text: &str,
) -> PredictionLine {
    match parse_model_response(text, schema) {
        Ok(parsed) => {
            for f in &parsed.fields {
                let Some(raw) = f.bbox else { continue };
                if exceeds_declared_range(raw, cfg.convention(), page) {
                    warn!("{doc_id}/{}: box {raw:?} outside {} range", f.field_id, cfg.coord_convention);
                }
                if !matches!(to_canonical(raw, cfg.convention(), page), Ok(CanonicalBox::Valid(_))) {
                    warn!("{doc_id}/{}: degenerate box {raw:?}", f.field_id);
                }
            }
            PredictionLine {
                doc_id: doc_id.to_string(),
                model_id: cfg.model_id.clone(),
                fields: parsed.fields,
                raw_response: Some(text.to_string()),
                parse_failed: false,
            }
        }
        Err(failure) => {
            warn!("{doc_id}: {failure}");
            PredictionLine {
                doc_id: doc_id.to_string(),
                model_id: cfg.model_id.clone(),
                fields: schema
                    .fields
                    .iter()
                    .map(|f| RawPredictedField {
                        field_id: f.field_id.clone(),
                        value: None,
                        bbox: None,
                    })
                    .collect(),
                raw_response: Some(text.to_string()),
                parse_failed: true,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub doc_id: String,
    pub latency_ms: u64,
    pub retry_count: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub model_id: String,
    pub prompt_hash: String,
    pub total: usize,
    pub skipped_existing: usize,
    pub queried: usize,
    pub succeeded: usize,
    pub failed: Vec<TransportError>,
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

fn render_lines<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("serializable line"));
        out.push('\n');
    }
    out
}

pub fn timing_path(out_path: &Path) -> PathBuf {
    let mut p = out_path.as_os_str().to_owned();
    p.push(".timing");
    PathBuf::from(p)
}

fn read_existing(out_path: &Path, model_id: &str) -> BTreeMap<String, PredictionLine> {
    let Ok(text) = std::fs::read_to_string(out_path) else {
        return BTreeMap::new();
    };
    text.lines()
        .filter_map(|l| serde_json::from_str::<PredictionLine>(l).ok())
        .filter(|l| l.model_id == model_id)
        .map(|l| (l.doc_id.clone(), l))
        .collect()
}

/// Queries the model for every test-split document not already present in
/// `out_path`. The output is rewritten atomically after each document, in
/// split order; per-document latency goes to a `.timing` sidecar.
pub fn run_model_over_split(
    cfg: &AdapterConfig,
    transport: &dyn Transport,
    gt: &GroundTruth,
    out_path: &Path,
) -> Result<RunSummary, AdapterError> {
    cfg.validate()?;
    let prompt = build_prompt(&gt.schema, cfg.coord_convention);
    let docs = gt.test_records();
    let mut done = read_existing(out_path, &cfg.model_id);
    let split_ids: HashSet<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
    done.retain(|id, _| split_ids.contains(id.as_str()));
    let pending: Vec<_> = docs
        .iter()
        .filter(|d| !done.contains_key(&d.doc_id))
        .copied()
        .collect();

    let mut summary = RunSummary {
        model_id: cfg.model_id.clone(),
        prompt_hash: prompt_hash(&prompt),
        total: docs.len(),
        skipped_existing: docs.len() - pending.len(),
        queried: pending.len(),
        ..RunSummary::default()
    };
    info!(
        "{}: {} documents, {} already done",
        cfg.model_id, summary.total, summary.skipped_existing
    );

    let mut timings: BTreeMap<String, TimingRecord> = std::fs::read_to_string(timing_path(out_path))
        .unwrap_or_default()
        .lines()
        .filter_map(|l| serde_json::from_str::<TimingRecord>(l).ok())
        .map(|t| (t.doc_id.clone(), t))
        .collect();
    let order: Vec<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
    let io_err = |path: &Path, source| AdapterError::Io {
        path: path.display().to_string(),
        source,
    };

    let next = AtomicUsize::new(0);
    let workers = cfg.max_parallel.min(pending.len()).max(1);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| -> Result<(), AdapterError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending, prompt) = (&next, &pending, &prompt);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(doc) = pending.get(i) else { break };
                let result = std::fs::read(gt.image_path(doc))
                    .map_err(|e| TransportError {
                        doc_id: doc.doc_id.clone(),
                        attempts: 0,
                        message: format!("cannot read image: {e}"),
                    })
                    .and_then(|image| {
                        let request = ModelRequest {
                            doc_id: &doc.doc_id,
                            image: &image,
                            prompt,
                        };
                        query_model(cfg, transport, &request)
                    })
                    .map(|outcome| {
                        let line = response_to_line(&doc.doc_id, cfg, &gt.schema, doc.page, &outcome.text);
                        (line, outcome)
                    });
                if tx.send(result).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        for result in rx {
            match result {
                Ok((line, outcome)) => {
                    timings.insert(
                        line.doc_id.clone(),
                        TimingRecord {
                            doc_id: line.doc_id.clone(),
                            latency_ms: outcome.latency.as_millis() as u64,
                            retry_count: outcome.retry_count,
                        },
                    );
                    done.insert(line.doc_id.clone(), line);
                    summary.succeeded += 1;
                    let body = render_lines(order.iter().filter_map(|id| done.get(*id)));
                    write_atomic(out_path, body.as_bytes()).map_err(|e| io_err(out_path, e))?;
                    let tpath = timing_path(out_path);
                    let tbody = render_lines(order.iter().filter_map(|id| timings.get(*id)));
                    write_atomic(&tpath, tbody.as_bytes()).map_err(|e| io_err(&tpath, e))?;
                }
                Err(e) => {
                    warn!("{e}");
                    summary.failed.push(e);
                }
            }
        }
        Ok(())
    })?;

    if summary.succeeded == 0 && !out_path.exists() {
        write_atomic(out_path, render_lines(order.iter().filter_map(|id| done.get(*id))).as_bytes())
            .map_err(|e| io_err(out_path, e))?;
    }
    summary.failed.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    Ok(summary)
}
