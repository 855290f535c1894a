mod common;

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use common::{perfect_response, write_dataset};
use groundeval::adapter::{
    run_model_over_split, timing_path, AdapterConfig, ModelRequest, Transport, TransportFailure,
};
use groundeval::ingest::{load_ground_truth, load_predictions, GroundTruth, PredictionLine};
use groundeval::{Convention, CoordConvention, Regime};

struct Mock {
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    seen: Mutex<Vec<String>>,
    fail: HashSet<String>,
    prose: bool,
}

impl Mock {
    fn new() -> Self {
        Self {
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            seen: Mutex::new(Vec::new()),
            fail: HashSet::new(),
            prose: false,
        }
    }
}

impl Transport for Mock {
    fn send(&self, request: &ModelRequest<'_>) -> Result<String, TransportFailure> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(2));
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        self.seen.lock().unwrap().push(request.doc_id.to_string());
        assert_eq!(request.image, request.doc_id.as_bytes());
        if self.fail.contains(request.doc_id) {
            return Err(TransportFailure::Permanent("scripted".into()));
        }
        if self.prose {
            return Ok("I cannot process this document.".into());
        }
        let d: usize = request.doc_id[1..].parse().unwrap();
        Ok(perfect_response(d))
    }
}

fn adapter(max_parallel: usize) -> AdapterConfig {
    AdapterConfig {
        model_id: "mock".into(),
        regime: Regime::ZeroShot,
        endpoint_url: "http://unused".into(),
        coord_convention: Convention::Pixels,
        max_retries: 0,
        backoff_base_ms: 1,
        max_parallel,
        timeout_ms: 1000,
        auth_token_env: None,
    }
}

fn dataset(dir: &std::path::Path) -> GroundTruth {
    // Doc ids f01..f47 are all test documents.
    load_ground_truth(write_dataset(dir, 0, 47, |_, _, _| {})).unwrap()
}

#[test]
fn full_split_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dataset(dir.path());
    let out = dir.path().join("pred.jsonl");
    let cfg = adapter(4);

    let mock = Mock::new();
    let s = run_model_over_split(&cfg, &mock, &gt, &out).unwrap();
    assert_eq!((s.total, s.queried, s.succeeded, s.failed.len()), (47, 47, 47, 0));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<PredictionLine> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 47);
    let ids: Vec<&str> = lines.iter().map(|l| l.doc_id.as_str()).collect();
    let want: Vec<String> = (1..=47).map(common::doc_id).collect();
    assert_eq!(ids, want);
    assert!(timing_path(&out).exists());

    // Interrupted after 20 documents.
    let first20: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
    std::fs::write(&out, first20).unwrap();
    let mock = Mock::new();
    let s = run_model_over_split(&cfg, &mock, &gt, &out).unwrap();
    assert_eq!((s.skipped_existing, s.queried), (20, 27));
    assert_eq!(mock.calls.load(Ordering::SeqCst), 27);
    let seen: HashSet<String> = mock.seen.lock().unwrap().iter().cloned().collect();
    assert!(!seen.contains("f20") && seen.contains("f21"));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), text);

    // Nothing left to do.
    let mock = Mock::new();
    let s = run_model_over_split(&cfg, &mock, &gt, &out).unwrap();
    assert_eq!((s.skipped_existing, s.queried), (47, 0));
    assert_eq!(mock.calls.load(Ordering::SeqCst), 0);
}

#[test]
fn output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dataset(dir.path());
    let mut outputs = Vec::new();
    for (i, width) in [1, 8].into_iter().enumerate() {
        let out = dir.path().join(format!("pred{i}.jsonl"));
        run_model_over_split(&adapter(width), &Mock::new(), &gt, &out).unwrap();
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn concurrency_stays_within_max_parallel() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dataset(dir.path());
    for width in [1, 3] {
        let mock = Mock::new();
        let out = dir.path().join(format!("p{width}.jsonl"));
        run_model_over_split(&adapter(width), &mock, &gt, &out).unwrap();
        let peak = mock.peak.load(Ordering::SeqCst);
        assert!(peak >= 1 && peak <= width, "peak {peak} with max_parallel {width}");
    }
}

#[test]
fn failed_documents_are_left_out_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dataset(dir.path());
    let out = dir.path().join("pred.jsonl");
    let mut mock = Mock::new();
    mock.fail.insert("f13".into());
    let s = run_model_over_split(&adapter(4), &mock, &gt, &out).unwrap();
    assert_eq!(s.succeeded, 46);
    assert_eq!(s.failed.len(), 1);
    assert_eq!(s.failed[0].doc_id, "f13");
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 46);
}

#[test]
fn prose_answers_become_parse_failures() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dataset(dir.path());
    let out = dir.path().join("pred.jsonl");
    let mut mock = Mock::new();
    mock.prose = true;
    run_model_over_split(&adapter(2), &mock, &gt, &out).unwrap();
    let loaded = load_predictions(&out, CoordConvention::new(Convention::Pixels), &gt.schema, &gt.test_page_dims()).unwrap();
    assert_eq!(loaded.records.len(), 47);
    for r in &loaded.records {
        assert!(r.parse_failed);
        assert!(r.fields.iter().all(|f| f.value.is_none() && f.bbox.is_none()));
        assert_eq!(r.raw_response.as_deref(), Some("I cannot process this document."));
    }
}
