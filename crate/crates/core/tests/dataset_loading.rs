mod common;

use common::{doc_id, write_dataset, FIELD_IDS};
use groundeval::ingest::{load_ground_truth, IngestError};

#[test]
fn five_valid_forms_load() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 2, 3, |_, _, _| {});
    let gt = load_ground_truth(&manifest).unwrap();
    assert_eq!(gt.records.len(), 5);
    assert_eq!(gt.schema.fields.len(), 10);
    let test: Vec<&str> = gt.test_records().iter().map(|r| r.doc_id.as_str()).collect();
    assert_eq!(test, ["f03", "f04", "f05"]);
    let r = gt.record("f01").unwrap();
    let ids: Vec<&str> = r.fields.iter().map(|f| f.field_id.as_str()).collect();
    assert_eq!(ids, FIELD_IDS);
    // 100 px on a 1654 px wide page.
    let b = r.fields[0].regions[0];
    assert!((b.x0() - 100.0 / 1654.0).abs() < 1e-12);
    assert!(gt.image_path(r).ends_with("images/f01.png"));
}

#[test]
fn overlapping_splits_name_the_document() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 7, 3, |_, train, test| {
        assert!(train.contains(&doc_id(7)));
        test.push(doc_id(7));
    });
    match load_ground_truth(&manifest) {
        Err(IngestError::Invalid(vs)) => {
            assert_eq!(vs.len(), 1, "{vs:?}");
            assert_eq!(vs[0].doc_id.as_deref(), Some("f07"));
            assert!(vs[0].to_string().contains("f07"));
        }
        other => panic!("expected disjointness error, got {other:?}"),
    }
}

#[test]
fn null_value_with_evidence_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 0, 3, |lines, _, _| {
        lines[1]["fields"][9]["evidence"] = serde_json::json!([[10.0, 10.0, 50.0, 50.0]]);
    });
    let Err(IngestError::Invalid(vs)) = load_ground_truth(&manifest) else {
        panic!("expected violation");
    };
    assert_eq!(vs.len(), 1);
    assert_eq!(vs[0].doc_id.as_deref(), Some("f02"));
    assert_eq!(vs[0].field_id.as_deref(), Some("clinical_notes"));
}

#[test]
fn every_violation_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 0, 4, |lines, _, test| {
        // Missing field, unknown field, value without evidence, null on a
        // required field, and a test id with no annotation.
        lines[0]["fields"].as_array_mut().unwrap().remove(2);
        lines[1]["fields"].as_array_mut().unwrap().push(serde_json::json!({
            "field_id": "shoe_size", "value": "9", "evidence": [[1, 1, 5, 5]]
        }));
        lines[2]["fields"][0]["evidence"] = serde_json::json!([]);
        lines[3]["fields"][1]["value"] = serde_json::Value::Null;
        lines[3]["fields"][1]["evidence"] = serde_json::json!([]);
        test.push("f99".into());
    });
    let Err(IngestError::Invalid(vs)) = load_ground_truth(&manifest) else {
        panic!("expected violations");
    };
    let docs: Vec<Option<&str>> = vs.iter().map(|v| v.doc_id.as_deref()).collect();
    for d in ["f01", "f02", "f03", "f04", "f99"] {
        assert!(docs.contains(&Some(d)), "{d} missing from {vs:?}");
    }
}

#[test]
fn degenerate_evidence_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 0, 2, |lines, _, _| {
        lines[0]["fields"][0]["evidence"] = serde_json::json!([[300.0, 300.0, 300.0, 400.0]]);
    });
    assert!(matches!(load_ground_truth(&manifest), Err(IngestError::Invalid(_))));
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_ground_truth(dir.path().join("nope.toml")).unwrap_err();
    assert!(!matches!(err, IngestError::Invalid(_)));
}
