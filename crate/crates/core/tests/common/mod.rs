#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

pub const SCHEMA_TOML: &str = r#"
schema_id = "mini-referral"
version = "1"

[canonical_page]
width = 1654
height = 2339

[[fields]]
field_id = "patient_name"
label = "Patient name"
value_kind = "text"
nullable = false

[[fields]]
field_id = "nhs_number"
label = "NHS number"
value_kind = "text"
nullable = false

[[fields]]
field_id = "date_of_birth"
label = "Date of birth"
value_kind = "date"
nullable = false

[[fields]]
field_id = "sex"
label = "Sex"
value_kind = "enum"
enum_values = ["male", "female", "other"]
nullable = true

[[fields]]
field_id = "referral_date"
label = "Referral date"
value_kind = "date"
nullable = false

[[fields]]
field_id = "fit_result"
label = "FIT result"
value_kind = "numeric"
unit_lexicon = ["ug/g"]
nullable = true

[[fields]]
field_id = "rectal_bleeding"
label = "Rectal bleeding"
value_kind = "boolean"
nullable = true

[[fields]]
field_id = "weight_loss"
label = "Weight loss"
value_kind = "boolean"
nullable = true

[[fields]]
field_id = "haemoglobin"
label = "Haemoglobin"
value_kind = "numeric"
unit_lexicon = ["g/l"]
nullable = true

[[fields]]
field_id = "clinical_notes"
label = "Notes"
value_kind = "text"
nullable = true
"#;

pub const FIELD_IDS: [&str; 10] = [
    "patient_name",
    "nhs_number",
    "date_of_birth",
    "sex",
    "referral_date",
    "fit_result",
    "rectal_bleeding",
    "weight_loss",
    "haemoglobin",
    "clinical_notes",
];

pub fn doc_id(i: usize) -> String {
    format!("f{i:02}")
}

pub fn region(f: usize) -> [f64; 4] {
    let y = 100.0 + f as f64 * 200.0;
    [100.0, y, 900.0, y + 100.0]
}

pub fn value(f: usize, d: usize) -> Option<String> {
    Some(match FIELD_IDS[f] {
        "patient_name" => format!("Patient {d}"),
        "nhs_number" => format!("943 476 {:04}", 5000 + d),
        "date_of_birth" => format!("19{:02}-03-0{}", 40 + d % 50, 1 + d % 9),
        "sex" => ["male", "female"][d % 2].to_string(),
        "referral_date" => format!("2024-05-{:02}", 1 + d % 28),
        "fit_result" => format!("{}.5 ug/g", 10 + d),
        "rectal_bleeding" => "yes".to_string(),
        "weight_loss" => "no".to_string(),
        "haemoglobin" => format!("{} g/l", 110 + d),
        _ => return None,
    })
}

pub fn annotation(d: usize) -> Value {
    let fields: Vec<Value> = (0..FIELD_IDS.len())
        .map(|f| {
            let v = value(f, d);
            let evidence: Vec<[f64; 4]> = if v.is_some() { vec![region(f)] } else { vec![] };
            json!({ "field_id": FIELD_IDS[f], "value": v, "evidence": evidence })
        })
        .collect();
    json!({
        "doc_id": doc_id(d),
        "image": format!("{}.png", doc_id(d)),
        "width": 1654,
        "height": 2339,
        "fields": fields,
    })
}

/// Writes a dataset with documents `1..=n_train + n_test` and returns the
/// manifest path. `edit` may alter the annotation lines and split lists.
pub fn write_dataset(
    dir: &Path,
    n_train: usize,
    n_test: usize,
    edit: impl FnOnce(&mut Vec<Value>, &mut Vec<String>, &mut Vec<String>),
) -> PathBuf {
    let mut lines: Vec<Value> = (1..=n_train + n_test).map(annotation).collect();
    let mut train: Vec<String> = (1..=n_train).map(doc_id).collect();
    let mut test: Vec<String> = (n_train + 1..=n_train + n_test).map(doc_id).collect();
    edit(&mut lines, &mut train, &mut test);

    std::fs::create_dir_all(dir.join("images")).unwrap();
    for l in &lines {
        let id = l["doc_id"].as_str().unwrap();
        std::fs::write(dir.join("images").join(format!("{id}.png")), id.as_bytes()).unwrap();
    }
    std::fs::write(dir.join("schema.toml"), SCHEMA_TOML).unwrap();
    let body: String = lines.iter().map(|l| l.to_string() + "\n").collect();
    std::fs::write(dir.join("annotations.jsonl"), body).unwrap();
    let manifest = format!(
        "schema_path = \"schema.toml\"\nannotations_path = \"annotations.jsonl\"\nimages_dir = \"images\"\n\n\
         [split]\ntrain_ids = {}\ntest_ids = {}\n",
        serde_json::to_string(&train).unwrap(),
        serde_json::to_string(&test).unwrap()
    );
    let path = dir.join("manifest.toml");
    std::fs::write(&path, manifest).unwrap();
    path
}

/// A response answering every field correctly with its exact region, in
/// pixels.
pub fn perfect_response(d: usize) -> String {
    let mut obj = serde_json::Map::new();
    for f in 0..FIELD_IDS.len() {
        let v = value(f, d);
        let b = v.as_ref().map(|_| region(f));
        obj.insert(FIELD_IDS[f].into(), json!({ "value": v, "box": b }));
    }
    Value::Object(obj).to_string()
}
