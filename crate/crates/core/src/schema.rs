//! Extraction schema: the ordered field list every prompt, annotation and
//! prediction is checked against.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default canonical page, in pixels.
pub const CANONICAL_PAGE: PageSize = PageSize {
    width: 1654,
    height: 2339,
};

const BUNDLED_SCHEMA: &str = include_str!("../schemas/crc_referral.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Text,
    Boolean,
    Numeric,
    Date,
    Enum,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueKind::Text => "text",
            ValueKind::Boolean => "boolean",
            ValueKind::Numeric => "numeric",
            ValueKind::Date => "date",
            ValueKind::Enum => "enum",
        };
        f.write_str(s)
    }
}

/// Page dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PageSize {
    pub width: u32,
    pub height: u32,
}

impl PageSize {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn is_valid(&self) -> bool {
        self.width > 0 && self.height > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub field_id: String,
    pub label: String,
    pub value_kind: ValueKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_lexicon: Option<Vec<String>>,
    #[serde(default)]
    pub nullable: bool,
}

impl FieldSpec {
    pub fn unit_lexicon(&self) -> Option<&[String]> {
        self.unit_lexicon.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormSchema {
    pub schema_id: String,
    pub version: String,
    pub canonical_page: PageSize,
    pub fields: Vec<FieldSpec>,
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema file not found: {0}")]
    NotFound(String),
    #[error("failed to read schema {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed schema document: {0}")]
    Malformed(String),
    #[error("duplicate field_id {0:?}")]
    DuplicateField(String),
    #[error("field {field_id:?}: {reason}")]
    EnumViolation { field_id: String, reason: String },
    #[error("field at position {0} has an empty field_id")]
    EmptyFieldId(usize),
    #[error("canonical_page must have strictly positive dimensions")]
    InvalidPage,
    #[error("schema declares no fields")]
    NoFields,
}

/// A mismatch between a record's field ids and the schema.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "field_id", rename_all = "snake_case")]
pub enum Violation {
    Missing(String),
    Unknown(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Missing(id) => write!(f, "missing field {id:?}"),
            Violation::Unknown(id) => write!(f, "unknown field {id:?}"),
        }
    }
}

impl FormSchema {
    pub fn from_toml_str(text: &str) -> Result<Self, SchemaError> {
        let schema: FormSchema =
            toml::from_str(text).map_err(|e| SchemaError::Malformed(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    /// The example CRC referral schema shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_toml_str(BUNDLED_SCHEMA).expect("bundled schema is valid")
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if !self.canonical_page.is_valid() {
            return Err(SchemaError::InvalidPage);
        }
        if self.fields.is_empty() {
            return Err(SchemaError::NoFields);
        }
        let mut seen = HashSet::new();
        for (i, field) in self.fields.iter().enumerate() {
            if field.field_id.is_empty() {
                return Err(SchemaError::EmptyFieldId(i));
            }
            if !seen.insert(field.field_id.as_str()) {
                return Err(SchemaError::DuplicateField(field.field_id.clone()));
            }
            match (field.value_kind, &field.enum_values) {
                (ValueKind::Enum, None) => {
                    return Err(SchemaError::EnumViolation {
                        field_id: field.field_id.clone(),
                        reason: "enum field requires enum_values".into(),
                    })
                }
                (ValueKind::Enum, Some(values)) if values.is_empty() => {
                    return Err(SchemaError::EnumViolation {
                        field_id: field.field_id.clone(),
                        reason: "enum_values must be non-empty".into(),
                    })
                }
                (kind, Some(_)) if kind != ValueKind::Enum => {
                    return Err(SchemaError::EnumViolation {
                        field_id: field.field_id.clone(),
                        reason: format!("enum_values not allowed on {kind} field"),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn field(&self, field_id: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.field_id == field_id)
    }

    pub fn field_index(&self, field_id: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.field_id == field_id)
    }

    pub fn field_ids(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.field_id.as_str())
    }
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<FormSchema, SchemaError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            SchemaError::NotFound(path.display().to_string())
        } else {
            SchemaError::Io {
                path: path.display().to_string(),
                source: e,
            }
        }
    })?;
    FormSchema::from_toml_str(&text)
}

/// Missing schema fields come first in schema order, then unknown extras
/// in sorted order.
pub fn check_record_fields<S: AsRef<str>>(record_field_ids: &[S], schema: &FormSchema) -> Vec<Violation> {
    let present: BTreeSet<&str> = record_field_ids.iter().map(|s| s.as_ref()).collect();
    let known: HashSet<&str> = schema.field_ids().collect();
    let mut out: Vec<Violation> = schema
        .field_ids()
        .filter(|id| !present.contains(id))
        .map(|id| Violation::Missing(id.to_string()))
        .collect();
    out.extend(
        present
            .iter()
            .filter(|id| !known.contains(*id))
            .map(|id| Violation::Unknown(id.to_string())),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(id: &str, kind: ValueKind) -> FieldSpec {
        FieldSpec {
            field_id: id.into(),
            label: id.into(),
            value_kind: kind,
            enum_values: None,
            unit_lexicon: None,
            nullable: false,
        }
    }

    fn schema_with(fields: Vec<FieldSpec>) -> FormSchema {
        FormSchema {
            schema_id: "t".into(),
            version: "1".into(),
            canonical_page: CANONICAL_PAGE,
            fields,
        }
    }

    #[test]
    fn bundled_schema_loads() {
        let s = FormSchema::bundled();
        assert_eq!(s.canonical_page, PageSize::new(1654, 2339));
        assert!(s.fields.len() >= 10);
        assert!(s.field("fit_result").is_some());
    }

    #[test]
    fn ten_field_file_loads() {
        let mut s = FormSchema::bundled();
        s.fields.truncate(10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("schema.toml");
        std::fs::write(&path, s.to_toml_string()).unwrap();
        let loaded = load_schema(&path).unwrap();
        assert_eq!(loaded.fields.len(), 10);
        assert_eq!(loaded, s);
    }

    #[test]
    fn duplicate_field_is_named() {
        let s = schema_with(vec![
            field("fit_result", ValueKind::Numeric),
            field("fit_result", ValueKind::Text),
        ]);
        let err = FormSchema::from_toml_str(&s.to_toml_string()).unwrap_err();
        assert!(matches!(&err, SchemaError::DuplicateField(id) if id == "fit_result"));
        assert!(err.to_string().contains("fit_result"));
    }

    #[test]
    fn enum_rules() {
        let s = schema_with(vec![field("urgency", ValueKind::Enum)]);
        assert!(matches!(s.validate(), Err(SchemaError::EnumViolation { .. })));
        let mut f = field("name", ValueKind::Text);
        f.enum_values = Some(vec!["a".into()]);
        assert!(matches!(
            schema_with(vec![f]).validate(),
            Err(SchemaError::EnumViolation { .. })
        ));
        let mut f = field("urgency", ValueKind::Enum);
        f.enum_values = Some(vec![]);
        assert!(schema_with(vec![f]).validate().is_err());
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(schema_with(vec![]).validate(), Err(SchemaError::NoFields)));
        let mut s = schema_with(vec![field("a", ValueKind::Text)]);
        s.canonical_page.width = 0;
        assert!(matches!(s.validate(), Err(SchemaError::InvalidPage)));
        assert!(matches!(
            FormSchema::from_toml_str("schema_id = 3"),
            Err(SchemaError::Malformed(_))
        ));
        assert!(matches!(
            load_schema("/nonexistent/schema.toml"),
            Err(SchemaError::NotFound(_))
        ));
    }

    #[test]
    fn record_field_checks() {
        let s = FormSchema::bundled();
        let ids: Vec<&str> = s.field_ids().collect();
        assert!(check_record_fields(&ids, &s).is_empty());

        let missing: Vec<&str> = ids.iter().copied().filter(|id| *id != "fit_result").collect();
        assert_eq!(
            check_record_fields(&missing, &s),
            vec![Violation::Missing("fit_result".into())]
        );

        let mut extra = ids.clone();
        extra.push("notes");
        assert_eq!(
            check_record_fields(&extra, &s),
            vec![Violation::Unknown("notes".into())]
        );
    }

    #[test]
    fn load_is_deterministic() {
        let text = FormSchema::bundled().to_toml_string();
        assert_eq!(
            FormSchema::from_toml_str(&text).unwrap(),
            FormSchema::from_toml_str(&text).unwrap()
        );
    }
}
