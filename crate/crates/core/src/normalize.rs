//! Domain-aware value canonicalisation and the Normalised Match predicate.
//!
//! Rule order: Unicode NFKC, trim, empty-value synonyms, then the rules for
//! the field's kind. Ambiguous numeric dates resolve day-first (UK forms).
//! Two-digit years pivot at 50: `49` is 2049, `50` is 1950.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::NaiveDate;
use regex::Regex;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::schema::ValueKind;

pub const BUILTIN_RULES_VERSION: &str = "builtin-1";

const EMPTY_SYNONYMS: &[&str] = &["", "n/a", "na", "none", "nil", "-", "not applicable", "nad"];
const TRUE_SYNONYMS: &[&str] = &["yes", "y", "true", "checked", "x", "✓", "1"];
const FALSE_SYNONYMS: &[&str] = &["no", "n", "false", "unchecked", "0"];
const UNIT_ALIASES: &[(&str, &str)] = &[
    ("μg/g", "ug/g"),
    ("mcg/g", "ug/g"),
    ("micrograms/g", "ug/g"),
    ("gm/l", "g/l"),
    ("gm/dl", "g/dl"),
];

/// Synonym tables driving canonicalisation. Keys absent from a rules file
/// keep their built-in values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationRules {
    pub version: String,
    pub empty_synonyms: Vec<String>,
    pub true_synonyms: Vec<String>,
    pub false_synonyms: Vec<String>,
    /// alias spelling -> canonical unit
    pub unit_aliases: BTreeMap<String, String>,
}

impl Default for NormalizationRules {
    fn default() -> Self {
        let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            version: BUILTIN_RULES_VERSION.to_string(),
            empty_synonyms: owned(EMPTY_SYNONYMS),
            true_synonyms: owned(TRUE_SYNONYMS),
            false_synonyms: owned(FALSE_SYNONYMS),
            unit_aliases: UNIT_ALIASES
                .iter()
                .map(|(a, c)| (a.to_string(), c.to_string()))
                .collect(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("failed to read rules file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed rules file: {0}")]
    Malformed(String),
}

impl NormalizationRules {
    pub fn from_toml_str(text: &str) -> Result<Self, RulesError> {
        toml::from_str(text).map_err(|e| RulesError::Malformed(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RulesError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| RulesError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }
}

/// Canonical form of a field value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum CanonicalValue {
    Null,
    Bool(bool),
    Number {
        value: Decimal,
        unit: Option<String>,
    },
    Date(NaiveDate),
    Text(String),
}

impl CanonicalValue {
    /// Surface form that canonicalises back to `self` under the same kind.
    pub fn render(&self) -> String {
        match self {
            CanonicalValue::Null => String::new(),
            CanonicalValue::Bool(true) => "yes".into(),
            CanonicalValue::Bool(false) => "no".into(),
            CanonicalValue::Number { value, unit: None } => value.to_string(),
            CanonicalValue::Number {
                value,
                unit: Some(u),
            } => format!("{value} {u}"),
            CanonicalValue::Date(d) => d.format("%Y-%m-%d").to_string(),
            CanonicalValue::Text(t) => t.clone(),
        }
    }
}

impl fmt::Display for CanonicalValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CanonicalValue::Null => f.write_str("null"),
            other => f.write_str(&other.render()),
        }
    }
}

/// A value that could not be read under its field kind.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot read {raw:?} as {kind}")]
pub struct Unparseable {
    pub raw: String,
    pub kind: ValueKind,
}

impl Unparseable {
    /// Comparison key used when both sides fail to parse.
    pub fn key(&self) -> String {
        collapse_ws(&self.raw.trim().to_lowercase())
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_enclosing_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{00AB}' | '\u{00BB}' | '\u{2022}' | '\u{00B7}'
        )
}

/// NFKC and lower-casing, repeated to a fixed point (NFKC can reintroduce
/// upper-case letters, e.g. U+210C).
fn fold(s: &str) -> String {
    let mut cur: String = s.nfkc().collect();
    for _ in 0..4 {
        let next: String = cur.to_lowercase().nfkc().collect();
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

fn canonical_text(s: &str) -> String {
    let mut cur = collapse_ws(&fold(s));
    loop {
        let next = cur
            .trim_matches(|c: char| is_enclosing_punct(c) || c.is_whitespace())
            .to_string();
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

fn unit_key(s: &str) -> String {
    fold(s).chars().filter(|c| !c.is_whitespace()).collect()
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(?P<num>[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|[+-]?\.\d+)\s*(?P<unit>.*)$")
            .expect("valid regex")
    })
}

fn parse_month(token: &str) -> Option<u32> {
    let m = match token {
        "jan" | "january" => 1,
        "feb" | "february" => 2,
        "mar" | "march" => 3,
        "apr" | "april" => 4,
        "may" => 5,
        "jun" | "june" => 6,
        "jul" | "july" => 7,
        "aug" | "august" => 8,
        "sep" | "sept" | "september" => 9,
        "oct" | "october" => 10,
        "nov" | "november" => 11,
        "dec" | "december" => 12,
        _ => return None,
    };
    Some(m)
}

fn strip_ordinal(token: &str) -> &str {
    for suffix in ["st", "nd", "rd", "th"] {
        if let Some(head) = token.strip_suffix(suffix) {
            if !head.is_empty() && head.bytes().all(|b| b.is_ascii_digit()) {
                return head;
            }
        }
    }
    token
}

fn parse_year(token: &str) -> Option<i32> {
    if !token.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let y: i32 = token.parse().ok()?;
    match token.len() {
        2 if y < 50 => Some(2000 + y),
        2 => Some(1900 + y),
        4 => Some(y),
        _ => None,
    }
}

fn parse_small(token: &str) -> Option<u32> {
    if token.is_empty() || token.len() > 2 || !token.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    token.parse().ok()
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    let lower = s.to_lowercase();
    let tokens: Vec<&str> = lower
        .split(|c: char| c.is_whitespace() || matches!(c, '/' | '-' | '.' | ','))
        .filter(|t| !t.is_empty())
        .map(strip_ordinal)
        .collect();
    if tokens.len() != 3 {
        return None;
    }
    let (y, m, d) = match (parse_month(tokens[0]), parse_month(tokens[1])) {
        // 12 March 2024
        (None, Some(m)) => (parse_year(tokens[2])?, m, parse_small(tokens[0])?),
        // March 12, 2024
        (Some(m), None) => (parse_year(tokens[2])?, m, parse_small(tokens[1])?),
        (None, None) if tokens[0].len() == 4 => (
            parse_year(tokens[0])?,
            parse_small(tokens[1])?,
            parse_small(tokens[2])?,
        ),
        (None, None) => (
            parse_year(tokens[2])?,
            parse_small(tokens[1])?,
            parse_small(tokens[0])?,
        ),
        _ => return None,
    };
    NaiveDate::from_ymd_opt(y, m, d)
}

/// Canonicaliser bound to a rule table.
#[derive(Debug, Clone)]
pub struct Normalizer {
    rules: NormalizationRules,
    empty: Vec<String>,
    truthy: Vec<String>,
    falsy: Vec<String>,
    aliases: BTreeMap<String, String>,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::new(NormalizationRules::default())
    }
}

impl Normalizer {
    pub fn new(rules: NormalizationRules) -> Self {
        let keys = |xs: &[String]| xs.iter().map(|s| canonical_text(s)).collect::<Vec<_>>();
        let empty = rules
            .empty_synonyms
            .iter()
            .map(|s| collapse_ws(&fold(s.trim())))
            .collect();
        let aliases = rules
            .unit_aliases
            .iter()
            .map(|(a, c)| (unit_key(a), unit_key(c)))
            .collect();
        Self {
            truthy: keys(&rules.true_synonyms),
            falsy: keys(&rules.false_synonyms),
            empty,
            aliases,
            rules,
        }
    }

    pub fn rules(&self) -> &NormalizationRules {
        &self.rules
    }

    fn is_empty_synonym(&self, s: &str) -> bool {
        let key = collapse_ws(&fold(s));
        self.empty.iter().any(|e| *e == key)
    }

    pub fn canonicalize(
        &self,
        raw: Option<&str>,
        kind: ValueKind,
        unit_lexicon: Option<&[String]>,
    ) -> Result<CanonicalValue, Unparseable> {
        let Some(raw) = raw else {
            return Ok(CanonicalValue::Null);
        };
        let nfkc: String = raw.nfkc().collect();
        let trimmed = nfkc.trim();
        if self.is_empty_synonym(trimmed) {
            return Ok(CanonicalValue::Null);
        }
        let fail = || Unparseable {
            raw: raw.to_string(),
            kind,
        };
        match kind {
            ValueKind::Boolean => {
                let key = canonical_text(trimmed);
                if self.truthy.contains(&key) {
                    Ok(CanonicalValue::Bool(true))
                } else if self.falsy.contains(&key) {
                    Ok(CanonicalValue::Bool(false))
                } else {
                    Err(fail())
                }
            }
            ValueKind::Numeric => self.parse_number(trimmed, unit_lexicon).ok_or_else(fail),
            ValueKind::Date => parse_date(trimmed)
                .map(CanonicalValue::Date)
                .ok_or_else(fail),
            ValueKind::Text | ValueKind::Enum => {
                let text = canonical_text(trimmed);
                if self.is_empty_synonym(&text) {
                    Ok(CanonicalValue::Null)
                } else {
                    Ok(CanonicalValue::Text(text))
                }
            }
        }
    }

    fn parse_number(&self, s: &str, unit_lexicon: Option<&[String]>) -> Option<CanonicalValue> {
        let caps = number_re().captures(s)?;
        let digits: String = caps["num"].chars().filter(|c| *c != ',').collect();
        let mut value = Decimal::from_str(&digits).ok()?.normalize();
        if value.is_zero() {
            value.set_sign_positive(true);
        }
        let unit_raw = caps["unit"].trim();
        let unit = if unit_raw.is_empty() {
            None
        } else {
            let key = unit_key(unit_raw);
            let key = self.aliases.get(&key).cloned().unwrap_or(key);
            match unit_lexicon {
                Some(lex) if !lex.is_empty() => {
                    if !lex.iter().any(|u| unit_key(u) == key) {
                        return None;
                    }
                    Some(key)
                }
                _ => Some(key),
            }
        };
        Some(CanonicalValue::Number { value, unit })
    }

    pub fn normalized_match(
        &self,
        pred: Option<&str>,
        gt: Option<&str>,
        kind: ValueKind,
        unit_lexicon: Option<&[String]>,
    ) -> bool {
        match (
            self.canonicalize(pred, kind, unit_lexicon),
            self.canonicalize(gt, kind, unit_lexicon),
        ) {
            (Ok(a), Ok(b)) => a == b,
            (Err(a), Err(b)) => a.key() == b.key(),
            _ => false,
        }
    }
}

fn default_normalizer() -> &'static Normalizer {
    static N: OnceLock<Normalizer> = OnceLock::new();
    N.get_or_init(Normalizer::default)
}

/// [`Normalizer::canonicalize`] with the built-in rules.
pub fn canonicalize(
    raw: Option<&str>,
    kind: ValueKind,
    unit_lexicon: Option<&[String]>,
) -> Result<CanonicalValue, Unparseable> {
    default_normalizer().canonicalize(raw, kind, unit_lexicon)
}

/// [`Normalizer::normalized_match`] with the built-in rules.
pub fn normalized_match(
    pred: Option<&str>,
    gt: Option<&str>,
    kind: ValueKind,
    unit_lexicon: Option<&[String]>,
) -> bool {
    default_normalizer().normalized_match(pred, gt, kind, unit_lexicon)
}
