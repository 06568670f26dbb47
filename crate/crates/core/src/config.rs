//! Line-oriented config documents: `[section]` headers and `key = value` entries.
//!
//! Coefficient values are double-quoted expressions; lists are comma separated.
//! `#` starts a comment outside of quotes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub value: String,
    pub quoted: bool,
    pub line: usize,
    /// 1-based column of the first character of `value`.
    pub column: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigDoc {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

pub const SECTIONS: [&str; 8] = [
    "model",
    "levy",
    "controls",
    "grid",
    "monotonicity",
    "solver",
    "verify",
    "simulate",
];

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<ConfigDoc> {
        let mut doc = ConfigDoc::default();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = strip_comment(raw);
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(line_no, "unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::config(line_no, format!("unknown section [{name}]")));
                }
                doc.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let section = current
                .as_ref()
                .ok_or_else(|| Error::config(line_no, "entry outside of a section"))?;
            let eq = line
                .find('=')
                .ok_or_else(|| Error::config(line_no, "expected 'key = value'"))?;
            let key = line[..eq].trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::config(line_no, format!("invalid key '{key}'")));
            }
            let after = &line[eq + 1..];
            let lead = after.len() - after.trim_start().len();
            let value_text = after.trim();
            let value_col = line[..eq + 1 + lead].chars().count() + 1;
            let (value, quoted, column) = if let Some(inner) = value_text.strip_prefix('"') {
                let inner = inner
                    .strip_suffix('"')
                    .ok_or_else(|| Error::config(line_no, "unterminated string"))?;
                (inner.to_string(), true, value_col + 1)
            } else {
                (value_text.to_string(), false, value_col)
            };
            let entries = doc.sections.get_mut(section).expect("section exists");
            if entries.contains_key(key) {
                return Err(Error::config(line_no, format!("duplicate key '{key}'")));
            }
            entries.insert(
                key.to_string(),
                Entry {
                    value,
                    quoted,
                    line: line_no,
                    column,
                },
            );
        }
        Ok(doc)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section)?.get(key)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections.entry(section.to_string()).or_default().insert(
            key.to_string(),
            Entry {
                value: value.into(),
                quoted: false,
                line: 0,
                column: 0,
            },
        );
    }

    pub fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        match self.entry(section, key) {
            None => Ok(default),
            Some(e) => parse_f64(e),
        }
    }

    pub fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        match self.entry(section, key) {
            None => Ok(default),
            Some(e) => e
                .value
                .parse()
                .map_err(|_| Error::config(e.line, format!("'{}' is not a non-negative integer", e.value))),
        }
    }

    pub fn require_f64(&self, section: &str, key: &str) -> Result<f64> {
        let e = self
            .entry(section, key)
            .ok_or_else(|| Error::config(0, format!("missing [{section}] {key}")))?;
        parse_f64(e)
    }

    pub fn list_or(&self, section: &str, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.entry(section, key) {
            None => Ok(default.to_vec()),
            Some(e) if e.value.trim().is_empty() => Ok(Vec::new()),
            Some(e) => e
                .value
                .split(',')
                .map(|s| {
                    let s = s.trim();
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::config(e.line, format!("'{s}' is not a number")))
                })
                .collect(),
        }
    }

    /// Canonical text: sections and keys sorted, values normalized.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            out.push('[');
            out.push_str(name);
            out.push_str("]\n");
            for (key, e) in entries {
                out.push_str(key);
                out.push_str(" = ");
                if e.quoted {
                    out.push('"');
                    out.push_str(e.value.trim());
                    out.push('"');
                } else {
                    out.push_str(&canonical_list(&e.value));
                }
                out.push('\n');
            }
        }
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let hash = Sha256::digest(self.canonical().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_f64(e: &Entry) -> Result<f64> {
    e.value
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::config(e.line, format!("'{}' is not a number", e.value)))
}

fn canonical_list(value: &str) -> String {
    value
        .split(',')
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(", ")
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
# comment
[model]
b = "u + v"   # drift
phi = "x*x"

[levy]
atoms = -1, 1
intensities = 0.5,0.5
"#;

    #[test]
    fn parses_sections_and_positions() {
        let doc = ConfigDoc::parse(SAMPLE).unwrap();
        let b = doc.entry("model", "b").unwrap();
        assert_eq!(b.value, "u + v");
        assert!(b.quoted);
        assert_eq!((b.line, b.column), (4, 6));
        assert_eq!(doc.list_or("levy", "atoms", &[]).unwrap(), vec![-1.0, 1.0]);
    }

    #[test]
    fn digest_ignores_layout() {
        let a = ConfigDoc::parse(SAMPLE).unwrap();
        let b = ConfigDoc::parse("[levy]\nintensities = 0.5, 0.5\natoms=-1,1\n[model]\nphi=\"x*x\"\nb = \"u + v\"\n").unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(ConfigDoc::parse("b = 1"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(ConfigDoc::parse("[model]\nb 1"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(ConfigDoc::parse("[nope]"), Err(Error::Config { .. })));
        assert!(matches!(ConfigDoc::parse("[model]\nb = \"x"), Err(Error::Config { .. })));
    }
}
