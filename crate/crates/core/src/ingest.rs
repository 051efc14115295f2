//! Corpus ingestion: raw conversation records to instructions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::IngestConfig;
use crate::model::Instruction;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: String,
    pub content: String,
}

/// One line of the input corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub language: Option<String>,
    #[serde(default)]
    pub toxic: Option<bool>,
    #[serde(default)]
    pub source: Option<String>,
}

impl RawRecord {
    pub fn user_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.role == "user")
    }
}

/// A predicate a record must pass to become an instruction.
pub trait RecordFilter: Send + Sync {
    fn name(&self) -> &'static str;
    fn accept(&self, record: &RawRecord) -> bool;
}

/// Drops records tagged with another language. Untagged records pass.
pub struct LanguageFilter(pub String);

impl RecordFilter for LanguageFilter {
    fn name(&self) -> &'static str {
        "language"
    }
    fn accept(&self, record: &RawRecord) -> bool {
        record
            .language
            .as_deref()
            .is_none_or(|l| l.eq_ignore_ascii_case(&self.0))
    }
}

pub struct MaxTurnsFilter(pub u32);

impl RecordFilter for MaxTurnsFilter {
    fn name(&self) -> &'static str {
        "max_turns"
    }
    fn accept(&self, record: &RawRecord) -> bool {
        record.user_turns().count() <= self.0 as usize
    }
}

pub struct ToxicFilter;

impl RecordFilter for ToxicFilter {
    fn name(&self) -> &'static str {
        "toxic"
    }
    fn accept(&self, record: &RawRecord) -> bool {
        record.toxic != Some(true)
    }
}

/// Requires a first user turn with visible text.
pub struct NonEmptyFilter;

impl RecordFilter for NonEmptyFilter {
    fn name(&self) -> &'static str {
        "empty"
    }
    fn accept(&self, record: &RawRecord) -> bool {
        !record.id.is_empty()
            && record
                .user_turns()
                .next()
                .is_some_and(|t| !t.content.trim().is_empty())
    }
}

pub fn default_filters(config: &IngestConfig) -> Vec<Box<dyn RecordFilter>> {
    let mut filters: Vec<Box<dyn RecordFilter>> = vec![Box::new(NonEmptyFilter)];
    if let Some(lang) = &config.language {
        filters.push(Box::new(LanguageFilter(lang.clone())));
    }
    filters.push(Box::new(MaxTurnsFilter(config.max_turns)));
    if config.exclude_toxic {
        filters.push(Box::new(ToxicFilter));
    }
    filters
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub lines: usize,
    pub malformed: Vec<usize>,
    pub duplicates: usize,
    pub rejected: BTreeMap<String, usize>,
    pub kept: usize,
}

#[derive(Debug, thiserror::Error)]
#[error("cannot read corpus {path}: {source}")]
pub struct IngestError {
    pub path: String,
    pub source: std::io::Error,
}

/// Reads a JSONL corpus. Unreadable lines are skipped and reported; the
/// first record wins on duplicate ids. Output is sorted by id.
pub fn ingest(
    path: &Path,
    filters: &[Box<dyn RecordFilter>],
) -> Result<(Vec<Instruction>, IngestReport), IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError {
        path: path.display().to_string(),
        source,
    })?;
    let default_source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    let mut report = IngestReport::default();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let Ok(record) = serde_json::from_str::<RawRecord>(line) else {
            report.malformed.push(i + 1);
            continue;
        };
        if let Some(f) = filters.iter().find(|f| !f.accept(&record)) {
            *report.rejected.entry(f.name().to_string()).or_default() += 1;
            continue;
        }
        if !seen.insert(record.id.clone()) {
            report.duplicates += 1;
            continue;
        }
        let turn_count = record.user_turns().count() as u32;
        let text = record
            .user_turns()
            .next()
            .map(|t| t.content.clone())
            .unwrap_or_default();
        let source = record
            .source
            .clone()
            .unwrap_or_else(|| default_source.clone());
        match Instruction::new(record.id, text, source, turn_count) {
            Ok(inst) => out.push(inst),
            Err(_) => *report.rejected.entry("invalid".into()).or_default() += 1,
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    report.kept = out.len();
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filters_dedup_and_sorting() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chat.jsonl");
        let lines = [
            r#"{"id":"b","turns":[{"role":"user","content":"Write a poem"},{"role":"assistant","content":"ok"}]}"#,
            r#"{"id":"a","turns":[{"role":"user","content":"Hola"}],"language":"es"}"#,
            r#"{"id":"c","turns":[{"role":"user","content":"Insult me"}],"toxic":true}"#,
            r#"not json"#,
            r#"{"id":"d","turns":[{"role":"user","content":"1"},{"role":"user","content":"2"},{"role":"user","content":"3"}]}"#,
            r#"{"id":"b","turns":[{"role":"user","content":"dup"}]}"#,
            r#"{"id":"e","turns":[{"role":"user","content":"   "}]}"#,
            r#"{"id":"0","turns":[{"role":"user","content":"Sum 2+2"}],"language":"EN","source":"mt"}"#,
        ];
        fs::write(&path, lines.join("\n")).unwrap();
        let (out, report) = ingest(&path, &default_filters(&IngestConfig::default())).unwrap();
        let ids: Vec<&str> = out.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, ["0", "b"]);
        assert_eq!(out[1].source, "chat");
        assert_eq!(out[0].source, "mt");
        assert_eq!(report.malformed, vec![4]);
        assert_eq!(report.duplicates, 1);
        assert_eq!(report.rejected["language"], 1);
        assert_eq!(report.rejected["toxic"], 1);
        assert_eq!(report.rejected["max_turns"], 1);
        assert_eq!(report.rejected["empty"], 1);
        assert_eq!(report.kept, 2);
    }
}
