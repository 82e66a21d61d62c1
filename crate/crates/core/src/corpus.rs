//! Labeled speech corpora.
//!
//! A corpus file is newline-delimited JSON, one `{"id", "text", "label"}`
//! record per line. Raw labels are collapsed into the binary
//! [`Label`] scheme through a [`LabelMap`]; a label the map does not know is
//! a hard error so records are never silently dropped.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("unknown label preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid label map: {0}")]
    InvalidLabelMap(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binary toxicity label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "toxic")]
    Toxic,
    #[serde(rename = "non-toxic")]
    NonToxic,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Toxic => "toxic",
            Label::NonToxic => "non-toxic",
        }
    }

    pub fn is_toxic(self) -> bool {
        self == Label::Toxic
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toxic" => Ok(Label::Toxic),
            "non-toxic" => Ok(Label::NonToxic),
            other => Err(CorpusError::UnknownLabel(other.to_string())),
        }
    }
}

/// One corpus record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub raw_label: String,
    pub label: Label,
}

impl Sample {
    pub fn new(id: impl Into<String>, text: impl Into<String>, raw_label: impl Into<String>, label: Label) -> Self {
        Self { id: id.into(), text: text.into(), raw_label: raw_label.into(), label }
    }
}

/// Mapping from dataset-specific raw labels to [`Label`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelMap {
    entries: BTreeMap<String, Label>,
}

impl LabelMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, raw: impl Into<String>, label: Label) -> Self {
        self.entries.insert(raw.into(), label);
        self
    }

    pub fn insert(&mut self, raw: impl Into<String>, label: Label) {
        self.entries.insert(raw.into(), label);
    }

    pub fn get(&self, raw: &str) -> Option<Label> {
        self.entries.get(raw).copied()
    }

    pub fn map(&self, raw: &str) -> Result<Label, CorpusError> {
        self.get(raw).ok_or_else(|| CorpusError::UnknownLabel(raw.to_string()))
    }

    /// Named presets, one per supported dataset family.
    ///
    /// - `binary`: already-binary files (`toxic` / `non-toxic`)
    /// - `hatexplain`: `hatespeech`, `offensive` → toxic; `normal` → non-toxic
    /// - `toxicspans`: `toxic` → toxic; `non-toxic`, `not-toxic` → non-toxic
    /// - `ihc`: `implicit_hate`, `explicit_hate` → toxic; `not_hate` → non-toxic
    pub fn preset(name: &str) -> Result<Self, CorpusError> {
        use Label::*;
        let map = match name {
            "binary" => LabelMap::new()
                .with("toxic", Toxic)
                .with("hate", Toxic)
                .with("offensive", Toxic)
                .with("non-toxic", NonToxic),
            "hatexplain" => LabelMap::new()
                .with("hatespeech", Toxic)
                .with("offensive", Toxic)
                .with("normal", NonToxic),
            "toxicspans" => LabelMap::new()
                .with("toxic", Toxic)
                .with("non-toxic", NonToxic)
                .with("not-toxic", NonToxic),
            "ihc" => LabelMap::new()
                .with("implicit_hate", Toxic)
                .with("explicit_hate", Toxic)
                .with("not_hate", NonToxic),
            other => return Err(CorpusError::UnknownPreset(other.to_string())),
        };
        Ok(map)
    }

    /// Parses a label-map document: a JSON object of raw label → `"toxic"` | `"non-toxic"`.
    pub fn from_json(json: &str) -> Result<Self, CorpusError> {
        let raw: BTreeMap<String, String> =
            serde_json::from_str(json).map_err(|e| CorpusError::InvalidLabelMap(e.to_string()))?;
        let mut map = LabelMap::new();
        for (k, v) in raw {
            let label = v
                .parse::<Label>()
                .map_err(|_| CorpusError::InvalidLabelMap(format!("{k:?} maps to {v:?}")))?;
            map.insert(k, label);
        }
        Ok(map)
    }

    pub fn from_file(path: &Path) -> Result<Self, CorpusError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    label: String,
}

/// Parses a corpus from any line-oriented reader. Blank lines are ignored.
pub fn read_corpus<R: BufRead>(reader: R, mapping: &LabelMap) -> Result<Vec<Sample>, CorpusError> {
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| CorpusError::MalformedRecord { line: line_no, reason: e.to_string() })?;
        if record.id.is_empty() {
            return Err(CorpusError::MalformedRecord { line: line_no, reason: "empty id".into() });
        }
        if record.text.trim().is_empty() {
            return Err(CorpusError::MalformedRecord { line: line_no, reason: "empty text".into() });
        }
        let label = mapping.map(&record.label)?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId(record.id));
        }
        samples.push(Sample { id: record.id, text: record.text, raw_label: record.label, label });
    }
    Ok(samples)
}

pub fn load_corpus(path: &Path, mapping: &LabelMap) -> Result<Vec<Sample>, CorpusError> {
    let file = std::fs::File::open(path)?;
    read_corpus(BufReader::new(file), mapping)
}

pub fn write_corpus<W: Write>(mut writer: W, samples: &[Sample]) -> Result<(), CorpusError> {
    for s in samples {
        let record = Record { id: s.id.clone(), text: s.text.clone(), label: s.raw_label.clone() };
        let line = serde_json::to_string(&record).expect("corpus record serializes");
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn save_corpus(path: &Path, samples: &[Sample]) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_corpus(&mut out, samples)?;
    out.flush()?;
    Ok(())
}

/// The samples labeled toxic, in their original order.
pub fn toxic_subset(samples: &[Sample]) -> Vec<Sample> {
    samples.iter().filter(|s| s.label.is_toxic()).cloned().collect()
}
