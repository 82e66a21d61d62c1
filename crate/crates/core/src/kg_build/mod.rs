//! Knowledge-graph construction from toxic samples: rationale reasoning,
//! triplet extraction with self-checking, and entity resolution.

mod parse;
mod pipeline;
mod resolve;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sample;
use crate::embedding::EmbeddingError;
use crate::llm_gateway::{GatewayError, LlmGateway, PromptRole};

pub use parse::parse_spo;
pub use pipeline::{build_triplets, process_sample, BuildConfig, BuildOutput, BuildReport, SampleOutcome};
pub use resolve::{meets_threshold, resolve, resolve_counts, ClusterMap, ElementKind, SIMILARITY_EPSILON};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("sample {0:?} is not labeled toxic")]
    NotToxic(String),
    #[error("empty rationale for sample {0:?}")]
    EmptyRationale(String),
    #[error("no canonical name for {0:?}")]
    UnmappedElement(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub sample_id: String,
    pub text: String,
}

/// One line of extraction output, with its parse when it has SPO shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTriplet {
    pub sample_id: String,
    pub raw: String,
    pub parsed: Option<(String, String, String)>,
}

impl RawTriplet {
    pub fn new(sample_id: impl Into<String>, raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let parsed = parse_spo(&raw);
        Self { sample_id: sample_id.into(), raw, parsed }
    }
}

/// A canonical (subject, predicate, object) fact.
///
/// `count` is the number of extracted occurrences folded into this value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub count: u64,
    pub sources: BTreeSet<String>,
}

impl Triplet {
    pub fn new(subject: impl Into<String>, predicate: impl Into<String>, object: impl Into<String>) -> Self {
        Self { subject: subject.into(), predicate: predicate.into(), object: object.into(), count: 1, sources: BTreeSet::new() }
    }

    pub fn with_source(mut self, id: impl Into<String>) -> Self {
        self.sources.insert(id.into());
        self
    }

    pub fn key(&self) -> (&str, &str, &str) {
        (&self.subject, &self.predicate, &self.object)
    }

    /// `(s, p, o)` as written in prompts.
    pub fn spo_string(&self) -> String {
        format!("({}, {}, {})", self.subject, self.predicate, self.object)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Rationale,
    Extraction,
    FormatCheck,
    SelfCheck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub sample_id: String,
    pub stage: Stage,
    pub disposition: String,
    pub payload: String,
}

impl AuditEvent {
    pub fn new(sample_id: &str, stage: Stage, disposition: &str, payload: impl Into<String>) -> Self {
        Self { sample_id: sample_id.to_string(), stage, disposition: disposition.to_string(), payload: payload.into() }
    }
}

pub fn reason_rationale(sample: &Sample, gw: &LlmGateway) -> Result<Rationale, BuildError> {
    if !sample.label.is_toxic() {
        return Err(BuildError::NotToxic(sample.id.clone()));
    }
    let out = gw.complete_role(PromptRole::Rationale, &BTreeMap::from([("text", sample.text.as_str())]))?;
    let text = out.trim();
    let text = text.strip_prefix("Rationale:").map(str::trim).unwrap_or(text);
    if text.is_empty() {
        return Err(BuildError::EmptyRationale(sample.id.clone()));
    }
    Ok(Rationale { sample_id: sample.id.clone(), text: text.to_string() })
}

pub fn extract_triplets(sample: &Sample, rationale: &Rationale, gw: &LlmGateway) -> Result<Vec<RawTriplet>, BuildError> {
    debug_assert_eq!(rationale.sample_id, sample.id);
    let bindings = BTreeMap::from([("text", sample.text.as_str()), ("rationale", rationale.text.as_str())]);
    let out = gw.complete_role(PromptRole::TripletExtract, &bindings)?;
    Ok(out
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| RawTriplet::new(&sample.id, l.trim_end()))
        .collect())
}

/// Splits raw lines into well-formed triplets and rejects.
pub fn parse_and_format_check(raw: Vec<RawTriplet>) -> (Vec<Triplet>, Vec<RawTriplet>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for r in raw {
        match &r.parsed {
            Some((s, p, o)) => kept.push(Triplet::new(s, p, o).with_source(&r.sample_id)),
            None => rejected.push(r),
        }
    }
    (kept, rejected)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Toxic,
    NonToxic,
}

fn verdict_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(\d+)\s*[.):\-]?\s*(non-toxic|nontoxic|not toxic|toxic|yes|no)\b").expect("valid regex")
    })
}

fn parse_verdicts(output: &str) -> HashMap<usize, Verdict> {
    let mut verdicts = HashMap::new();
    for line in output.lines() {
        if let Some(c) = verdict_line().captures(line) {
            let Ok(n) = c[1].parse::<usize>() else { continue };
            let v = match c[2].to_ascii_lowercase().as_str() {
                "toxic" | "yes" => Verdict::Toxic,
                _ => Verdict::NonToxic,
            };
            verdicts.entry(n).or_insert(v);
        }
    }
    verdicts
}

/// Asks the model which triplets evoke toxicity; one prompt per sample.
///
/// Returns the retained triplets and audit events for dropped or unjudged ones.
pub fn self_check_filter(
    sample: &Sample,
    triplets: Vec<Triplet>,
    gw: &LlmGateway,
) -> Result<(Vec<Triplet>, Vec<AuditEvent>), BuildError> {
    if triplets.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let listing = triplets
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {}", i + 1, t.spo_string()))
        .collect::<Vec<_>>()
        .join("\n");
    let bindings = BTreeMap::from([("text", sample.text.as_str()), ("triplets", listing.as_str())]);
    let out = gw.complete_role(PromptRole::SelfCheck, &bindings)?;
    let verdicts = parse_verdicts(&out);

    let mut kept = Vec::new();
    let mut events = Vec::new();
    for (i, t) in triplets.into_iter().enumerate() {
        match verdicts.get(&(i + 1)) {
            Some(Verdict::Toxic) => kept.push(t),
            Some(Verdict::NonToxic) => events.push(AuditEvent::new(&sample.id, Stage::SelfCheck, "dropped", t.spo_string())),
            None => {
                log::warn!("sample {}: no verdict for {}", sample.id, t.spo_string());
                events.push(AuditEvent::new(&sample.id, Stage::SelfCheck, "unparseable_verdict", t.spo_string()));
            }
        }
    }
    Ok((kept, events))
}

/// Rewrites elements to canonical names and folds exact duplicates.
pub fn apply_resolution(
    triplets: Vec<Triplet>,
    entity_map: &ClusterMap,
    relation_map: &ClusterMap,
) -> Result<Vec<Triplet>, BuildError> {
    let lookup = |map: &ClusterMap, s: &str| {
        map.canonical(s).map(str::to_string).ok_or_else(|| BuildError::UnmappedElement(s.to_string()))
    };
    let mut out: Vec<Triplet> = Vec::new();
    let mut index: HashMap<(String, String, String), usize> = HashMap::new();
    for t in triplets {
        let s = lookup(entity_map, &t.subject)?;
        let p = lookup(relation_map, &t.predicate)?;
        let o = lookup(entity_map, &t.object)?;
        let key = (s.clone(), p.clone(), o.clone());
        match index.get(&key) {
            Some(&i) => {
                out[i].count += t.count;
                out[i].sources.extend(t.sources);
            }
            None => {
                index.insert(key, out.len());
                out.push(Triplet { subject: s, predicate: p, object: o, count: t.count, sources: t.sources });
            }
        }
    }
    Ok(out)
}
