//! Corpus-level construction with per-sample checkpoints.
//!
//! With a checkpoint directory, every finished sample is appended to
//! `extraction.jsonl` as soon as it completes; a rerun reuses those records
//! and only processes the rest. Samples skipped for a transient provider
//! failure are not checkpointed, so they are retried. After resolution the
//! cluster maps are written to `resolution.json`.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    apply_resolution, extract_triplets, parse_and_format_check, reason_rationale, resolve_counts, self_check_filter,
    AuditEvent, BuildError, ClusterMap, ElementKind, Stage, Triplet,
};
use crate::corpus::{toxic_subset, Sample};
use crate::embedding::Embedder;
use crate::llm_gateway::{GatewayError, LlmGateway};

const EXTRACTION_FILE: &str = "extraction.jsonl";
const RESOLUTION_FILE: &str = "resolution.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub entity_threshold: f64,
    pub relation_threshold: f64,
    pub parallelism: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self { entity_threshold: 0.90, relation_threshold: 0.90, parallelism: 4 }
    }
}

/// Steps 1-2 for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub rationale: Option<String>,
    pub raw_lines: usize,
    pub formatted: usize,
    pub retained: Vec<Triplet>,
    pub audit: Vec<AuditEvent>,
    #[serde(skip)]
    pub retryable: bool,
}

impl SampleOutcome {
    fn skipped(sample: &Sample, stage: Stage, err: &BuildError) -> Self {
        let retryable = matches!(
            err,
            BuildError::Gateway(GatewayError::ProviderUnavailable(_) | GatewayError::RateLimited | GatewayError::ResponseTruncated)
        );
        log::warn!("skipping sample {}: {err}", sample.id);
        Self {
            sample_id: sample.id.clone(),
            rationale: None,
            raw_lines: 0,
            formatted: 0,
            retained: Vec::new(),
            audit: vec![AuditEvent::new(&sample.id, stage, "skipped", err.to_string())],
            retryable,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub toxic_samples: usize,
    pub skipped_samples: usize,
    /// Skipped for a transient provider failure; a resumed run retries them.
    pub deferred_samples: usize,
    pub resumed_samples: usize,
    pub raw_lines: usize,
    pub format_kept: usize,
    pub self_check_kept: usize,
    pub resolved_triplets: usize,
    pub distinct_entities_before: usize,
    pub distinct_entities_after: usize,
    pub distinct_relations_before: usize,
    pub distinct_relations_after: usize,
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub triplets: Vec<Triplet>,
    pub entity_map: ClusterMap,
    pub relation_map: ClusterMap,
    pub report: BuildReport,
    /// In corpus order.
    pub audit: Vec<AuditEvent>,
}

pub fn process_sample(sample: &Sample, gw: &LlmGateway) -> SampleOutcome {
    let rationale = match reason_rationale(sample, gw) {
        Ok(r) => r,
        Err(e) => return SampleOutcome::skipped(sample, Stage::Rationale, &e),
    };
    let raw = match extract_triplets(sample, &rationale, gw) {
        Ok(r) => r,
        Err(e) => return SampleOutcome::skipped(sample, Stage::Extraction, &e),
    };
    let raw_lines = raw.len();
    let (formatted, rejected) = parse_and_format_check(raw);
    let mut audit: Vec<AuditEvent> =
        rejected.iter().map(|r| AuditEvent::new(&sample.id, Stage::FormatCheck, "rejected", r.raw.clone())).collect();
    let n_formatted = formatted.len();
    let (retained, mut check_events) = match self_check_filter(sample, formatted, gw) {
        Ok(r) => r,
        Err(e) => return SampleOutcome::skipped(sample, Stage::SelfCheck, &e),
    };
    audit.append(&mut check_events);
    SampleOutcome {
        sample_id: sample.id.clone(),
        rationale: Some(rationale.text),
        raw_lines,
        formatted: n_formatted,
        retained,
        audit,
        retryable: false,
    }
}

fn load_checkpoint(path: &Path) -> Result<HashMap<String, SampleOutcome>, BuildError> {
    let mut done = HashMap::new();
    if !path.exists() {
        return Ok(done);
    }
    let file = std::fs::File::open(path).map_err(|e| BuildError::Checkpoint(e.to_string()))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| BuildError::Checkpoint(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        // a torn final line from an interrupted run is ignored
        match serde_json::from_str::<SampleOutcome>(&line) {
            Ok(o) => {
                done.insert(o.sample_id.clone(), o);
            }
            Err(e) => log::warn!("ignoring unreadable checkpoint line: {e}"),
        }
    }
    Ok(done)
}

/// Runs the full construction over the toxic samples of `samples`.
pub fn build_triplets(
    samples: &[Sample],
    gw: &LlmGateway,
    embedder: &dyn Embedder,
    config: &BuildConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<BuildOutput, BuildError> {
    let toxic = toxic_subset(samples);
    let mut report = BuildReport { toxic_samples: toxic.len(), ..Default::default() };

    let (mut done, writer) = match checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| BuildError::Checkpoint(e.to_string()))?;
            let path = dir.join(EXTRACTION_FILE);
            let done = load_checkpoint(&path)?;
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| BuildError::Checkpoint(e.to_string()))?;
            (done, Some(Mutex::new(file)))
        }
        None => (HashMap::new(), None),
    };
    report.resumed_samples = toxic.iter().filter(|s| done.contains_key(&s.id)).count();

    let pending: Vec<&Sample> = toxic.iter().filter(|s| !done.contains_key(&s.id)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism.max(1))
        .build()
        .map_err(|e| BuildError::Checkpoint(e.to_string()))?;
    let fresh: Vec<SampleOutcome> = pool.install(|| {
        pending
            .par_iter()
            .map(|s| {
                let outcome = process_sample(s, gw);
                if let (Some(w), false) = (&writer, outcome.retryable) {
                    let line = serde_json::to_string(&outcome).expect("outcome serializes");
                    let mut f = w.lock().unwrap();
                    if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                        log::warn!("checkpoint write failed: {e}");
                    }
                }
                outcome
            })
            .collect()
    });
    for o in fresh {
        done.insert(o.sample_id.clone(), o);
    }

    let mut retained = Vec::new();
    let mut audit = Vec::new();
    for s in &toxic {
        let o = &done[&s.id];
        if o.rationale.is_none() {
            report.skipped_samples += 1;
            if o.retryable {
                report.deferred_samples += 1;
            }
        }
        report.raw_lines += o.raw_lines;
        report.format_kept += o.formatted;
        report.self_check_kept += o.retained.len();
        retained.extend(o.retained.iter().cloned());
        audit.extend(o.audit.iter().cloned());
    }

    let mut entity_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut relation_counts: BTreeMap<String, u64> = BTreeMap::new();
    for t in &retained {
        *entity_counts.entry(t.subject.clone()).or_default() += t.count;
        *entity_counts.entry(t.object.clone()).or_default() += t.count;
        *relation_counts.entry(t.predicate.clone()).or_default() += t.count;
    }
    let entity_map = resolve_counts(&entity_counts, ElementKind::Entity, embedder, config.entity_threshold)?;
    let relation_map = resolve_counts(&relation_counts, ElementKind::Relation, embedder, config.relation_threshold)?;
    report.distinct_entities_before = entity_map.assignments.len();
    report.distinct_entities_after = entity_map.canonical_names().len();
    report.distinct_relations_before = relation_map.assignments.len();
    report.distinct_relations_after = relation_map.canonical_names().len();

    let triplets = apply_resolution(retained, &entity_map, &relation_map)?;
    report.resolved_triplets = triplets.len();

    if let Some(dir) = checkpoint_dir {
        let doc = serde_json::json!({"entities": entity_map, "relations": relation_map});
        std::fs::write(dir.join(RESOLUTION_FILE), serde_json::to_string_pretty(&doc).expect("maps serialize") + "\n")
            .map_err(|e| BuildError::Checkpoint(e.to_string()))?;
    }

    Ok(BuildOutput { triplets, entity_map, relation_map, report, audit })
}
