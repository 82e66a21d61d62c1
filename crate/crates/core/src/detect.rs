//! Knowledge-augmented binary toxicity classification and its evaluation.
//!
//! The classifier reads the next-token log-probabilities of options `a`
//! (toxic) and `b` (non-toxic). `a` wins ties. Three modes are supported:
//! vanilla prompting, naive RAG over training speeches, and graph knowledge.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, Sample};
use crate::embedding::{Embedder, EmbeddingError, NearestNeighborIndex};
use crate::kg_store::KnowledgeGraph;
use crate::llm_gateway::{GatewayError, LlmGateway, OptionScore, PromptRole};
use crate::query::{GraphQuerier, QueryConfig, QueryError, RetrievedKnowledge};

pub const TOXIC_OPTION: &str = "a";
pub const NON_TOXIC_OPTION: &str = "b";

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("records and gold labels do not align: {0}")]
    IdMismatch(String),
    #[error("test corpus is empty")]
    EmptyCorpus,
    #[error("{0}")]
    Mode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("predictions file line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Vanilla,
    NaiveRag,
    Metatox,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "naive-rag" => Ok(Mode::NaiveRag),
            "metatox" => Ok(Mode::Metatox),
            other => Err(format!("unknown mode {other:?} (expected vanilla, naive-rag or metatox)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSpeech {
    pub id: String,
    pub text: String,
    pub similarity: f64,
}

/// What was put in front of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Knowledge {
    None,
    Triplets(RetrievedKnowledge),
    Speeches { items: Vec<RetrievedSpeech> },
}

impl Knowledge {
    pub fn is_empty(&self) -> bool {
        match self {
            Knowledge::None => true,
            Knowledge::Triplets(k) => k.is_empty(),
            Knowledge::Speeches { items } => items.is_empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub sample_id: String,
    pub predicted: Label,
    pub p_toxic: f64,
    pub option_scores: Vec<OptionScore>,
    pub knowledge_used: Knowledge,
    pub mode: Mode,
}

/// `exp(a) / (exp(a) + exp(b))`, computed stably; 0.5 when both are `-inf`.
pub fn p_toxic(score_a: f64, score_b: f64) -> f64 {
    if score_a == score_b {
        return 0.5;
    }
    if score_a == f64::NEG_INFINITY {
        return 0.0;
    }
    if score_b == f64::NEG_INFINITY {
        return 1.0;
    }
    let d = score_b - score_a;
    if d > 0.0 {
        let e = libm::exp(-d);
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + libm::exp(d))
    }
}

pub fn decide(score_a: f64, score_b: f64) -> Label {
    if score_a >= score_b {
        Label::Toxic
    } else {
        Label::NonToxic
    }
}

fn knowledge_block(gw: &LlmGateway, mode: Mode, knowledge: &Knowledge) -> Result<String, DetectError> {
    let t = gw.templates().get(PromptRole::Classify);
    let lines = |header: &str, items: Vec<&str>| {
        let mut s = header.to_string();
        for i in items {
            s.push_str("\n- ");
            s.push_str(&i.replace('\n', " "));
        }
        s
    };
    match (mode, knowledge) {
        (Mode::Vanilla, k) if k.is_empty() => Ok(String::new()),
        (Mode::Vanilla, _) => Err(DetectError::Mode("vanilla mode takes no knowledge".into())),
        (Mode::Metatox, Knowledge::Triplets(k)) if !k.is_empty() => Ok(lines(t.section("knowledge_header"), k.sentences().collect())),
        (Mode::Metatox, Knowledge::Triplets(_) | Knowledge::None) => Ok(t.section("knowledge_empty").to_string()),
        (Mode::NaiveRag, Knowledge::Speeches { items }) => {
            Ok(lines(t.section("speeches_header"), items.iter().map(|s| s.text.as_str()).collect()))
        }
        (Mode::NaiveRag, Knowledge::None) => Ok(t.section("speeches_header").to_string()),
        (m, k) => Err(DetectError::Mode(format!("{m:?} mode cannot use {k:?}"))),
    }
}

pub fn classification_prompt(text: &str, knowledge: &Knowledge, gw: &LlmGateway, mode: Mode) -> Result<String, DetectError> {
    let block = knowledge_block(gw, mode, knowledge)?;
    Ok(gw.render(PromptRole::Classify, &BTreeMap::from([("knowledge", block.as_str()), ("text", text)]))?)
}

pub fn classify(sample_id: &str, text: &str, knowledge: Knowledge, gw: &LlmGateway, mode: Mode) -> Result<DetectionRecord, DetectError> {
    let prompt = classification_prompt(text, &knowledge, gw, mode)?;
    let scores = gw.score_options(&prompt, &[TOXIC_OPTION, NON_TOXIC_OPTION])?;
    let (a, b) = (scores[0].logprob, scores[1].logprob);
    Ok(DetectionRecord {
        sample_id: sample_id.to_string(),
        predicted: decide(a, b),
        p_toxic: p_toxic(a, b),
        option_scores: scores,
        knowledge_used: knowledge,
        mode,
    })
}

/// Embedded training speeches for the naive RAG baseline.
pub struct SpeechIndex {
    index: NearestNeighborIndex,
    texts: HashMap<String, String>,
}

impl SpeechIndex {
    pub fn build(train: &[Sample], embedder: &dyn Embedder) -> Result<Self, DetectError> {
        if train.is_empty() {
            return Err(DetectError::Mode("naive RAG needs a nonempty training set".into()));
        }
        let index = NearestNeighborIndex::build(embedder, train.iter().map(|s| (s.id.as_str(), s.text.as_str())))?;
        Ok(Self { index, texts: train.iter().map(|s| (s.id.clone(), s.text.clone())).collect() })
    }

    /// Top `k` training speeches by cosine similarity, ties by id.
    pub fn retrieve(&self, text: &str, embedder: &dyn Embedder, k: usize) -> Result<Vec<RetrievedSpeech>, DetectError> {
        let v = embedder.embed(text)?;
        Ok(self
            .index
            .query(&v, k)?
            .into_iter()
            .map(|(id, similarity)| RetrievedSpeech { text: self.texts[&id].clone(), id, similarity })
            .collect())
    }
}

pub fn naive_rag_retrieve(text: &str, train: &[Sample], embedder: &dyn Embedder, k: usize) -> Result<Vec<RetrievedSpeech>, DetectError> {
    SpeechIndex::build(train, embedder)?.retrieve(text, embedder, k)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub r#fn: usize,
}

/// `fpr` is `null` when there are no negatives, `pr_auc` when there are no
/// positives; `f1` is 0 when it has no true positives, false positives or
/// false negatives to count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub pr_auc: Option<f64>,
    pub fpr: Option<f64>,
    pub confusion: Confusion,
}

/// Average precision of `scores` against binary `positives`: the sum over
/// distinct score levels, taken in descending order, of the recall gained
/// at that level times the precision there.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let total_pos = positives.iter().filter(|p| **p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let level = scores[order[i]];
        while i < order.len() && scores[order[i]] == level {
            seen += 1;
            if positives[order[i]] {
                tp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Some(ap)
}

pub fn evaluate(records: &[DetectionRecord], gold: &[Sample]) -> Result<MetricsReport, DetectError> {
    if records.len() != gold.len() {
        return Err(DetectError::IdMismatch(format!("{} records for {} gold samples", records.len(), gold.len())));
    }
    let labels: HashMap<&str, Label> = gold.iter().map(|s| (s.id.as_str(), s.label)).collect();
    let mut c = Confusion::default();
    let mut scores = Vec::with_capacity(records.len());
    let mut positives = Vec::with_capacity(records.len());
    let mut seen = std::collections::HashSet::new();
    for r in records {
        let truth = *labels
            .get(r.sample_id.as_str())
            .ok_or_else(|| DetectError::IdMismatch(format!("no gold label for {:?}", r.sample_id)))?;
        if !seen.insert(r.sample_id.as_str()) {
            return Err(DetectError::IdMismatch(format!("duplicate record for {:?}", r.sample_id)));
        }
        match (r.predicted, truth) {
            (Label::Toxic, Label::Toxic) => c.tp += 1,
            (Label::Toxic, Label::NonToxic) => c.fp += 1,
            (Label::NonToxic, Label::NonToxic) => c.tn += 1,
            (Label::NonToxic, Label::Toxic) => c.r#fn += 1,
        }
        scores.push(r.p_toxic);
        positives.push(truth.is_toxic());
    }
    let n = records.len();
    let f1_denom = 2 * c.tp + c.fp + c.r#fn;
    Ok(MetricsReport {
        n,
        accuracy: if n == 0 { 0.0 } else { (c.tp + c.tn) as f64 / n as f64 },
        f1: if f1_denom == 0 { 0.0 } else { 2.0 * c.tp as f64 / f1_denom as f64 },
        pr_auc: average_precision(&scores, &positives),
        fpr: if c.fp + c.tn == 0 { None } else { Some(c.fp as f64 / (c.fp + c.tn) as f64) },
        confusion: c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub naive_rag_k: usize,
    pub parallelism: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { naive_rag_k: 2, parallelism: 4 }
    }
}

/// Resources the chosen mode needs.
pub enum DetectContext<'a> {
    Vanilla,
    NaiveRag { train: &'a [Sample] },
    Metatox { graph: &'a KnowledgeGraph, query: QueryConfig },
}

impl DetectContext<'_> {
    pub fn mode(&self) -> Mode {
        match self {
            DetectContext::Vanilla => Mode::Vanilla,
            DetectContext::NaiveRag { .. } => Mode::NaiveRag,
            DetectContext::Metatox { .. } => Mode::Metatox,
        }
    }
}

/// Classifies every test sample, then evaluates. Any provider failure aborts the run.
pub fn run_detection(
    test: &[Sample],
    context: &DetectContext<'_>,
    gw: &LlmGateway,
    embedder: &dyn Embedder,
    config: &DetectConfig,
) -> Result<(Vec<DetectionRecord>, MetricsReport), DetectError> {
    if test.is_empty() {
        return Err(DetectError::EmptyCorpus);
    }
    let mode = context.mode();
    let speeches = match context {
        DetectContext::NaiveRag { train } => Some(SpeechIndex::build(train, embedder)?),
        _ => None,
    };
    let querier = match context {
        DetectContext::Metatox { graph, query } => Some(GraphQuerier::new(graph, embedder, query.clone())?),
        _ => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism.max(1))
        .build()
        .map_err(|e| DetectError::Mode(e.to_string()))?;
    let records = pool.install(|| {
        test.par_iter()
            .map(|s| {
                let knowledge = match (&speeches, &querier) {
                    (Some(idx), _) => Knowledge::Speeches { items: idx.retrieve(&s.text, embedder, config.naive_rag_k)? },
                    (_, Some(q)) => Knowledge::Triplets(q.query(&s.text, gw, embedder)?),
                    _ => Knowledge::None,
                };
                classify(&s.id, &s.text, knowledge, gw, mode)
            })
            .collect::<Result<Vec<_>, DetectError>>()
    })?;
    let metrics = evaluate(&records, test)?;
    Ok((records, metrics))
}

pub fn write_records<W: Write>(mut w: W, records: &[DetectionRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    Ok(())
}

pub fn save_records(path: &Path, records: &[DetectionRecord]) -> Result<(), DetectError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_records(&mut out, records)?;
    out.flush()?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<DetectionRecord>, DetectError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| DetectError::MalformedRecord { line: i + 1, reason: e.to_string() })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::TestEmbedder;
    use crate::llm_gateway::{MockProvider, MockRules, TemplateSet};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn rec(id: &str, predicted: Label, p: f64) -> DetectionRecord {
        DetectionRecord { sample_id: id.into(), predicted, p_toxic: p, option_scores: vec![], knowledge_used: Knowledge::None, mode: Mode::Vanilla }
    }

    fn gold(id: &str, label: Label) -> Sample {
        Sample::new(id, "t", label.as_str(), label)
    }

    fn gateway(rules: &str) -> LlmGateway {
        LlmGateway::new(Arc::new(MockProvider::new(MockRules::from_json(rules).unwrap())), TemplateSet::builtin())
    }

    #[test]
    fn classify_by_option_logits() {
        let gw = gateway(r#"{"rules": [{"when": ["Text: hi"], "scores": {"a": -0.1, "b": -2.3}}, {"when": ["Text: tie"], "scores": {"a": -1.0, "b": -1.0}}]}"#);
        let r = classify("1", "hi", Knowledge::None, &gw, Mode::Vanilla).unwrap();
        assert_eq!(r.predicted, Label::Toxic);
        let want = (-0.1f64).exp() / ((-0.1f64).exp() + (-2.3f64).exp());
        assert!((r.p_toxic - want).abs() < 1e-12);
        let t = classify("2", "tie", Knowledge::None, &gw, Mode::Vanilla).unwrap();
        assert_eq!(t.predicted, Label::Toxic);
        assert_eq!(t.p_toxic, 0.5);
    }

    #[test]
    fn vanilla_rejects_knowledge() {
        let gw = gateway(r#"{"default_scores": {"a": -1.0, "b": -1.0}}"#);
        let k = Knowledge::Speeches { items: vec![RetrievedSpeech { id: "x".into(), text: "y".into(), similarity: 1.0 }] };
        assert!(matches!(classify("1", "t", k, &gw, Mode::Vanilla), Err(DetectError::Mode(_))));
    }

    #[test]
    fn knowledge_blocks_per_mode() {
        let gw = gateway("{}");
        let empty = classification_prompt("t", &Knowledge::Triplets(RetrievedKnowledge::empty()), &gw, Mode::Metatox).unwrap();
        assert!(empty.contains("no related triplets were found"));
        let vanilla = classification_prompt("t", &Knowledge::None, &gw, Mode::Vanilla).unwrap();
        assert!(!vanilla.contains("no related triplets were found"));
        assert!(vanilla.ends_with("\nText: t\n(a) toxic\n(b) non-toxic\nAnswer:"));
    }

    #[test]
    fn p_toxic_edges() {
        assert_eq!(p_toxic(0.0, f64::NEG_INFINITY), 1.0);
        assert_eq!(p_toxic(f64::NEG_INFINITY, 0.0), 0.0);
        assert_eq!(p_toxic(f64::NEG_INFINITY, f64::NEG_INFINITY), 0.5);
        assert!((p_toxic(-800.0, -801.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn hand_confusion_matrix() {
        let records = vec![
            rec("1", Label::Toxic, 0.9),
            rec("2", Label::Toxic, 0.8),
            rec("3", Label::NonToxic, 0.2),
            rec("4", Label::NonToxic, 0.1),
        ];
        let g = vec![gold("1", Label::Toxic), gold("2", Label::NonToxic), gold("3", Label::NonToxic), gold("4", Label::Toxic)];
        let m = evaluate(&records, &g).unwrap();
        assert_eq!(m.confusion, Confusion { tp: 1, fp: 1, tn: 1, r#fn: 1 });
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.f1, 0.5);
        assert_eq!(m.fpr, Some(0.5));
    }

    #[test]
    fn perfect_classifier() {
        let records = vec![rec("1", Label::Toxic, 0.9), rec("2", Label::NonToxic, 0.1)];
        let g = vec![gold("1", Label::Toxic), gold("2", Label::NonToxic)];
        let m = evaluate(&records, &g).unwrap();
        assert_eq!((m.accuracy, m.f1, m.fpr, m.pr_auc), (1.0, 1.0, Some(0.0), Some(1.0)));
    }

    #[test]
    fn undefined_rates_are_null() {
        let m = evaluate(&[rec("1", Label::Toxic, 0.9)], &[gold("1", Label::Toxic)]).unwrap();
        assert_eq!(m.fpr, None);
        let m = evaluate(&[rec("1", Label::Toxic, 0.9)], &[gold("1", Label::NonToxic)]).unwrap();
        assert_eq!(m.pr_auc, None);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn misaligned_ids() {
        assert!(matches!(evaluate(&[rec("1", Label::Toxic, 0.9)], &[gold("2", Label::Toxic)]), Err(DetectError::IdMismatch(_))));
        assert!(matches!(evaluate(&[], &[gold("2", Label::Toxic)]), Err(DetectError::IdMismatch(_))));
    }

    #[test]
    fn constant_scores_give_prevalence() {
        let ap = average_precision(&[0.5; 5], &[true, false, true, false, false]).unwrap();
        assert!((ap - 0.4).abs() < 1e-12);
    }

    #[test]
    fn naive_rag_examples() {
        let e = TestEmbedder::new();
        let train: Vec<Sample> = ["go back home", "women belong in kitchen", "great game last night"]
            .iter()
            .enumerate()
            .map(|(i, t)| Sample::new(format!("t{i}"), *t, "toxic", Label::Toxic))
            .collect();
        let got = naive_rag_retrieve("women belong in kitchen", &train, &e, 2).unwrap();
        assert_eq!(got[0].id, "t1");
        assert!((got[0].similarity - 1.0).abs() < 1e-9);
        assert_eq!(got.len(), 2);
        assert_eq!(naive_rag_retrieve("x y z", &train, &e, 10).unwrap().len(), 3);
    }

    #[test]
    fn empty_corpus_and_vanilla_ignores_graph() {
        let gw = gateway(r#"{"default_scores": {"a": -2.0, "b": -0.5}}"#);
        let e = TestEmbedder::new();
        assert!(matches!(run_detection(&[], &DetectContext::Vanilla, &gw, &e, &DetectConfig::default()), Err(DetectError::EmptyCorpus)));
        let (records, m) = run_detection(&[gold("1", Label::NonToxic)], &DetectContext::Vanilla, &gw, &e, &DetectConfig::default()).unwrap();
        assert_eq!(records[0].knowledge_used, Knowledge::None);
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn records_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let mut r = rec("1", Label::Toxic, 1.0);
        r.option_scores = vec![OptionScore::new("a", 0.0), OptionScore::new("b", f64::NEG_INFINITY)];
        save_records(&path, &[r.clone()]).unwrap();
        assert_eq!(load_records(&path).unwrap(), vec![r]);
    }

    proptest! {
        #[test]
        fn decision_is_shift_invariant(a in -50.0f64..0.0, b in -50.0f64..0.0, c in -20.0f64..20.0) {
            prop_assert_eq!(decide(a, b), decide(a + c, b + c));
        }

        #[test]
        fn p_toxic_monotone_in_margin(b in -30.0f64..0.0, d1 in -10.0f64..10.0, d2 in -10.0f64..10.0) {
            prop_assume!((d1 - d2).abs() > 1e-6);
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(p_toxic(b + lo, b) < p_toxic(b + hi, b));
        }

        #[test]
        fn evaluate_is_permutation_invariant(rows in prop::collection::vec((any::<bool>(), any::<bool>(), 0u8..10), 1..30), seed in any::<u64>()) {
            let records: Vec<_> = rows.iter().enumerate().map(|(i, (p, _, s))| rec(&i.to_string(), if *p { Label::Toxic } else { Label::NonToxic }, *s as f64 / 10.0)).collect();
            let g: Vec<_> = rows.iter().enumerate().map(|(i, (_, t, _))| gold(&i.to_string(), if *t { Label::Toxic } else { Label::NonToxic })).collect();
            let mut shuffled = records.clone();
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(evaluate(&records, &g).unwrap(), evaluate(&shuffled, &g).unwrap());
        }
    }
}
