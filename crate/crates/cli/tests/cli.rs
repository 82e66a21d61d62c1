use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metatox_core::kg_store::KnowledgeGraph;
use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/scenario").join(name)
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn metatox(args: &[&str], env: &[(&str, &str)], cwd: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_metatox"));
    cmd.args(args).current_dir(cwd);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("METATOX_")) {
        cmd.env_remove(k);
    }
    cmd.envs(env.iter().copied());
    cmd.output().unwrap()
}

fn json_out(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn stats_of_empty_graph() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("g.json"), "{\"edges\": [], \"nodes\": [], \"schema_version\": 1}\n").unwrap();
    let v = json_out(&metatox(&["stats", "g.json"], &[], dir.path()));
    assert_eq!(v["node_count"], 0);
    assert_eq!(v["edge_count"], 0);
    assert_eq!(v["connected_component_count"], 0);
}

#[test]
fn self_merge_halves_triplets() {
    let dir = tempfile::tempdir().unwrap();
    let g = golden("graph.json");
    let g = g.to_str().unwrap();
    let v = json_out(&metatox(&["merge", g, g, "--out", "m.json"], &[], dir.path()));
    assert_eq!(v["triplet_reduction_pct"], 50.0);
    let merged = KnowledgeGraph::load(&dir.path().join("m.json")).unwrap();
    let original = KnowledgeGraph::load(&golden("graph.json")).unwrap();
    assert!(merged.isomorphic(&original));
    assert!(merged.edges().iter().all(|e| e.count == 2), "occurrence counts add up");
}

#[test]
fn flag_beats_env_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("config.toml");
    let g = golden("graph.json");
    let base = ["--config", cfg.to_str().unwrap()];
    let query = ["query", "--graph", g.to_str().unwrap(), "--text", "Immigrants stealing jobs again"];
    let run = |extra: &[&str], env: &[(&str, &str)]| {
        let args: Vec<&str> = base.iter().chain(extra).chain(query.iter()).copied().collect();
        json_out(&metatox(&args, env, dir.path()))["items"].as_array().unwrap().len()
    };
    assert_eq!(run(&[], &[]), 1);
    assert_eq!(run(&[], &[("METATOX_QUERY_RANK_FLOOR", "1.0")]), 0);
    assert_eq!(run(&["--set", "query.rank_floor=0.35"], &[("METATOX_QUERY_RANK_FLOOR", "1.0")]), 1);
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[query]\ntop_kk = 3\n").unwrap();
    let out = metatox(&["--config", "bad.toml", "stats", "g.json"], &[], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("top_kk"));
}

#[test]
fn provider_failure_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let g = golden("graph.json");
    let out = metatox(
        &["--set", "llm.provider=http", "--set", "llm.max_retries=0", "query", "--graph", g.to_str().unwrap(), "--text", "anything"],
        &[("METATOX_LLM_URL", "http://127.0.0.1:9/v1/chat/completions")],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("provider unavailable"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn build_with_failed_samples_exits_nonzero_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let rules: Value = serde_json::from_str(&std::fs::read_to_string(scenario("mock_rules.json")).unwrap()).unwrap();
    let mut failing = rules.clone();
    failing["rules"]
        .as_array_mut()
        .unwrap()
        .insert(0, serde_json::json!({"role": "rationale", "when": ["Text: women shouldn't be allowed to vote\n"], "fail": "unavailable"}));
    std::fs::write(dir.path().join("failing.json"), failing.to_string()).unwrap();
    let train = scenario("train.jsonl");
    let args = |rules: String| {
        vec![
            "--set".to_string(),
            format!("llm.mock_rules={rules}"),
            "build".to_string(),
            train.to_str().unwrap().to_string(),
            "--out".to_string(),
            "graph.json".to_string(),
            "--checkpoint".to_string(),
            "ckpt".to_string(),
        ]
    };
    let a = args("failing.json".to_string());
    let out = metatox(&a.iter().map(String::as_str).collect::<Vec<_>>(), &[], dir.path());
    assert!(!out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["deferred_samples"], 1);

    let good = scenario("mock_rules.json");
    let a = args(good.to_str().unwrap().to_string());
    let report = json_out(&metatox(&a.iter().map(String::as_str).collect::<Vec<_>>(), &[], dir.path()));
    assert_eq!(report["resumed_samples"], 5);
    let rebuilt = std::fs::read(dir.path().join("graph.json")).unwrap();
    assert!(rebuilt == std::fs::read(golden("graph.json")).unwrap(), "resumed build differs from golden");
}

#[test]
fn eval_recomputes_detect_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let gold = scenario("test.jsonl");
    let out = metatox(&["eval", golden("detect_metatox.jsonl").to_str().unwrap(), gold.to_str().unwrap()], &[], dir.path());
    assert!(out.stdout == std::fs::read(golden("detect_metatox.stdout")).unwrap(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn naive_rag_requires_training_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = metatox(&["detect", scenario("test.jsonl").to_str().unwrap(), "--mode", "naive-rag", "--out", "p.jsonl"], &[], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--train"));
}
