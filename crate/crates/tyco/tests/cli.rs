mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use common::{path_str, stderr, stdout, tiny_config, tyco, write_config};
use serde_json::{json, Value};
use tempfile::TempDir;
use tyco::{checkpoint, commands};
use tyco::config::RunConfig;
use tyco::corpus;

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Trains the tiny config into `dir/run` and returns the checkpoint path.
fn trained(dir: &Path, steps: usize) -> std::path::PathBuf {
    let out = dir.join("run");
    let cfg = write_config(dir, "tiny.json", &tiny_config(&out, steps));
    let o = tyco(&["train", "--config", path_str(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join(commands::CHECKPOINT_FILE)
}

#[test]
fn help_succeeds_and_bad_arguments_are_validation_errors() {
    assert_eq!(tyco(&["--help"]).status.code(), Some(0));
    assert_eq!(tyco(&[]).status.code(), Some(1));
    assert_eq!(tyco(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(tyco(&["ablate", "--axes", "dg,wings"]).status.code(), Some(1));
    assert_eq!(tyco(&["budget", "--fractions", "0.5,1.5"]).status.code(), Some(1));
}

#[test]
fn unknown_config_key_names_its_path() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({ "model": { "decoder": { "blok": 3 } } }));
    let o = tyco(&["gen-data", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.decoder.blok"), "{}", stderr(&o));
}

#[test]
fn wrong_type_names_its_path() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({ "schedule": { "stage_i": { "src": "high" } } }));
    let o = tyco(&["prompt", "--lang", "de", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("schedule.stage_i.src"), "{}", stderr(&o));
}

#[test]
fn partial_lambdas_are_completed_logged_and_echoed() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({ "schedule": { "stage_i": { "src": 0.3 } } }));
    let out = dir.path().join("d");
    let o = tyco(&["gen-data", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("override:"), "{}", stderr(&o));
    let echo = read_json(&out.join(commands::CONFIG_FILE));
    assert_eq!(echo["schedule"]["stage_i"], json!({ "src": 0.3, "tgt": 0.2 }));
    assert_eq!(echo["schedule"]["stage_ii"], json!({ "src": 0.01, "tgt": 0.05 }));
}

#[test]
fn stage_two_weights_not_below_stage_one_warn() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({ "schedule": { "stage_ii": { "src": 0.5, "tgt": 0.5 } } }));
    let o = tyco(&["prompt", "--lang", "fr", "--config", path_str(&cfg)]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning:"), "{}", stderr(&o));
}

#[test]
fn prompts_carry_language_guidance() {
    let de = tyco(&["prompt", "--lang", "de"]);
    assert!(de.status.success());
    assert!(stdout(&de).contains("German") && stdout(&de).contains("compound"), "{}", stdout(&de));
    let ja = tyco(&["prompt", "--lang", "ja"]);
    assert!(stdout(&ja).contains("Japanese") && stdout(&ja).contains("honorific"), "{}", stdout(&ja));

    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({ "variants": { "prompt": "language_aware" } }));
    let plain = tyco(&["prompt", "--lang", "ja", "--config", path_str(&cfg)]);
    assert!(plain.status.success(), "{}", stderr(&plain));
    assert!(stdout(&plain).contains("Japanese") && !stdout(&plain).contains("honorific"), "{}", stdout(&plain));
}

#[test]
fn unregistered_prompt_language_falls_back_with_a_warning() {
    let o = tyco(&["prompt", "--lang", "xx"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning:"));
    assert!(stdout(&o).starts_with("You are a speech translation assistant."));
}

#[test]
fn oracle_hypotheses_score_perfectly() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny_config(&dir.path().join("run"), 0));
    let data = dir.path().join("data");
    assert!(tyco(&["gen-data", "--config", path_str(&cfg), "--out", path_str(&data)]).status.success());
    let hyps = data.join("test.tsv");
    let o = tyco(&["eval", "--hyps", path_str(&hyps), "--config", path_str(&cfg), "--split", "test"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["overall"]["exact_match"], json!(1.0));
    assert_eq!(report["overall"]["token_error"], json!(0.0));
    assert_eq!(report["overall"]["bleu"], json!(100.0));
}

#[test]
fn missing_hypothesis_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny_config(&dir.path().join("run"), 0));
    let data = dir.path().join("data");
    assert!(tyco(&["gen-data", "--config", path_str(&cfg), "--out", path_str(&data)]).status.success());
    let mut rows = corpus::read(&data.join("test.tsv")).unwrap();
    rows.pop();
    let hyps = dir.path().join("short.tsv");
    corpus::write(&hyps, &rows).unwrap();
    let o = tyco(&["eval", "--hyps", path_str(&hyps), "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_is_repeatable_and_breaks_down_by_language() {
    let dir = TempDir::new().unwrap();
    let ck = trained(dir.path(), 4);
    let a = tyco(&["eval", "--checkpoint", path_str(&ck), "--split", "test", "--out", path_str(&dir.path().join("e1"))]);
    let b = tyco(&["eval", "--checkpoint", path_str(&ck), "--split", "test", "--out", path_str(&dir.path().join("e2"))]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(fs::read(dir.path().join("e1/eval_test.json")).unwrap(), fs::read(dir.path().join("e2/eval_test.json")).unwrap());
    assert_eq!(fs::read(dir.path().join("e1/hyps_test.tsv")).unwrap(), fs::read(dir.path().join("e2/hyps_test.tsv")).unwrap());
    let report: Value = serde_json::from_str(&stdout(&a)).unwrap();
    let keys: BTreeSet<&str> = report["per_language"].as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, BTreeSet::from(["de", "es", "fr", "ja"]));

    // a split file holding only some languages reports only those
    let rows: Vec<_> = corpus::read(&dir.path().join("e1/hyps_test.tsv")).unwrap().into_iter().filter(|u| u.lang == "de" || u.lang == "ja").collect();
    let subset = dir.path().join("dj.tsv");
    corpus::write(&subset, &rows).unwrap();
    let c = tyco(&["eval", "--checkpoint", path_str(&ck), "--split", path_str(&subset)]);
    assert!(c.status.success(), "{}", stderr(&c));
    let report: Value = serde_json::from_str(&stdout(&c)).unwrap();
    let keys: BTreeSet<&str> = report["per_language"].as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, BTreeSet::from(["de", "ja"]));
}

#[test]
fn other_checkpoint_version_is_a_version_error() {
    let dir = TempDir::new().unwrap();
    let ck = trained(dir.path(), 1);
    let mut bytes = fs::read(&ck).unwrap();
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    let bad = dir.path().join("v99.bin");
    fs::write(&bad, bytes).unwrap();
    let o = tyco(&["eval", "--checkpoint", path_str(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("version 99"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let o = tyco(&["eval", "--checkpoint", path_str(&dir.path().join("none.bin"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gate_dump_has_one_open_interval_record_per_utterance() {
    let dir = TempDir::new().unwrap();
    let ck = trained(dir.path(), 2);
    let o = tyco(&["inspect-gate", "--checkpoint", path_str(&ck), "--split", "test", "--lang", "ja"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!records.is_empty());
    for r in &records {
        assert_eq!(r["lang"], "ja");
        let gates = r["gates"].as_array().unwrap();
        assert!(!gates.is_empty());
        assert!(gates.iter().all(|g| (0.0..1.0).contains(&g.as_f64().unwrap()) && g.as_f64().unwrap() > 0.0));
        assert!(r["temperature"].as_f64().unwrap() >= 0.1);
    }
    let unknown = tyco(&["inspect-gate", "--checkpoint", path_str(&ck), "--lang", "xx"]);
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn zero_step_ablation_differs_only_in_the_prompt_row() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("abl");
    let cfg = write_config(dir.path(), "c.json", &tiny_config(&out, 0));
    let o = tyco(&["ablate", "--config", path_str(&cfg), "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = read_json(&out.join("ablation.json"));
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    let full = &rows[0];
    for row in &rows[1..] {
        let name = row["variant"].as_str().unwrap();
        if name == "w/o TA-Prompt" {
            // the prompt prefix changes decoding even without training
            continue;
        }
        assert_eq!(row["token_error"], full["token_error"], "{name}");
        assert_eq!(row["bleu"], full["bleu"], "{name}");
        assert_eq!(row["rel_token_error"], json!(0.0), "{name}");
    }
    assert!(stdout(&o).contains("w/o Residual"));
    let runs = fs::read_to_string(out.join("ablation_runs.jsonl")).unwrap();
    assert_eq!(runs.lines().count(), 8);
}

#[test]
fn relative_degradation_is_relative_to_full() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("abl");
    let cfg = write_config(dir.path(), "c.json", &tiny_config(&out, 3));
    let o = tyco(&["ablate", "--config", path_str(&cfg), "--axes", "dg,ta-prompt", "--seed", "1,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = read_json(&out.join("ablation.json"));
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let f = rows[0]["median_token_error"].as_f64().unwrap();
    for row in &rows[1..] {
        let v = row["median_token_error"].as_f64().unwrap();
        assert_eq!(row["token_error"].as_array().unwrap().len(), 2);
        if f > 0.0 {
            let rel = row["rel_token_error"].as_f64().unwrap();
            assert!((rel - (v - f) / f).abs() < 1e-12);
        }
    }
}

#[test]
fn budget_emits_one_record_per_fraction_variant_and_seed() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("b");
    let cfg = write_config(dir.path(), "c.json", &tiny_config(&out, 1));
    let o = tyco(&["budget", "--config", path_str(&cfg), "--fractions", "0.5,1.0", "--seed", "3,4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records: Vec<Value> = fs::read_to_string(out.join("budget.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2 * 2 * 2);
    let variants: BTreeSet<&str> = records.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(variants, BTreeSet::from(["flat", "hierarchical"]));
    for r in &records {
        let expected = if r["budget"] == json!(1.0) { 128 } else { 64 };
        assert_eq!(r["train_utterances"], json!(expected));
    }

    let single = tyco(&["budget", "--config", path_str(&cfg), "--fractions", "1.0", "--out", path_str(&dir.path().join("b1"))]);
    assert!(single.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("b1/budget.jsonl")).unwrap().lines().count(), 2);

    let empty = tyco(&["budget", "--config", path_str(&cfg), "--fractions", "0.001", "--out", path_str(&dir.path().join("b2"))]);
    assert_eq!(empty.status.code(), Some(1));
}

#[test]
fn rerunning_the_echoed_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("a");
    let cfg = write_config(dir.path(), "c.json", &tiny_config(&first, 3));
    assert!(tyco(&["train", "--config", path_str(&cfg), "--seed", "9"]).status.success());
    let echoed = first.join(commands::CONFIG_FILE);
    let second = dir.path().join("b");
    let o = tyco(&["train", "--config", path_str(&echoed), "--out", path_str(&second)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = commands::METRICS_FILE;
    assert_eq!(fs::read(first.join(metrics)).unwrap(), fs::read(second.join(metrics)).unwrap());
    // the checkpoints differ only in the recorded output directory
    let (ha, pa) = checkpoint::read(&first.join(commands::CHECKPOINT_FILE)).unwrap();
    let (hb, pb) = checkpoint::read(&second.join(commands::CHECKPOINT_FILE)).unwrap();
    assert_eq!(pa, pb);
    let (mut ha, mut hb): (Value, Value) = (serde_json::from_str(&ha).unwrap(), serde_json::from_str(&hb).unwrap());
    ha["config"]["out"] = Value::Null;
    hb["config"]["out"] = Value::Null;
    assert_eq!(ha, hb);
    let a = RunConfig::load(&echoed).unwrap().config;
    let b = RunConfig::load(&second.join(commands::CONFIG_FILE)).unwrap().config;
    assert_eq!(a.seed, 9);
    assert_eq!(RunConfig { out: b.out.clone(), ..a }, b);
}

#[test]
fn metrics_log_has_one_record_per_step() {
    let dir = TempDir::new().unwrap();
    let ck = trained(dir.path(), 3);
    let log = fs::read_to_string(ck.parent().unwrap().join(commands::METRICS_FILE)).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 6);
    let stages: Vec<u64> = records.iter().map(|r| r["stage"].as_u64().unwrap()).collect();
    assert_eq!(stages, [1, 1, 1, 2, 2, 2]);
}

#[test]
fn selftest_passes() {
    let o = tyco(&["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 8);
}

#[test]
fn shipped_resources_match_the_built_in_defaults() {
    let res = Path::new(env!("CARGO_MANIFEST_DIR")).join("resources");
    let from_files = RunConfig::load(&res.join("default.json")).unwrap().config;
    assert_eq!(from_files.load_registry().unwrap(), tyco_core::typology::Registry::default_languages());
    assert_eq!(from_files.load_templates().unwrap(), tyco_core::prompting::PromptTemplates::default());
    let builtin = RunConfig::default();
    assert_eq!(RunConfig { registry: None, templates: None, ..from_files }, builtin);
}
