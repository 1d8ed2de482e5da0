//! The twelve acceptance criteria, one PASS/FAIL line each. Exits nonzero
//! when any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::tiny_config;
use tempfile::TempDir;
use tyco::commands;
use tyco::config::RunConfig;
use tyco::experiment::{self, Axis, Cache, Setup};
use tyco::selftest::{self, Check};

const SEEDS: [u64; 3] = [1, 2, 3];
const FRACTIONS: [f64; 3] = [0.1, 0.5, 1.0];

struct Verdict {
    id: u8,
    name: &'static str,
    passed: bool,
    detail: String,
}

impl Verdict {
    fn print(&self) {
        let v = if self.passed { "PASS" } else { "FAIL" };
        println!("{v} criterion {:>2} {}: {}", self.id, self.name, self.detail);
    }
}

fn from_check(id: u8, name: &'static str, c: Check, seconds_limit: Option<f64>) -> Verdict {
    let in_time = seconds_limit.is_none_or(|s| c.seconds < s);
    let budget = seconds_limit.map_or(String::new(), |s| format!(", limit {s}s"));
    Verdict { id, name, passed: c.passed && in_time, detail: format!("value {:.3e} ({}), {} ({:.2}s{budget})", c.value, c.limit, c.detail, c.seconds) }
}

fn resource(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("resources").join(name)
}

fn fail(id: u8, name: &'static str, e: impl std::fmt::Display) -> Verdict {
    Verdict { id, name, passed: false, detail: format!("error: {e}") }
}

fn reproducibility(tmp: &Path) -> tyco::Result<Verdict> {
    let mut value = tiny_config(&tmp.join("repro-a"), 8);
    value["model"]["pretrain"]["steps"] = 20.into();
    let resolved = RunConfig::from_json(&value.to_string(), "<repro>")?;
    let mut logs = Vec::new();
    for dir in ["repro-a", "repro-b"] {
        // fresh caches so pretraining runs twice as well
        let s = commands::train(&resolved, Some(11), Some(tmp.join(dir)), &mut Cache::new(None), &mut |_| {})?;
        let path = s.out.join(commands::METRICS_FILE);
        logs.push(fs::read(&path).map_err(|source| tyco::Error::Io { path, source })?);
    }
    let same = logs[0] == logs[1];
    Ok(Verdict { id: 12, name: "reproducibility", passed: same && !logs[0].is_empty(), detail: format!("two runs, {} log bytes, identical: {same}", logs[0].len()) })
}

fn training_sanity(tmp: &Path, cache: &mut Cache) -> tyco::Result<Verdict> {
    let start = Instant::now();
    let resolved = RunConfig::load(&resource("default.json"))?;
    let per_lang = resolved.config.data.sizes.iter().min().copied().unwrap_or(0);
    let s = commands::train(&resolved, None, Some(tmp.join("default")), cache, &mut |_| {})?;
    let report = commands::eval(&s.out.join(commands::CHECKPOINT_FILE), "test", None)?;
    let secs = start.elapsed().as_secs_f64();
    let ter = report.overall.token_error;
    let langs: Vec<String> = report.per_language.iter().map(|(l, r)| format!("{l} {:.3}", r.token_error)).collect();
    Ok(Verdict {
        id: 8,
        name: "synthetic training sanity",
        passed: ter <= 0.15 && secs < 900.0 && per_lang >= 2000,
        detail: format!("held-out token error {ter:.4} (≤ 0.15), BLEU {:.1}, {} steps, per language [{}], {per_lang} utterances/language, {secs:.0}s (< 900s)", report.overall.bleu, s.steps, langs.join(", ")),
    })
}

fn sweep_setup(tmp: &Path) -> tyco::Result<Setup> {
    let mut config = RunConfig::load(&resource("sweep.json"))?.config;
    config.out = tmp.join("sweep");
    Setup::new(config)
}

fn ablation(setup: &Setup, cache: &mut Cache) -> tyco::Result<Verdict> {
    let table = experiment::ablate(setup, &[Axis::Dg, Axis::TaPrompt, Axis::TiHle], &SEEDS, cache, &mut |_| {})?;
    print!("{}", table.render());
    let full = table.rows[0].median_token_error;
    let worse: Vec<&str> = table.rows[1..].iter().filter(|r| r.median_token_error < full).map(|r| r.variant.as_str()).collect();
    let medians: Vec<String> = table.rows.iter().map(|r| format!("{} {:.4}", r.variant, r.median_token_error)).collect();
    let mut detail = format!("median token error over seeds {SEEDS:?}: {}", medians.join(", "));
    if !worse.is_empty() {
        detail.push_str(&format!("; full is beaten by {}", worse.join(", ")));
    }
    if !table.notes.is_empty() {
        detail.push_str(&format!("; flaky seeds: {}", table.notes.join("; ")));
    }
    Ok(Verdict { id: 9, name: "directional ablation", passed: worse.is_empty(), detail })
}

fn budget(setup: &Setup, cache: &mut Cache) -> tyco::Result<Verdict> {
    let records = experiment::budget_sweep(setup, &FRACTIONS, &SEEDS, cache, &mut |_| {})?;
    for r in &records {
        println!("  budget {:.1} {:<12} seed {} utterances {:>4}: token error {:.4}", r.budget, r.variant, r.seed, r.train_utterances, r.token_error);
    }
    let adv = experiment::budget_advantages(&records);
    let at = |f: f64| adv.iter().find(|(b, _)| *b == f).map(|a| a.1).unwrap_or(f64::NAN);
    let (low, high) = (at(0.1), at(1.0));
    let curve: Vec<String> = adv.iter().map(|(f, a)| format!("{f}: {a:+.4}")).collect();
    Ok(Verdict {
        id: 10,
        name: "directional budget",
        passed: low >= high,
        detail: format!("median flat − hierarchical token error by budget {} (needs 0.1 ≥ 1.0)", curve.join(", ")),
    })
}

fn main() -> ExitCode {
    let tmp = TempDir::new().expect("temp dir");
    let mut verdicts = vec![
        from_check(1, "CTC oracle equivalence", selftest::ctc_oracle(), Some(30.0)),
        from_check(2, "CTC normalization", selftest::ctc_normalization(), None),
        from_check(3, "gradient suite", selftest::gradient_suite(), Some(300.0)),
        from_check(4, "conditioning identities", selftest::conditioning_identities(), None),
        from_check(5, "wiring contracts", selftest::wiring_contracts(), None),
        from_check(6, "typology sharing", selftest::typology_sharing(), None),
        from_check(7, "stage arithmetic", selftest::stage_arithmetic(), None),
    ];
    for v in &verdicts {
        v.print();
    }

    let mut cache = Cache::default();
    let mut later = Vec::new();
    let v = training_sanity(tmp.path(), &mut cache).unwrap_or_else(|e| fail(8, "synthetic training sanity", e));
    v.print();
    later.push(v);
    match sweep_setup(tmp.path()) {
        Ok(setup) => {
            let v = ablation(&setup, &mut cache).unwrap_or_else(|e| fail(9, "directional ablation", e));
            v.print();
            later.push(v);
            let v = budget(&setup, &mut cache).unwrap_or_else(|e| fail(10, "directional budget", e));
            v.print();
            later.push(v);
            println!("  sweep runs trained: {}, decoder pretrainings: {}", cache.trained, cache.computed);
        }
        Err(e) => {
            later.push(fail(9, "directional ablation", &e));
            later.push(fail(10, "directional budget", &e));
        }
    }
    let v = from_check(11, "metrics", selftest::metrics_oracles(), None);
    v.print();
    later.push(v);
    let v = reproducibility(tmp.path()).unwrap_or_else(|e| fail(12, "reproducibility", e));
    v.print();
    later.push(v);
    verdicts.extend(later);

    println!();
    println!("acceptance summary");
    for v in &verdicts {
        v.print();
    }
    let failed = verdicts.iter().filter(|v| !v.passed).count();
    println!("{} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
