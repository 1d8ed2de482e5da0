//! Subcommand bodies. Each returns its result and writes its artifacts; the
//! binary only parses arguments and prints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use tyco_core::metrics::{evaluate, EvalReport};
use tyco_core::model::train::{evaluate_model, train_run, StepRecord};
use tyco_core::model::{GateTrace, Model};
use tyco_core::prompting::{prompt_for, PromptSpec};
use tyco_core::synthdata::ParallelUtterance;

use crate::checkpoint::{self, Header};
use crate::config::{Resolved, RunConfig};
use crate::corpus;
use crate::error::{Error, Result};
use crate::experiment::{self, AblationTable, Axis, Cache, RunScore, Setup};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

/// JSON Lines rendering of serializable records.
pub fn jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

/// Applies command-line overrides and echoes the result into its output
/// directory.
fn prepare_run(mut config: RunConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(o) = out {
        config.out = o;
    }
    create_dir(&config.out)?;
    write_text(&config.out.join(CONFIG_FILE), &config.to_json())?;
    Ok(config)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub steps: usize,
    pub last: Option<StepRecord>,
    pub train_utterances: usize,
}

/// Trains both stages, streaming the metrics log, then writes the
/// checkpoint. `progress` receives human-readable status lines.
pub fn train(resolved: &Resolved, seed: Option<u64>, out: Option<PathBuf>, cache: &mut Cache, progress: &mut dyn FnMut(&str)) -> Result<TrainSummary> {
    let config = prepare_run(resolved.config.clone(), seed, out)?;
    let setup = Setup::new(config)?;
    let cfg = &setup.config;
    let mut model = setup.model(cfg.variants, cfg.seed)?;
    let every = (cfg.model.pretrain.steps / 10).max(1);
    cache.provide(&setup, &mut model, &mut |s, l| {
        if s % every == 0 {
            progress(&format!("decoder pretraining step {s}: loss {l:.4}"));
        }
    })?;
    let train = setup.train_items(cfg.seed)?;
    let items = model.prepare(&train)?;
    let path = cfg.out.join(METRICS_FILE);
    let mut log = BufWriter::new(fs::File::create(&path).map_err(Error::io(&path))?);
    let mut write_err = None;
    let total = cfg.schedule.total_steps();
    let every = (total / 20).max(1);
    let records = train_run(&mut model, &items, &cfg.schedule, cfg.seed, &mut |r| {
        if write_err.is_none() {
            let line = serde_json::to_string(r).expect("records serialize");
            write_err = writeln!(log, "{line}").err();
        }
        if r.step % every == 0 || r.step + 1 == total {
            progress(&format!("step {} (stage {}): total {:.4} ce {:.4} ctc_src {:.4} ctc_tgt {:.4}", r.step, r.stage, r.total, r.ce, r.ctc_src, r.ctc_tgt));
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::Io { path, source: e });
    }
    log.flush().map_err(Error::io(&path))?;
    let header = serde_json::to_string(&setup.header()).expect("header serializes");
    checkpoint::write(&cfg.out.join(CHECKPOINT_FILE), &header, &checkpoint::model_params(&model, None))?;
    Ok(TrainSummary { out: cfg.out.clone(), steps: records.len(), last: records.last().copied(), train_utterances: train.len() })
}

/// A trained model rebuilt from its checkpoint.
pub struct Loaded {
    pub setup: Setup,
    pub model: Model,
}

pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let (header, params) = checkpoint::read(path)?;
    let de = &mut serde_json::Deserializer::from_str(&header);
    let header: Header = serde_path_to_error::deserialize(de).map_err(|e| Error::Incompatible(format!("header at `{}`: {}", e.path(), e.inner())))?;
    let setup = Setup::from_header(header)?;
    let mut model = setup.model(setup.config.variants, setup.config.seed)?;
    checkpoint::apply(&mut model, &params, true)?;
    Ok(Loaded { setup, model })
}

/// `train`, `dev`, `test` or a corpus file.
pub fn resolve_split(setup: &Setup, split: &str) -> Result<Vec<ParallelUtterance>> {
    match experiment::parse_split(split) {
        Ok(s) => Ok(setup.corpus.split(s).to_vec()),
        Err(e) => {
            let p = Path::new(split);
            if p.exists() {
                corpus::read(p)
            } else {
                Err(e)
            }
        }
    }
}

fn split_tag(split: &str) -> String {
    Path::new(split).file_stem().map_or_else(|| split.to_string(), |s| s.to_string_lossy().into_owned())
}

/// Greedy decoding of a split with the checkpoint's prompts.
pub fn eval(checkpoint: &Path, split: &str, out: Option<&Path>) -> Result<EvalReport> {
    let Loaded { setup, model } = load_checkpoint(checkpoint)?;
    let items = resolve_split(&setup, split)?;
    let prepared = model.prepare(&items)?;
    let (hyps, report) = evaluate_model(&model, &prepared)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        let tag = split_tag(split);
        write_text(&dir.join(format!("eval_{tag}.json")), &report_json(&report))?;
        let rows: Vec<ParallelUtterance> = items.iter().zip(hyps).map(|(u, h)| ParallelUtterance { target: h, ..u.clone() }).collect();
        corpus::write(&dir.join(format!("hyps_{tag}.tsv")), &rows)?;
    }
    Ok(report)
}

/// Scores a hypothesis file (corpus format, hypothesis in the target
/// column) against references, matching lines by id.
pub fn score_hypotheses(refs: &[ParallelUtterance], hyps: &[ParallelUtterance]) -> Result<EvalReport> {
    let by_id: std::collections::BTreeMap<&str, &ParallelUtterance> = hyps.iter().map(|h| (h.id.as_str(), h)).collect();
    if by_id.len() != hyps.len() {
        return Err(Error::Invalid("hypothesis file repeats an id".into()));
    }
    let mut h = Vec::with_capacity(refs.len());
    for r in refs {
        let hyp = by_id.get(r.id.as_str()).ok_or_else(|| Error::Invalid(format!("no hypothesis for `{}`", r.id)))?;
        h.push(hyp.target.clone());
    }
    if hyps.len() != refs.len() {
        return Err(Error::Invalid(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let r: Vec<Vec<String>> = refs.iter().map(|u| u.target.clone()).collect();
    let langs: Vec<String> = refs.iter().map(|u| u.lang.clone()).collect();
    Ok(evaluate(&h, &r, &langs)?)
}

pub fn report_json(r: &EvalReport) -> String {
    serde_json::to_string_pretty(r).expect("report serializes")
}

/// Trains the full model and each axis variant, writing `ablation.json` and
/// `ablation_runs.jsonl`.
pub fn ablate(resolved: &Resolved, axes: &[Axis], seeds: &[u64], out: Option<PathBuf>, cache: &mut Cache, progress: &mut dyn FnMut(&str)) -> Result<AblationTable> {
    let config = prepare_run(resolved.config.clone(), None, out)?;
    let setup = Setup::new(config)?;
    let mut runs = Vec::new();
    let table = experiment::ablate(&setup, axes, seeds, cache, &mut |s| {
        progress(&format!("{} seed {}: token error {:.4} BLEU {:.2}", s.variant, s.seed, s.token_error, s.bleu));
        runs.push(s.clone());
    })?;
    let dir = &setup.config.out;
    write_text(&dir.join("ablation.json"), &serde_json::to_string_pretty(&table).expect("table serializes"))?;
    write_text(&dir.join("ablation_runs.jsonl"), &jsonl(&runs))?;
    Ok(table)
}

/// Runs the budget sweep, writing one record per run to `budget.jsonl`.
pub fn budget(resolved: &Resolved, fractions: &[f64], seeds: &[u64], out: Option<PathBuf>, cache: &mut Cache, progress: &mut dyn FnMut(&str)) -> Result<Vec<RunScore>> {
    let config = prepare_run(resolved.config.clone(), None, out)?;
    let setup = Setup::new(config)?;
    let records = experiment::budget_sweep(&setup, fractions, seeds, cache, &mut |s| {
        progress(&format!("budget {} {} seed {}: token error {:.4}", s.budget, s.variant, s.seed, s.token_error));
    })?;
    write_text(&setup.config.out.join("budget.jsonl"), &jsonl(&records))?;
    Ok(records)
}

/// Per-utterance gate records as JSON Lines.
#[derive(Debug, Clone, Serialize)]
pub struct GateRecord {
    pub id: String,
    pub lang: String,
    pub temperature: Option<f64>,
    pub gamma_abs_mean: f64,
    pub beta_abs_mean: f64,
    pub gates: Vec<f64>,
}

impl From<GateTrace> for GateRecord {
    fn from(t: GateTrace) -> Self {
        Self { id: t.id, lang: t.lang, temperature: t.temperature, gamma_abs_mean: t.gamma_abs_mean, beta_abs_mean: t.beta_abs_mean, gates: t.gates }
    }
}

pub fn inspect_gate(checkpoint: &Path, split: &str, lang: Option<&str>) -> Result<Vec<GateRecord>> {
    let Loaded { setup, model } = load_checkpoint(checkpoint)?;
    if let Some(code) = lang {
        setup.registry.lookup_profile(code)?;
    }
    let items = resolve_split(&setup, split)?;
    items
        .iter()
        .filter(|u| lang.is_none_or(|l| u.lang == l))
        .map(|u| Ok(model.inspect_gate(&model.prepare_one(u)?)?.into()))
        .collect()
}

/// The prompt the config's variant assembles for `lang`.
pub fn prompt(config: &RunConfig, lang: &str) -> Result<PromptSpec> {
    let registry = config.load_registry()?;
    let templates = config.load_templates()?;
    Ok(prompt_for(config.variants.prompt, lang, &registry, &templates))
}

/// Writes `train.tsv`, `dev.tsv` and `test.tsv`; returns their sizes.
pub fn gen_data(config: &RunConfig, out: &Path) -> Result<[usize; 3]> {
    let setup = Setup::new(config.clone())?;
    create_dir(out)?;
    let c = &setup.corpus;
    for (name, items) in [("train", &c.train), ("dev", &c.dev), ("test", &c.test)] {
        corpus::write(&out.join(format!("{name}.tsv")), items)?;
    }
    write_text(&out.join(CONFIG_FILE), &config.to_json())?;
    Ok([c.train.len(), c.dev.len(), c.test.len()])
}
