//! Building, training and scoring models from a run config.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use tyco_core::metrics::EvalReport;
use tyco_core::model::train::{evaluate_model, train_run, StepRecord};
use tyco_core::model::{Model, Variants};
use tyco_core::params::Group;
use tyco_core::prompting::PromptTemplates;
use tyco_core::rng::mix;
use tyco_core::synthdata::{budget_subset, generate_corpus, ParallelUtterance, Split, SynthCorpus};
use tyco_core::typology::Registry;

use crate::checkpoint::{self, Header, NamedParam};
use crate::config::{RegistryFile, RunConfig};
use crate::error::{Error, Result};

/// Everything a run needs besides its variant and seed.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: RunConfig,
    pub registry: Registry,
    pub templates: PromptTemplates,
    pub corpus: SynthCorpus,
}

impl Setup {
    /// Loads the config's resource files and generates its corpus.
    pub fn new(config: RunConfig) -> Result<Self> {
        let registry = config.load_registry()?;
        let templates = config.load_templates()?;
        Self::with_resources(config, registry, templates)
    }

    pub fn with_resources(config: RunConfig, registry: Registry, templates: PromptTemplates) -> Result<Self> {
        config.validate()?;
        for spec in &config.data.languages {
            if registry.index_of(&spec.code).is_none() {
                return Err(Error::Invalid(format!("data language `{}` is not in the registry", spec.code)));
            }
        }
        let corpus = generate_corpus(&config.data.languages, &config.data.sizes, config.data.grammar, config.data.seed)?;
        Ok(Self { config, registry, templates, corpus })
    }

    pub fn from_header(header: Header) -> Result<Self> {
        let registry = header.registry.to_registry()?;
        Self::with_resources(header.config, registry, header.templates)
    }

    pub fn header(&self) -> Header {
        Header { config: self.config.clone(), registry: RegistryFile::from_registry(&self.registry), templates: self.templates.clone() }
    }

    /// The training split cut to the config budget with `seed`.
    pub fn train_items(&self, seed: u64) -> Result<Vec<ParallelUtterance>> {
        Ok(budget_subset(&self.corpus.train, self.config.budget, seed)?)
    }

    pub fn split(&self, name: &str) -> Result<&[ParallelUtterance]> {
        Ok(self.corpus.split(parse_split(name)?))
    }

    pub fn model(&self, variants: Variants, seed: u64) -> Result<Model> {
        Ok(Model::new(self.config.model, variants, self.registry.clone(), self.templates.clone(), &self.corpus.world, seed)?)
    }

    /// Identifies everything the pretrained decoder base depends on.
    pub fn pretrain_key(&self) -> String {
        let key = serde_json::json!({
            "model": self.config.model,
            "data": self.config.data,
            "registry": RegistryFile::from_registry(&self.registry),
            "templates": self.templates,
        });
        key.to_string()
    }
}

pub fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(Error::Invalid(format!("unknown split `{other}` (expected train, dev or test)"))),
    }
}

/// Pretrained decoder bases, kept in memory and optionally on disk, plus
/// the scores of finished sweep runs.
#[derive(Debug, Default)]
pub struct Cache {
    dir: Option<PathBuf>,
    memory: BTreeMap<String, Vec<NamedParam>>,
    scores: BTreeMap<String, EvalReport>,
    /// Number of pretraining runs actually performed.
    pub computed: usize,
    /// Number of sweep runs actually trained.
    pub trained: usize,
}

impl Cache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir, ..Self::default() }
    }

    fn file(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("decoder-{:016x}.bin", mix(0, key.as_bytes()))))
    }

    /// Gives `model` the pretrained decoder base for `setup`, computing it on
    /// a miss.
    pub fn provide(&mut self, setup: &Setup, model: &mut Model, progress: &mut dyn FnMut(usize, f64)) -> Result<()> {
        if setup.config.model.pretrain.steps == 0 {
            return Ok(());
        }
        let key = setup.pretrain_key();
        if !self.memory.contains_key(&key) {
            if let Some(params) = self.load_file(&key)? {
                self.memory.insert(key.clone(), params);
            }
        }
        if let Some(params) = self.memory.get(&key) {
            return checkpoint::apply(model, params, false);
        }
        model.pretrain_decoder(&setup.corpus.world, progress)?;
        self.computed += 1;
        let params = checkpoint::model_params(model, Some(Group::DecoderBase));
        if let Some(path) = self.file(&key) {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(Error::io(dir))?;
            }
            checkpoint::write(&path, &key, &params)?;
        }
        self.memory.insert(key, params);
        Ok(())
    }

    fn load_file(&self, key: &str) -> Result<Option<Vec<NamedParam>>> {
        let Some(path) = self.file(key).filter(|p| p.exists()) else { return Ok(None) };
        let (header, params) = checkpoint::read(&path)?;
        // a hash collision or stale file is treated as a miss
        Ok((header == key).then_some(params))
    }
}

/// Result of one training run scored on a held-out split.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: Vec<StepRecord>,
    pub report: EvalReport,
    pub hypotheses: Vec<Vec<String>>,
    pub model: Model,
}

/// Builds a model, trains it on `train`, and scores it on `heldout`.
pub fn train_and_eval(
    setup: &Setup,
    variants: Variants,
    seed: u64,
    train: &[ParallelUtterance],
    heldout: &[ParallelUtterance],
    cache: &mut Cache,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<RunOutcome> {
    let mut model = setup.model(variants, seed)?;
    cache.provide(setup, &mut model, &mut |_, _| {})?;
    let items = model.prepare(train)?;
    let log = train_run(&mut model, &items, &setup.config.schedule, seed, on_step)?;
    let test = model.prepare(heldout)?;
    let (hypotheses, report) = evaluate_model(&model, &test)?;
    Ok(RunOutcome { log, report, hypotheses, model })
}

/// Held-out report of one run, reusing an identical earlier run.
pub fn scored_run(setup: &Setup, variants: Variants, seed: u64, train: &[ParallelUtterance], cache: &mut Cache) -> Result<EvalReport> {
    let ids: Vec<&str> = train.iter().map(|u| u.id.as_str()).collect();
    let key = serde_json::json!({
        "base": setup.pretrain_key(),
        "schedule": setup.config.schedule,
        "variants": variants,
        "seed": seed,
        "train": mix(0, ids.join("\n").as_bytes()),
    })
    .to_string();
    if let Some(r) = cache.scores.get(&key) {
        return Ok(r.clone());
    }
    let out = train_and_eval(setup, variants, seed, train, &setup.corpus.test, cache, &mut |_| {})?;
    cache.trained += 1;
    cache.scores.insert(key, out.report.clone());
    Ok(out.report)
}

/// One ablation axis: a single component removed or replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Axis {
    /// Static gate instead of the dynamic frame gate.
    Dg,
    /// Flat language table instead of hierarchical typology encoding.
    TiHle,
    /// Language-aware prompt instead of the typology-aware one.
    TaPrompt,
    Morph,
    Reorder,
    Family,
    Residual,
}

impl Axis {
    pub const ALL: [Axis; 7] = [Axis::Dg, Axis::TiHle, Axis::TaPrompt, Axis::Morph, Axis::Reorder, Axis::Family, Axis::Residual];

    pub fn label(self) -> &'static str {
        match self {
            Axis::Dg => "w/o DG",
            Axis::TiHle => "w/o TI-HLE",
            Axis::TaPrompt => "w/o TA-Prompt",
            Axis::Morph => "w/o Morph",
            Axis::Reorder => "w/o Reorder",
            Axis::Family => "w/o Family",
            Axis::Residual => "w/o Residual",
        }
    }

    /// Accepts `dg`, `w/o-DG`, `w/o TI-HLE`, `ta_prompt` and similar,
    /// ignoring case and punctuation.
    pub fn parse(s: &str) -> Result<Axis> {
        let lower = s.trim().to_ascii_lowercase();
        let body = lower.strip_prefix("w/o").unwrap_or(&lower);
        let key: String = body.chars().filter(char::is_ascii_alphanumeric).collect();
        let axis = match key.as_str() {
            "dg" | "gate" => Axis::Dg,
            "tihle" | "hle" | "encoding" => Axis::TiHle,
            "taprompt" | "prompt" => Axis::TaPrompt,
            "morph" | "morphology" => Axis::Morph,
            "reorder" | "reordering" => Axis::Reorder,
            "family" => Axis::Family,
            "residual" => Axis::Residual,
            _ => return Err(Error::Invalid(format!("unknown ablation axis `{s}`"))),
        };
        Ok(axis)
    }

    pub fn apply(self, v: Variants) -> Variants {
        use tyco_core::conditioning::GateVariant;
        use tyco_core::model::Encoding;
        use tyco_core::prompting::PromptVariant;
        use tyco_core::typology::Channel;
        match self {
            Axis::Dg => Variants { gate: GateVariant::Static, ..v },
            Axis::TiHle => Variants { encoding: Encoding::Flat, channel_drop: None, ..v },
            Axis::TaPrompt => Variants { prompt: PromptVariant::LanguageAware, ..v },
            Axis::Morph => Variants { channel_drop: Some(Channel::Morphology), ..v },
            Axis::Reorder => Variants { channel_drop: Some(Channel::Reordering), ..v },
            Axis::Family => Variants { channel_drop: Some(Channel::Family), ..v },
            Axis::Residual => Variants { channel_drop: Some(Channel::Residual), ..v },
        }
    }
}

/// Comma-separated axes.
pub fn parse_axes(s: &str) -> Result<Vec<Axis>> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let a = Axis::parse(part)?;
        if !out.contains(&a) {
            out.push(a);
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid("no ablation axes given".into()));
    }
    Ok(out)
}

/// Scores of one run in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub variant: String,
    pub seed: u64,
    pub budget: f64,
    pub train_utterances: usize,
    pub token_error: f64,
    pub bleu: f64,
    pub exact_match: f64,
}

impl RunScore {
    fn new(variant: &str, seed: u64, budget: f64, train_utterances: usize, r: &EvalReport) -> Self {
        Self {
            variant: variant.to_string(),
            seed,
            budget,
            train_utterances,
            token_error: r.overall.token_error,
            bleu: r.overall.bleu,
            exact_match: r.overall.exact_match,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub token_error: Vec<f64>,
    pub bleu: Vec<f64>,
    pub median_token_error: f64,
    pub median_bleu: f64,
    /// `(variant − full) / full` on median token error; absent when full is 0.
    pub rel_token_error: Option<f64>,
    /// `(variant − full) / full` on median BLEU; absent when full is 0.
    pub rel_bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    /// The full model first, then one row per axis.
    pub rows: Vec<AblationRow>,
    /// Seeds on which a variant beat the full model.
    pub notes: Vec<String>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Fixed-width text rendering.
    pub fn render(&self) -> String {
        let rel = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{:+.1}%", 100.0 * v));
        let mut s = format!("{:<14} {:>10} {:>10} {:>10} {:>10}\n", "variant", "TER", "rel TER", "BLEU", "rel BLEU");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<14} {:>10.4} {:>10} {:>10.2} {:>10}\n",
                r.variant,
                r.median_token_error,
                rel(r.rel_token_error),
                r.median_bleu,
                rel(r.rel_bleu)
            ));
        }
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        s
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn relative(variant: f64, full: f64) -> Option<f64> {
    (full != 0.0).then(|| (variant - full) / full)
}

/// Trains the configured model and each axis variant under every seed and
/// scores them on the test split. `on_run` sees each run as it finishes.
pub fn ablate(setup: &Setup, axes: &[Axis], seeds: &[u64], cache: &mut Cache, on_run: &mut dyn FnMut(&RunScore)) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Invalid("no seeds given".into()));
    }
    let full = setup.config.variants;
    let mut variants: Vec<(String, Variants)> = vec![("full".to_string(), full)];
    variants.extend(axes.iter().map(|a| (a.label().to_string(), a.apply(full))));
    let mut scores: Vec<Vec<RunScore>> = vec![Vec::new(); variants.len()];
    for &seed in seeds {
        let train = setup.train_items(seed)?;
        for (k, (name, v)) in variants.iter().enumerate() {
            let report = scored_run(setup, *v, seed, &train, cache)?;
            let s = RunScore::new(name, seed, setup.config.budget, train.len(), &report);
            on_run(&s);
            scores[k].push(s);
        }
    }
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for (k, (name, _)) in variants.iter().enumerate() {
        let ter: Vec<f64> = scores[k].iter().map(|s| s.token_error).collect();
        let bleu: Vec<f64> = scores[k].iter().map(|s| s.bleu).collect();
        if k > 0 {
            for (s, f) in scores[k].iter().zip(&scores[0]) {
                if s.token_error < f.token_error {
                    notes.push(format!("seed {}: {name} token error {:.4} below full {:.4}", s.seed, s.token_error, f.token_error));
                }
            }
        }
        rows.push(AblationRow { variant: name.clone(), median_token_error: median(&ter), median_bleu: median(&bleu), token_error: ter, bleu, rel_token_error: None, rel_bleu: None });
    }
    let (ft, fb) = (rows[0].median_token_error, rows[0].median_bleu);
    for r in &mut rows {
        r.rel_token_error = relative(r.median_token_error, ft);
        r.rel_bleu = relative(r.median_bleu, fb);
    }
    Ok(AblationTable { seeds: seeds.to_vec(), rows, notes })
}

/// Comma-separated fractions in (0, 1].
pub fn parse_fractions(s: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let f: f64 = part.trim().parse().map_err(|_| Error::Invalid(format!("bad fraction `{part}`")))?;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Invalid(format!("fraction {f} outside (0, 1]")));
        }
        out.push(f);
    }
    if out.is_empty() {
        return Err(Error::Invalid("no budget fractions given".into()));
    }
    Ok(out)
}

/// Comma-separated seeds.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<u64>().map_err(|_| Error::Invalid(format!("bad seed `{p}`"))))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(Error::Invalid("no seeds given".into()));
    }
    Ok(seeds)
}

pub const BUDGET_VARIANTS: [&str; 2] = ["hierarchical", "flat"];

/// For each seed and fraction, trains the configured model and its flat-label
/// baseline on the same nested subset. Returns one record per run.
pub fn budget_sweep(setup: &Setup, fractions: &[f64], seeds: &[u64], cache: &mut Cache, on_run: &mut dyn FnMut(&RunScore)) -> Result<Vec<RunScore>> {
    if seeds.is_empty() {
        return Err(Error::Invalid("no seeds given".into()));
    }
    let hier = setup.config.variants;
    let flat = Axis::TiHle.apply(hier);
    let mut out = Vec::with_capacity(fractions.len() * 2 * seeds.len());
    for &seed in seeds {
        for &f in fractions {
            let train = budget_subset(&setup.corpus.train, f, seed)?;
            for (name, v) in BUDGET_VARIANTS.iter().zip([hier, flat]) {
                let report = scored_run(setup, v, seed, &train, cache)?;
                let s = RunScore::new(name, seed, f, train.len(), &report);
                on_run(&s);
                out.push(s);
            }
        }
    }
    Ok(out)
}

/// Median over seeds of `flat − hierarchical` token error at each fraction;
/// positive means hierarchical encoding is ahead.
pub fn budget_advantages(records: &[RunScore]) -> Vec<(f64, f64)> {
    let mut fractions: Vec<f64> = records.iter().map(|r| r.budget).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    fractions
        .into_iter()
        .map(|f| {
            let at = |v: &str, seed: u64| records.iter().find(|r| r.budget == f && r.variant == v && r.seed == seed).map(|r| r.token_error);
            let mut seeds: Vec<u64> = records.iter().filter(|r| r.budget == f).map(|r| r.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            let diffs: Vec<f64> = seeds.iter().filter_map(|&s| Some(at("flat", s)? - at("hierarchical", s)?)).collect();
            (f, median(&diffs))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_parse_in_several_spellings() {
        for (s, a) in [("dg", Axis::Dg), ("w/o DG", Axis::Dg), ("w/o-TI-HLE", Axis::TiHle), ("ta_prompt", Axis::TaPrompt), ("Residual", Axis::Residual)] {
            assert_eq!(Axis::parse(s).unwrap(), a);
        }
        for a in Axis::ALL {
            assert_eq!(Axis::parse(a.label()).unwrap(), a);
        }
        assert!(Axis::parse("w/o Magic").is_err());
    }

    #[test]
    fn fractions_and_seeds_parse() {
        assert_eq!(parse_fractions("0.1, 0.5,1").unwrap(), vec![0.1, 0.5, 1.0]);
        assert!(parse_fractions("0").is_err());
        assert!(parse_fractions("1.5").is_err());
        assert_eq!(parse_seeds("1,2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn median_of_odd_and_even_lists() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn advantages_pair_runs_by_seed() {
        let r = |variant: &str, seed, budget, token_error| RunScore { variant: variant.into(), seed, budget, train_utterances: 1, token_error, bleu: 0.0, exact_match: 0.0 };
        let recs = vec![
            r("hierarchical", 1, 0.1, 0.2),
            r("flat", 1, 0.1, 0.5),
            r("hierarchical", 2, 0.1, 0.4),
            r("flat", 2, 0.1, 0.3),
            r("hierarchical", 3, 0.1, 0.1),
            r("flat", 3, 0.1, 0.3),
            r("hierarchical", 1, 1.0, 0.1),
            r("flat", 1, 1.0, 0.1),
        ];
        let adv = budget_advantages(&recs);
        assert_eq!(adv.len(), 2);
        assert!((adv[0].1 - 0.2).abs() < 1e-12);
        assert_eq!(adv[1], (1.0, 0.0));
    }
}
