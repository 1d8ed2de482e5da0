//! Seeded synthetic parallel corpus.
//!
//! Every utterance starts as a canonical English-like SVO clause
//!
//! ```text
//! det [adj] noun  verb  det [adj] noun  [adv]
//! ```
//!
//! and is realised in a source language through that language's lexicon,
//! optional compounding of adjective+noun, optional role suffixes on nouns and
//! its constituent order. Morphemes inside one source word are joined with
//! `+`. Every rule is invertible, so [`oracle_translate`] recovers the target
//! exactly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{mix, SeededRng};

/// Separator between morphemes of one source word.
pub const JOINER: char = '+';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum WordOrder {
    /// Subject, verb, object, adverb: the target order.
    #[default]
    Svo,
    /// Subject, object, adverb, verb.
    VerbFinal,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct SynthLanguageSpec {
    pub code: String,
    /// Content words (nouns, verbs, adjectives, adverbs) in the lexicon.
    pub lexicon_size: usize,
    /// Probability that a noun carries a role suffix.
    pub suffix_rate: f64,
    /// Probability that an adjective+noun pair is written as one compound.
    pub compound_rate: f64,
    pub order: WordOrder,
    /// Standard deviation of encoder stand-in noise.
    pub noise: f64,
    pub family: String,
    /// Fraction of content forms copied from the first language of the same family.
    pub shared_fraction: f64,
}

impl SynthLanguageSpec {
    /// Two related SVO fusional languages, a verb-final compounding one and a
    /// verb-final agglutinative one.
    pub fn defaults() -> Vec<SynthLanguageSpec> {
        let base = |code: &str, family: &str| SynthLanguageSpec {
            code: code.to_string(),
            lexicon_size: 40,
            suffix_rate: 0.0,
            compound_rate: 0.0,
            order: WordOrder::Svo,
            noise: 0.3,
            family: family.to_string(),
            shared_fraction: 0.6,
        };
        alloc::vec![
            base("fr", "romance"),
            base("es", "romance"),
            SynthLanguageSpec { compound_rate: 0.5, order: WordOrder::VerbFinal, noise: 0.35, ..base("de", "germanic") },
            SynthLanguageSpec { suffix_rate: 0.9, order: WordOrder::VerbFinal, noise: 0.4, ..base("ja", "japonic") },
        ]
    }

    fn validate(&self) -> Result<()> {
        let rate = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{}: {name} {v} outside [0, 1]", self.code)))
            }
        };
        rate("suffix_rate", self.suffix_rate)?;
        rate("compound_rate", self.compound_rate)?;
        rate("shared_fraction", self.shared_fraction)?;
        if self.lexicon_size < 4 {
            return Err(Error::Config(format!("{}: lexicon_size must be ≥ 4", self.code)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("{}: noise must be finite and ≥ 0", self.code)));
        }
        Ok(())
    }
}

/// Clause-level sampling rates shared by all languages.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct GrammarConfig {
    pub adjective_rate: f64,
    pub adverb_rate: f64,
    /// Held-out fraction for each of dev and test.
    pub heldout_fraction: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self { adjective_rate: 0.4, adverb_rate: 0.3, heldout_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Det,
    Adj,
    Noun,
    Verb,
    Adv,
}

const DETERMINERS: [&str; 2] = ["the", "a"];

/// Category sizes for a content lexicon of `n` words.
fn category_sizes(n: usize) -> [(Category, usize); 4] {
    let part = |f: f64| ((n as f64 * f) as usize).max(1);
    let nouns = part(0.4);
    let verbs = part(0.25);
    let adjs = part(0.2);
    let advs = n.saturating_sub(nouns + verbs + adjs).max(1);
    [(Category::Noun, nouns), (Category::Verb, verbs), (Category::Adj, adjs), (Category::Adv, advs)]
}

/// A meaning with its target-side word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub category: Category,
    pub target: String,
    /// Position within its category.
    pub rank: usize,
}

/// One language's realisation rules.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageLexicon {
    pub spec: SynthLanguageSpec,
    /// Source form per concept; `None` when the concept lies outside this
    /// language's lexicon.
    pub forms: Vec<Option<String>>,
    pub subject_suffix: String,
    pub object_suffix: String,
    inverse: BTreeMap<String, usize>,
}

impl LanguageLexicon {
    pub fn code(&self) -> &str {
        &self.spec.code
    }

    pub fn is_suffix(&self, morpheme: &str) -> bool {
        morpheme == self.subject_suffix || morpheme == self.object_suffix
    }

    /// Concept expressed by a stem.
    pub fn concept_of(&self, morpheme: &str) -> Option<usize> {
        self.inverse.get(morpheme).copied()
    }

    /// Every morpheme this language can emit.
    pub fn morphemes(&self) -> impl Iterator<Item = &str> {
        self.forms.iter().flatten().map(String::as_str).chain([self.subject_suffix.as_str(), self.object_suffix.as_str()])
    }
}

/// Concept inventory plus every language's lexicon.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub grammar: GrammarConfig,
    pub concepts: Vec<Concept>,
    pub languages: Vec<LanguageLexicon>,
}

impl SynthWorld {
    pub fn language(&self, code: &str) -> Result<&LanguageLexicon> {
        self.languages.iter().find(|l| l.spec.code == code).ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    /// Distinct source morphemes in first-appearance order.
    pub fn source_morphemes(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for l in &self.languages {
            for m in l.morphemes() {
                if seen.insert(m.to_string()) {
                    out.push(m.to_string());
                }
            }
        }
        out
    }

    pub fn target_words(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.target.clone()).collect()
    }

    fn concepts_of(&self, category: Category, limit: usize) -> Vec<usize> {
        self.concepts.iter().enumerate().filter(|(_, c)| c.category == category && c.rank < limit).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParallelUtterance {
    pub id: String,
    pub lang: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub world: SynthWorld,
    pub train: Vec<ParallelUtterance>,
    pub dev: Vec<ParallelUtterance>,
    pub test: Vec<ParallelUtterance>,
}

impl SynthCorpus {
    pub fn split(&self, split: Split) -> &[ParallelUtterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

const CONSONANTS: &[u8] = b"ptkbdgmnslrvzfhj";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_word(rng: &mut SeededRng, syllables: usize) -> String {
    let mut s = String::new();
    for _ in 0..syllables {
        s.push(CONSONANTS[rng.below(CONSONANTS.len())] as char);
        s.push(VOWELS[rng.below(VOWELS.len())] as char);
    }
    s
}

/// Draws a word not in `taken` and records it.
fn fresh_word(rng: &mut SeededRng, taken: &mut BTreeSet<String>, syllables: usize) -> String {
    loop {
        let extra = rng.below(2);
        let w = pseudo_word(rng, syllables + extra);
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn build_world(specs: &[SynthLanguageSpec], grammar: GrammarConfig, seed: u64) -> Result<SynthWorld> {
    let mut codes = BTreeSet::new();
    for s in specs {
        s.validate()?;
        if !codes.insert(s.code.as_str()) {
            return Err(Error::Config(format!("duplicate language code {:?}", s.code)));
        }
    }
    let max_lex = specs.iter().map(|s| s.lexicon_size).max().unwrap_or(4);
    let mut rng = SeededRng::derive(seed, "synth.concepts");
    let mut taken: BTreeSet<String> = DETERMINERS.iter().map(|s| s.to_string()).collect();
    let mut concepts: Vec<Concept> =
        DETERMINERS.iter().enumerate().map(|(rank, d)| Concept { category: Category::Det, target: d.to_string(), rank }).collect();
    for (category, n) in category_sizes(max_lex) {
        for rank in 0..n {
            concepts.push(Concept { category, target: fresh_word(&mut rng, &mut taken, 2), rank });
        }
    }

    let mut languages: Vec<LanguageLexicon> = Vec::new();
    let mut family_root: BTreeMap<String, usize> = BTreeMap::new();
    for spec in specs {
        let mut rng = SeededRng::derive(seed, &format!("synth.lexicon.{}", spec.code));
        let sizes = category_sizes(spec.lexicon_size);
        let in_lexicon = |c: &Concept| c.category == Category::Det || sizes.iter().any(|&(cat, n)| cat == c.category && c.rank < n);
        let mut forms: Vec<Option<String>> = alloc::vec![None; concepts.len()];
        let mut taken = BTreeSet::new();
        if let Some(&root) = family_root.get(&spec.family) {
            let root = &languages[root];
            let candidates: Vec<usize> = (0..concepts.len())
                .filter(|&i| concepts[i].category != Category::Det && in_lexicon(&concepts[i]) && root.forms[i].is_some())
                .collect();
            let content = (0..concepts.len()).filter(|&i| concepts[i].category != Category::Det && in_lexicon(&concepts[i])).count();
            let want = libm::ceil(spec.shared_fraction * content as f64) as usize;
            let mut order = candidates.clone();
            rng.shuffle(&mut order);
            for &i in order.iter().take(want) {
                let f = root.forms[i].clone().expect("filtered to present forms");
                taken.insert(f.clone());
                forms[i] = Some(f);
            }
        }
        for (i, c) in concepts.iter().enumerate() {
            if forms[i].is_none() && in_lexicon(c) {
                let syllables = if c.category == Category::Det { 1 } else { 2 };
                forms[i] = Some(fresh_word(&mut rng, &mut taken, syllables));
            }
        }
        let subject_suffix = fresh_word(&mut rng, &mut taken, 1);
        let object_suffix = fresh_word(&mut rng, &mut taken, 1);
        let inverse = forms.iter().enumerate().filter_map(|(i, f)| f.clone().map(|f| (f, i))).collect();
        family_root.entry(spec.family.clone()).or_insert(languages.len());
        languages.push(LanguageLexicon { spec: spec.clone(), forms, subject_suffix, object_suffix, inverse });
    }
    Ok(SynthWorld { grammar, concepts, languages })
}

/// A sampled clause as concept ids, in target order.
struct Clause {
    subject: Vec<usize>,
    verb: usize,
    object: Vec<usize>,
    adverb: Option<usize>,
}

fn sample_clause(world: &SynthWorld, lexicon_size: usize, rng: &mut SeededRng) -> Clause {
    let sizes = category_sizes(lexicon_size);
    let limit = |cat: Category| sizes.iter().find(|s| s.0 == cat).map_or(0, |s| s.1);
    let pick = |rng: &mut SeededRng, cat: Category| {
        let pool = world.concepts_of(cat, if cat == Category::Det { DETERMINERS.len() } else { limit(cat) });
        pool[rng.below(pool.len())]
    };
    let np = |rng: &mut SeededRng| {
        let mut v = alloc::vec![pick(rng, Category::Det)];
        if rng.bernoulli(world.grammar.adjective_rate) {
            v.push(pick(rng, Category::Adj));
        }
        v.push(pick(rng, Category::Noun));
        v
    };
    let subject = np(rng);
    let verb = pick(rng, Category::Verb);
    let object = np(rng);
    let adverb = rng.bernoulli(world.grammar.adverb_rate).then(|| pick(rng, Category::Adv));
    Clause { subject, verb, object, adverb }
}

fn realise_np(lex: &LanguageLexicon, np: &[usize], suffix: &str, rng: &mut SeededRng) -> Vec<String> {
    let form = |i: usize| lex.forms[i].clone().expect("sampled concepts are in the lexicon");
    let mut words = alloc::vec![form(np[0])];
    let noun = form(*np.last().expect("noun phrase has a noun"));
    let mut head = if np.len() == 3 {
        let adj = form(np[1]);
        if rng.bernoulli(lex.spec.compound_rate) {
            format!("{adj}{JOINER}{noun}")
        } else {
            words.push(adj);
            noun
        }
    } else {
        noun
    };
    if rng.bernoulli(lex.spec.suffix_rate) {
        head = format!("{head}{JOINER}{suffix}");
    }
    words.push(head);
    words
}

fn realise(world: &SynthWorld, lex: &LanguageLexicon, clause: &Clause, rng: &mut SeededRng) -> (Vec<String>, Vec<String>) {
    let tgt = |i: usize| world.concepts[i].target.clone();
    let mut target: Vec<String> = clause.subject.iter().map(|&i| tgt(i)).collect();
    target.push(tgt(clause.verb));
    target.extend(clause.object.iter().map(|&i| tgt(i)));
    target.extend(clause.adverb.map(tgt));

    let subject = realise_np(lex, &clause.subject, &lex.subject_suffix, rng);
    let object = realise_np(lex, &clause.object, &lex.object_suffix, rng);
    let verb = lex.forms[clause.verb].clone().expect("in lexicon");
    let adverb = clause.adverb.map(|i| lex.forms[i].clone().expect("in lexicon"));
    let mut source = subject;
    match lex.spec.order {
        WordOrder::Svo => {
            source.push(verb);
            source.extend(object);
            source.extend(adverb);
        }
        WordOrder::VerbFinal => {
            source.extend(object);
            source.extend(adverb);
            source.push(verb);
        }
    }
    (source, target)
}

/// Builds the world and `sizes[i]` utterances of language `i`, split into
/// train/dev/test by position.
pub fn generate_corpus(specs: &[SynthLanguageSpec], sizes: &[usize], grammar: GrammarConfig, seed: u64) -> Result<SynthCorpus> {
    if specs.len() != sizes.len() {
        return Err(Error::Config(format!("{} languages but {} sizes", specs.len(), sizes.len())));
    }
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("size for {} must be ≥ 1", specs[i].code)));
    }
    if !(0.0..0.5).contains(&grammar.heldout_fraction) {
        return Err(Error::Config("heldout_fraction must lie in [0, 0.5)".into()));
    }
    let world = build_world(specs, grammar, seed)?;
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (lex, &n) in world.languages.iter().zip(sizes) {
        let mut rng = SeededRng::derive(seed, &format!("synth.utterances.{}", lex.spec.code));
        let held = (n as f64 * grammar.heldout_fraction) as usize;
        for k in 0..n {
            let clause = sample_clause(&world, lex.spec.lexicon_size, &mut rng);
            let (source, target) = realise(&world, lex, &clause, &mut rng);
            let u = ParallelUtterance { id: format!("{}-{k:06}", lex.spec.code), lang: lex.spec.code.clone(), source, target };
            if k < n - 2 * held {
                train.push(u);
            } else if k < n - held {
                dev.push(u);
            } else {
                test.push(u);
            }
        }
    }
    Ok(SynthCorpus { world, train, dev, test })
}

/// Target-side clauses over the whole concept inventory, with no source
/// side: monolingual text for pretraining a decoder.
pub fn target_sentences(world: &SynthWorld, n: usize, seed: u64) -> Vec<Vec<String>> {
    let size = world.languages.iter().map(|l| l.spec.lexicon_size).max().unwrap_or(4);
    let mut rng = SeededRng::derive(seed, "synth.monolingual");
    (0..n)
        .map(|_| {
            let c = sample_clause(world, size, &mut rng);
            let mut ids = c.subject.clone();
            ids.push(c.verb);
            ids.extend(&c.object);
            ids.extend(c.adverb);
            ids.into_iter().map(|i| world.concepts[i].target.clone()).collect()
        })
        .collect()
}

/// Seeded nested subsample keeping `⌊fraction · n⌋` utterances.
///
/// Each utterance gets a priority from `(seed, id)`; the subset is the
/// lowest-priority prefix, so a smaller fraction is always contained in a
/// larger one. Input order is preserved.
pub fn budget_subset(items: &[ParallelUtterance], fraction: f64, seed: u64) -> Result<Vec<ParallelUtterance>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("budget fraction {fraction} outside (0, 1]")));
    }
    let keep = (items.len() as f64 * fraction) as usize;
    if keep == 0 {
        return Err(Error::Empty(format!("fraction {fraction} of {} utterances", items.len())));
    }
    let mut ranked: Vec<(u64, usize)> = items.iter().enumerate().map(|(i, u)| (mix(seed, u.id.as_bytes()), i)).collect();
    ranked.sort_unstable();
    let mut chosen: Vec<usize> = ranked[..keep].iter().map(|&(_, i)| i).collect();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| items[i].clone()).collect())
}

/// Splits source words into `(morpheme, continues_previous)` pairs.
pub fn source_morphemes(source: &[String]) -> Vec<(&str, bool)> {
    source.iter().flat_map(|w| w.split(JOINER).enumerate().map(|(i, m)| (m, i > 0))).collect()
}

/// Rule-based inverse: strip suffixes, split compounds, map stems back to
/// concepts and move a clause-final verb back after the subject.
pub fn oracle_translate(world: &SynthWorld, lang: &str, source: &[String]) -> Result<Vec<String>> {
    let lex = world.language(lang)?;
    let mut concepts = Vec::new();
    for (m, _) in source_morphemes(source) {
        if lex.is_suffix(m) {
            continue;
        }
        concepts.push(lex.concept_of(m).ok_or_else(|| Error::UnknownToken(m.to_string()))?);
    }
    if lex.spec.order == WordOrder::VerbFinal {
        let verb_pos = concepts.iter().rposition(|&c| world.concepts[c].category == Category::Verb);
        let subj_end = concepts.iter().position(|&c| world.concepts[c].category == Category::Noun);
        if let (Some(v), Some(s)) = (verb_pos, subj_end) {
            let verb = concepts.remove(v);
            concepts.insert(s + 1, verb);
        }
    }
    Ok(concepts.into_iter().map(|c| world.concepts[c].target.clone()).collect())
}
