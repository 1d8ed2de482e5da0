//! Full pipeline: encoder stand-in, adapter, language encoding, gated FiLM,
//! dual CTC heads, language classifier and the toy decoder.
//!
//! Training wiring: the source CTC head reads modulated frames, while the
//! target CTC head and the decoder read the unmodulated adapter output.
//! Inference only runs the adapter and the decoder behind the language's
//! prompt.

pub mod decoder;
pub mod objective;
pub mod train;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::adapter::{Adapter, AdapterConfig, EncoderConfig, EncoderStandin, SourceStem};
use crate::array::Array;
use crate::conditioning::{modulate, FilmGenerator, Gate, GateVariant, FILM_HIDDEN};
use crate::ctc::{argmax, ctc_node, min_frames, CtcBranchHeads};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{accumulate, Adam, Binder, Group, GroupSet, ParamStore};
use crate::prompting::{prompt_for, PromptTemplates, PromptVariant};
use crate::rng::{mix, SeededRng};
use crate::synthdata::{source_morphemes, target_sentences, ParallelUtterance, SynthWorld};
use crate::typology::{Channel, FlatEncoder, Registry, TypologyDims, TypologyEncoder};
use crate::vocab::Vocab;

pub use decoder::{lora_forward, DecoderConfig, LoraAdapter, LoraConfig, LoraLinear, LoraMode, PromptStates, ToyDecoder};
pub use objective::{stage_loss, trainable_groups, CtcWeights, Stage, StageObjective};

pub const BLANK_TOKEN: &str = "<blank>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Encoding {
    #[default]
    Hierarchical,
    /// One flat table indexed by language.
    Flat,
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct Variants {
    pub gate: GateVariant,
    pub encoding: Encoding,
    pub prompt: PromptVariant,
    pub channel_drop: Option<Channel>,
}

/// Denoising pretraining of the decoder base before it is frozen.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Chance of a random filler row after each prefix row.
    pub filler_rate: f64,
    /// Chance that one word of the prefix is moved elsewhere.
    pub displace_rate: f64,
    pub noise: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch: 16, lr: 3e-3, filler_rate: 0.3, displace_rate: 0.5, noise: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub typology: TypologyDims,
    pub film_hidden: usize,
    pub decoder: DecoderConfig,
    pub pretrain: PretrainConfig,
    /// Seeds the frozen parts and utterance noise, independent of the run seed.
    pub base_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            encoder,
            adapter: AdapterConfig::toy(encoder.d_in, 64, 64),
            typology: TypologyDims::default(),
            film_hidden: FILM_HIDDEN,
            decoder: DecoderConfig::default(),
            pretrain: PretrainConfig::default(),
            base_seed: 17,
        }
    }
}

impl ModelConfig {
    /// Small widths for fast tests.
    pub fn tiny() -> Self {
        let encoder = EncoderConfig { d_in: 8, ..EncoderConfig::default() };
        Self {
            encoder,
            adapter: AdapterConfig { ffn_mult: 2, ..AdapterConfig::toy(8, 16, 16) },
            typology: TypologyDims { morphology: 8, reordering: 8, family: 8, residual: 8, fused: 16 },
            film_hidden: 32,
            decoder: DecoderConfig { blocks: 1, ffn_mult: 2, lora: LoraConfig { rank: 2, alpha: 8.0, dropout: 0.1 }, max_decode: 12 },
            pretrain: PretrainConfig { steps: 0, ..PretrainConfig::default() },
            base_seed: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        if self.adapter.d_in != self.encoder.d_in {
            return Err(Error::Config(format!("adapter d_in {} but encoder width {}", self.adapter.d_in, self.encoder.d_in)));
        }
        if self.encoder.frames_per_stem == 0 {
            return Err(Error::Config("frames_per_stem must be ≥ 1".into()));
        }
        if self.pretrain.batch == 0 {
            return Err(Error::Config("pretrain batch must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Token tables shared by every variant built from the same world and
/// registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelVocab {
    /// Blank followed by source morphemes.
    pub source: Vocab,
    /// Blank, BOS and EOS followed by target words; also the decoder's
    /// output classes.
    pub target: Vocab,
    /// Target entries followed by prompt-only words.
    pub decoder: Vocab,
}

impl ModelVocab {
    pub fn build(world: &SynthWorld, registry: &Registry, templates: &PromptTemplates) -> Self {
        let source = Vocab::with_tokens(core::iter::once(BLANK_TOKEN.to_string()).chain(world.source_morphemes()));
        let target = Vocab::with_tokens([BLANK_TOKEN, BOS, EOS].into_iter().map(String::from).chain(world.target_words()));
        let mut decoder = target.clone();
        for variant in [PromptVariant::Typology, PromptVariant::LanguageAware] {
            for code in registry.codes() {
                for t in prompt_for(variant, code, registry, templates).tokens() {
                    decoder.insert(&t);
                }
            }
        }
        Self { source, target, decoder }
    }
}

#[derive(Debug, Clone)]
pub enum LanguageEncoder {
    Hierarchical(TypologyEncoder),
    Flat(FlatEncoder),
}

/// An utterance turned into encoder features and label ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub lang: String,
    pub lang_index: usize,
    pub features: Array,
    /// Source morpheme ids, the source CTC labels.
    pub source_labels: Vec<usize>,
    /// Target word ids without BOS/EOS.
    pub target: Vec<usize>,
}

/// Scalar loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub ce: f64,
    pub ctc_src: f64,
    pub ctc_tgt: f64,
    pub lang_ce: f64,
    /// Stage loss plus the weighted classifier term.
    pub total: f64,
    pub tokens: usize,
    /// Utterances whose labels need more frames than the adapter produced.
    pub infeasible_src: usize,
    pub infeasible_tgt: usize,
}

/// Graph nodes of a batch loss.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub ce: Var,
    pub ctc_src: Var,
    pub ctc_tgt: Var,
    pub lang_ce: Option<Var>,
    pub total: Var,
    pub tokens: usize,
    pub infeasible_src: usize,
    pub infeasible_tgt: usize,
}

/// Per-frame gate values and FiLM statistics of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    pub id: String,
    pub lang: String,
    pub gates: Vec<f64>,
    pub temperature: Option<f64>,
    pub gamma_abs_mean: f64,
    pub beta_abs_mean: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub variants: Variants,
    pub registry: Registry,
    pub templates: PromptTemplates,
    pub vocab: ModelVocab,
    pub store: ParamStore,
    pub encoder: EncoderStandin,
    pub adapter: Adapter,
    pub language: LanguageEncoder,
    pub film: FilmGenerator,
    pub gate: Gate,
    pub heads: CtcBranchHeads,
    pub classifier: Linear,
    pub decoder: ToyDecoder,
    /// Decoder prompt ids per registry index, for the active prompt variant.
    prompts: Vec<Vec<usize>>,
    noise: BTreeMap<String, f64>,
}

impl Model {
    /// Frozen parts come from `cfg.base_seed`, trainable ones from `seed`.
    pub fn new(
        cfg: ModelConfig,
        variants: Variants,
        registry: Registry,
        templates: PromptTemplates,
        world: &SynthWorld,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if registry.is_empty() {
            return Err(Error::Config("registry has no languages".into()));
        }
        let vocab = ModelVocab::build(world, &registry, &templates);
        let mut store = ParamStore::new();
        let base = |name: &str| SeededRng::derive(cfg.base_seed, name);
        let init = |name: &str| SeededRng::derive(seed, &format!("init.{name}"));

        let encoder = EncoderStandin::new(&mut store, cfg.encoder, vocab.source.len(), registry.len(), &mut base("base.encoder"))?;
        let decoder = ToyDecoder::new(
            &mut store,
            cfg.decoder,
            cfg.adapter.d_llm,
            vocab.decoder.len(),
            vocab.target.len(),
            &mut base("base.decoder"),
            &mut init("lora"),
        )?;
        let adapter = Adapter::new(&mut store, cfg.adapter, &mut init("adapter"))?;
        let language = match variants.encoding {
            Encoding::Hierarchical => LanguageEncoder::Hierarchical(TypologyEncoder::new(
                &mut store,
                &registry,
                cfg.typology,
                variants.channel_drop,
                &mut init("typology"),
            )?),
            Encoding::Flat => LanguageEncoder::Flat(FlatEncoder::new(&mut store, &registry, cfg.typology, &mut init("typology"))?),
        };
        let film = FilmGenerator::new(&mut store, cfg.typology.fused, cfg.film_hidden, cfg.adapter.d_h, &mut init("film"))?;
        let gate = Gate::new(&mut store, variants.gate, cfg.adapter.d_h, cfg.typology.fused, &mut init("gate"))?;
        let heads = CtcBranchHeads::new(
            &mut store,
            cfg.adapter.d_h,
            vocab.source.len() - 1,
            vocab.target.len() - 1,
            &mut init("ctc"),
        )?;
        let classifier = Linear::new(&mut store, "classifier", Group::Classifier, cfg.encoder.d_in, registry.len(), &mut init("classifier"))?;

        let prompts = registry
            .codes()
            .map(|code| vocab.decoder.ids(&prompt_for(variants.prompt, code, &registry, &templates).tokens()))
            .collect::<Result<_>>()?;
        let noise = world.languages.iter().map(|l| (l.spec.code.clone(), l.spec.noise)).collect();
        Ok(Self {
            cfg,
            variants,
            registry,
            templates,
            vocab,
            store,
            encoder,
            adapter,
            language,
            film,
            gate,
            heads,
            classifier,
            decoder,
            prompts,
            noise,
        })
    }

    pub fn prompt_ids(&self, code: &str) -> Result<&[usize]> {
        let i = self.registry.index_of(code).ok_or_else(|| Error::UnknownLanguage(code.to_string()))?;
        Ok(&self.prompts[i])
    }

    /// Encodes the source side and maps labels to ids. Encoder noise is a
    /// fixed function of the base seed and the utterance id.
    pub fn prepare(&self, utts: &[ParallelUtterance]) -> Result<Vec<Prepared>> {
        utts.iter().map(|u| self.prepare_one(u)).collect()
    }

    pub fn prepare_one(&self, u: &ParallelUtterance) -> Result<Prepared> {
        let lang_index = self.registry.index_of(&u.lang).ok_or_else(|| Error::UnknownLanguage(u.lang.clone()))?;
        let noise = *self.noise.get(&u.lang).ok_or_else(|| Error::UnknownLanguage(u.lang.clone()))?;
        let stems = source_morphemes(&u.source)
            .into_iter()
            .map(|(m, joined)| Ok(SourceStem { id: self.vocab.source.id(m)?, joined }))
            .collect::<Result<Vec<_>>>()?;
        if stems.is_empty() {
            return Err(Error::Empty(format!("utterance {} has no source tokens", u.id)));
        }
        let features = self.encoder.encode(&self.store, &stems, lang_index, noise, mix(self.cfg.base_seed, u.id.as_bytes()))?;
        Ok(Prepared {
            id: u.id.clone(),
            lang: u.lang.clone(),
            lang_index,
            features,
            source_labels: stems.iter().map(|s| s.id).collect(),
            target: self.vocab.target.ids(&u.target)?,
        })
    }

    /// `r_lang` for a registered language.
    pub fn language_repr(&self, g: &mut Graph, p: &mut Binder, code: &str) -> Result<Var> {
        match &self.language {
            LanguageEncoder::Hierarchical(enc) => enc.fuse(g, p, self.registry.lookup_profile(code)?),
            LanguageEncoder::Flat(enc) => enc.flat_fuse(g, p, &self.registry, code),
        }
    }

    /// Builds the batch loss. Utterances whose CTC labels are infeasible are
    /// left out of that CTC mean and counted.
    ///
    /// `prompts` may supply precomputed prompt states; that is only valid
    /// while the adapters are off, since the decoder base never trains.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        p: &mut Binder,
        batch: &[&Prepared],
        obj: &StageObjective,
        lora: &mut LoraMode,
        prompts: Option<&PromptCaches>,
    ) -> Result<LossNodes> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let mut per_lang: BTreeMap<&str, (Var, crate::conditioning::FilmParams, PromptStates)> = BTreeMap::new();
        let mut nll = Vec::with_capacity(batch.len());
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        let mut lang = Vec::new();
        let mut tokens = 0;
        let (mut infeasible_src, mut infeasible_tgt) = (0, 0);
        let cls_weight = obj.classifier_weight();
        for u in batch {
            if !per_lang.contains_key(u.lang.as_str()) {
                let r = self.language_repr(g, p, &u.lang)?;
                let film = self.film.film(g, p, r)?;
                let ps = match (prompts.and_then(|c| c.get(&u.lang)), &lora) {
                    (Some(cache), LoraMode::Off) => cache.attach(g)?,
                    _ => self.decoder.prompt_states(g, p, self.prompt_ids(&u.lang)?, lora)?,
                };
                per_lang.insert(&u.lang, (r, film, ps));
            }
            let (r, film, ps) = per_lang[u.lang.as_str()].clone();
            let x = g.leaf(&u.features);
            let item = self.adapter.forward(g, p, x)?;
            let frames = g.rows(item.h_down);

            let gate = self.gate.gate(g, p, item.h_down, r)?;
            let modulated = modulate(g, item.h_down, &film, gate)?;
            if min_frames(&u.source_labels) <= frames {
                let lp = self.heads.source_log_probs(g, p, modulated)?;
                src.push(ctc_node(g, lp, &u.source_labels, frames)?);
            } else {
                infeasible_src += 1;
            }
            if min_frames(&u.target) <= frames {
                let lp = self.heads.target_log_probs(g, p, item.h_down)?;
                tgt.push(ctc_node(g, lp, &u.target, frames)?);
            } else {
                infeasible_tgt += 1;
            }

            let mut input = Vec::with_capacity(u.target.len() + 1);
            input.push(BOS_ID);
            input.extend_from_slice(&u.target);
            let mut want = u.target.clone();
            want.push(EOS_ID);
            let lp = self.decoder.token_log_probs(g, p, &ps, item.z, &input, lora)?;
            let picked = g.pick(lp, &want)?;
            nll.push(g.sum(picked));
            tokens += want.len();

            if cls_weight > 0.0 {
                let pooled = g.mean_rows(x);
                let logits = self.classifier.forward(g, p, pooled)?;
                let lp = g.log_softmax_rows(logits);
                let picked = g.pick(lp, &[u.lang_index])?;
                lang.push(picked);
            }
        }
        let sum_ll = sum_nodes(g, &nll)?;
        let ce = g.scale(sum_ll, -1.0 / tokens as f64);
        let ctc_src = mean_nodes(g, &src)?;
        let ctc_tgt = mean_nodes(g, &tgt)?;
        let mut total = objective::stage_loss_node(g, ce, ctc_src, ctc_tgt, obj)?;
        let lang_ce = if lang.is_empty() {
            None
        } else {
            let s = sum_nodes(g, &lang)?;
            let l = g.scale(s, -1.0 / lang.len() as f64);
            let w = g.scale(l, cls_weight);
            total = g.add(total, w)?;
            Some(l)
        };
        Ok(LossNodes { ce, ctc_src, ctc_tgt, lang_ce, total, tokens, infeasible_src, infeasible_tgt })
    }

    /// Loss components of a batch without gradients.
    pub fn forward_full(&self, batch: &[&Prepared], obj: &StageObjective) -> Result<LossParts> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, GroupSet::EMPTY);
        let mut mode = lora_mode_for(obj.stage, None);
        let n = self.loss_graph(&mut g, &mut p, batch, obj, &mut mode, None)?;
        Ok(parts(&g, &n))
    }

    /// Forward, backward and accumulation of trainable gradients into the store.
    pub fn accumulate_gradients(
        &mut self,
        batch: &[&Prepared],
        obj: &StageObjective,
        dropout: &mut SeededRng,
        prompts: Option<&PromptCaches>,
    ) -> Result<LossParts> {
        let mut g = Graph::new();
        let (out, grads) = {
            let mut p = Binder::new(&self.store, obj.trainable);
            let mut mode = lora_mode_for(obj.stage, Some(dropout));
            let n = self.loss_graph(&mut g, &mut p, batch, obj, &mut mode, prompts)?;
            let out = parts(&g, &n);
            if !out.total.is_finite() {
                return Ok(out);
            }
            g.backward(n.total)?;
            (out, p.gradients(&g))
        };
        accumulate(&mut self.store, &grads, 1.0)?;
        Ok(out)
    }

    fn lora_eval(&self) -> LoraMode<'static> {
        LoraMode::Eval
    }

    /// Prompt keys and values for `code` with adapters applied, detached
    /// from any graph.
    pub fn prompt_cache(&self, code: &str) -> Result<PromptCache> {
        self.prompt_cache_with(code, &mut self.lora_eval())
    }

    /// Prompt states of every registered language with adapters off.
    pub fn base_prompt_caches(&self) -> Result<PromptCaches> {
        self.registry.codes().map(|c| Ok((c.to_string(), self.prompt_cache_with(c, &mut LoraMode::Off)?))).collect()
    }

    fn prompt_cache_with(&self, code: &str, mode: &mut LoraMode) -> Result<PromptCache> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, GroupSet::EMPTY);
        let ps = self.decoder.prompt_states(&mut g, &mut p, self.prompt_ids(code)?, mode)?;
        Ok(PromptCache {
            len: ps.len,
            keys: ps.keys.iter().map(|&k| g.to_array(k)).collect(),
            values: ps.values.iter().map(|&v| g.to_array(v)).collect(),
        })
    }

    /// Greedy decoding behind the language prompt; returns target words.
    pub fn translate(&self, u: &Prepared, cache: &PromptCache) -> Result<Vec<String>> {
        let ids = self.translate_ids(u, cache)?;
        Ok(ids.iter().map(|&i| self.vocab.target.token(i).unwrap_or(BLANK_TOKEN).to_string()).collect())
    }

    pub fn translate_ids(&self, u: &Prepared, cache: &PromptCache) -> Result<Vec<usize>> {
        let z = self.inference_prefix(u)?;
        let mut tokens = vec![BOS_ID];
        for _ in 0..self.cfg.decoder.max_decode {
            let next = best_output(&self.next_token_log_probs(&z, cache, &tokens)?);
            if next == EOS_ID {
                break;
            }
            tokens.push(next);
        }
        Ok(tokens[1..].to_vec())
    }

    /// `Z` for an utterance: the adapter on its encoder features.
    pub fn inference_prefix(&self, u: &Prepared) -> Result<Array> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, GroupSet::EMPTY);
        let x = g.leaf(&u.features);
        let item = self.adapter.forward(&mut g, &mut p, x)?;
        Ok(g.to_array(item.z))
    }

    /// Decoder log-probabilities for the token after `tokens` (which start
    /// with BOS), behind the prompt and `z`.
    pub fn next_token_log_probs(&self, z: &Array, cache: &PromptCache, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Empty("decoder input needs at least BOS".into()));
        }
        // a fresh graph per step keeps memory flat; Z and the prompt are constants
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, GroupSet::EMPTY);
        let ps = cache.attach(&mut g)?;
        let zv = g.leaf(z);
        let lp = self.decoder.token_log_probs(&mut g, &mut p, &ps, zv, tokens, &mut self.lora_eval())?;
        Ok(g.value(lp)[(tokens.len() - 1) * self.decoder.outputs..].to_vec())
    }

    /// Translations for every item, computing each prompt once.
    pub fn translate_all(&self, items: &[Prepared]) -> Result<Vec<Vec<String>>> {
        let mut caches: BTreeMap<&str, PromptCache> = BTreeMap::new();
        let mut out = Vec::with_capacity(items.len());
        for u in items {
            if !caches.contains_key(u.lang.as_str()) {
                caches.insert(&u.lang, self.prompt_cache(&u.lang)?);
            }
            out.push(self.translate(u, &caches[u.lang.as_str()])?);
        }
        Ok(out)
    }

    /// Classifier logits from mean-pooled encoder features.
    pub fn language_logits(&self, features: &Array) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, GroupSet::EMPTY);
        let x = g.leaf(features);
        let pooled = g.mean_rows(x);
        let logits = self.classifier.forward(&mut g, &mut p, pooled)?;
        Ok(g.value(logits).to_vec())
    }

    pub fn predict_language(&self, features: &Array) -> Result<String> {
        predict_from_logits(&self.language_logits(features)?, &self.registry)
    }

    /// Gate values and FiLM magnitudes for diagnostics.
    pub fn inspect_gate(&self, u: &Prepared) -> Result<GateTrace> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, GroupSet::EMPTY);
        let r = self.language_repr(&mut g, &mut p, &u.lang)?;
        let film = self.film.film(&mut g, &mut p, r)?;
        let x = g.leaf(&u.features);
        let item = self.adapter.forward(&mut g, &mut p, x)?;
        let gate = self.gate.gate(&mut g, &mut p, item.h_down, r)?;
        let temperature = match &self.gate {
            Gate::Dynamic(fg) => {
                let t = fg.temperature(&mut g, &mut p);
                Some(g.item(t))
            }
            Gate::Static(_) => None,
        };
        let abs_mean = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() / v.len().max(1) as f64;
        Ok(GateTrace {
            id: u.id.clone(),
            lang: u.lang.clone(),
            gates: g.value(gate).to_vec(),
            temperature,
            gamma_abs_mean: abs_mean(g.value(film.gamma)),
            beta_abs_mean: abs_mean(g.value(film.beta)),
        })
    }

    /// Values of every parameter in `group`, by name.
    pub fn export_group(&self, group: Group) -> Vec<(String, Array)> {
        self.store
            .iter()
            .filter(|(_, prm)| prm.group == group)
            .map(|(_, prm)| (prm.name.clone(), prm.value.clone()))
            .collect()
    }

    /// Overwrites parameters by name; every name must exist with the same shape.
    pub fn import_values(&mut self, values: &[(String, Array)]) -> Result<()> {
        for (name, a) in values {
            self.store.load_values(name, a.shape(), a.data().to_vec())?;
        }
        Ok(())
    }

    /// Denoising pretraining of the decoder base on monolingual target
    /// clauses. The prefix holds noisy embeddings of the clause words, with
    /// random filler rows and sometimes one word moved; the decoder learns to
    /// emit the clean clause. The base stays frozen during both stages
    /// afterwards.
    pub fn pretrain_decoder(&mut self, world: &SynthWorld, on_step: &mut dyn FnMut(usize, f64)) -> Result<()> {
        let cfg = self.cfg.pretrain;
        let trainable = GroupSet::of(&[Group::DecoderBase]);
        let mut rng = SeededRng::derive(self.cfg.base_seed, "base.pretrain");
        let mut adam = Adam::new(cfg.lr);
        let sentences = target_sentences(world, cfg.steps * cfg.batch, self.cfg.base_seed);
        let sentences: Vec<Vec<usize>> = sentences.iter().map(|s| self.vocab.target.ids(s)).collect::<Result<_>>()?;
        let mut prompts = Vec::new();
        for v in [PromptVariant::Typology, PromptVariant::LanguageAware] {
            for code in self.registry.codes() {
                prompts.push(self.vocab.decoder.ids(&prompt_for(v, code, &self.registry, &self.templates).tokens())?);
            }
        }
        let width = self.decoder.width;
        for (step, chunk) in sentences.chunks(cfg.batch).enumerate() {
            let mut g = Graph::new();
            let grads = {
                let mut p = Binder::new(&self.store, trainable);
                let table = p.var(&mut g, self.decoder.embed);
                let mut mode = LoraMode::Off;
                let prompt = &prompts[rng.below(prompts.len())];
                let ps = self.decoder.prompt_states(&mut g, &mut p, prompt, &mut mode)?;
                let mut nll = Vec::with_capacity(chunk.len());
                let mut count = 0;
                for y in chunk {
                    let mut order: Vec<usize> = y.clone();
                    if order.len() > 1 && rng.bernoulli(cfg.displace_rate) {
                        let w = order.remove(rng.below(order.len()));
                        order.insert(rng.below(order.len() + 1), w);
                    }
                    let mut rows = Vec::with_capacity(2 * order.len());
                    for &w in &order {
                        let e = g.gather(table, &[w])?;
                        let n = g.constant(1, width, rng.normal_vec(width, cfg.noise))?;
                        rows.push(g.add(e, n)?);
                        if rng.bernoulli(cfg.filler_rate) {
                            rows.push(g.constant(1, width, rng.normal_vec(width, 1.0))?);
                        }
                    }
                    let z = g.concat_rows(&rows)?;
                    let mut input = vec![BOS_ID];
                    input.extend_from_slice(y);
                    let mut want = y.clone();
                    want.push(EOS_ID);
                    let lp = self.decoder.token_log_probs(&mut g, &mut p, &ps, z, &input, &mut mode)?;
                    let picked = g.pick(lp, &want)?;
                    nll.push(g.sum(picked));
                    count += want.len();
                }
                let s = sum_nodes(&mut g, &nll)?;
                let loss = g.scale(s, -1.0 / count as f64);
                let value = g.item(loss);
                if !value.is_finite() {
                    return Err(Error::Divergence { step, detail: format!("decoder pretraining loss {value}") });
                }
                on_step(step, value);
                g.backward(loss)?;
                p.gradients(&g)
            };
            accumulate(&mut self.store, &grads, 1.0)?;
            adam.step(&mut self.store, trainable);
        }
        Ok(())
    }
}

pub type PromptCaches = BTreeMap<String, PromptCache>;

/// Prompt keys and values held as plain arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptCache {
    pub len: usize,
    pub keys: Vec<Array>,
    pub values: Vec<Array>,
}

impl PromptCache {
    pub fn attach(&self, g: &mut Graph) -> Result<PromptStates> {
        let mut c = |a: &Array| {
            let (r, k) = a.dims2();
            g.constant(r, k, a.data().to_vec())
        };
        Ok(PromptStates {
            len: self.len,
            keys: self.keys.iter().map(&mut c).collect::<Result<_>>()?,
            values: self.values.iter().map(&mut c).collect::<Result<_>>()?,
        })
    }
}

/// Argmax over output classes, never choosing blank or BOS.
fn best_output(row: &[f64]) -> usize {
    let mut best = EOS_ID;
    for (i, &v) in row.iter().enumerate().skip(EOS_ID) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Registered language with the highest logit.
pub fn predict_from_logits(logits: &[f64], registry: &Registry) -> Result<String> {
    if logits.len() != registry.len() || logits.is_empty() {
        return Err(Error::LengthMismatch(format!("{} logits for {} languages", logits.len(), registry.len())));
    }
    Ok(registry.profiles()[argmax(logits)].code.clone())
}

fn lora_mode_for(stage: Stage, dropout: Option<&mut SeededRng>) -> LoraMode<'_> {
    match (stage, dropout) {
        (Stage::I, _) => LoraMode::Off,
        (Stage::II, Some(rng)) => LoraMode::Train(rng),
        (Stage::II, None) => LoraMode::Eval,
    }
}

fn sum_nodes(g: &mut Graph, nodes: &[Var]) -> Result<Var> {
    match nodes {
        [] => Ok(g.scalar(0.0)),
        [first, rest @ ..] => {
            let mut acc = *first;
            for &n in rest {
                acc = g.add(acc, n)?;
            }
            Ok(acc)
        }
    }
}

fn mean_nodes(g: &mut Graph, nodes: &[Var]) -> Result<Var> {
    let s = sum_nodes(g, nodes)?;
    Ok(if nodes.len() > 1 { g.scale(s, 1.0 / nodes.len() as f64) } else { s })
}

fn parts(g: &Graph, n: &LossNodes) -> LossParts {
    LossParts {
        ce: g.item(n.ce),
        ctc_src: g.item(n.ctc_src),
        ctc_tgt: g.item(n.ctc_tgt),
        lang_ce: n.lang_ce.map_or(0.0, |v| g.item(v)),
        total: g.item(n.total),
        tokens: n.tokens,
        infeasible_src: n.infeasible_src,
        infeasible_tgt: n.infeasible_tgt,
    }
}
