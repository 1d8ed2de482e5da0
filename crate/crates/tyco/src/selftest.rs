//! Oracle and gradient suites behind `tyco selftest`.
//!
//! Each check measures one quantity against an independent reference and
//! reports it together with its limit.

use std::time::Instant;

use tyco_core::adapter::{adapter_forward, Adapter, AdapterConfig, FeatureSequence};
use tyco_core::conditioning::{modulate, temperature, FilmGenerator, FilmParams, FrameGate};
use tyco_core::ctc::{ctc_brute_force, ctc_loss, ctc_node, min_frames, random_instance, CtcInstance};
use tyco_core::gradcheck::{grad_check, grad_check_sampled, DEFAULT_STEP};
use tyco_core::metrics::{corpus_bleu, token_error_rate};
use tyco_core::model::decoder::{lora_forward, lora_standalone, LoraConfig, LoraMode};
use tyco_core::model::objective::{stage_loss, StageObjective};
use tyco_core::model::train::{train_run, Schedule};
use tyco_core::model::{Model, ModelConfig, Prepared, Variants};
use tyco_core::params::{Binder, Group, GroupSet, ParamId, ParamStore};
use tyco_core::prompting::PromptTemplates;
use tyco_core::synthdata::{generate_corpus, GrammarConfig, SynthCorpus, SynthLanguageSpec};
use tyco_core::typology::{Registry, TypologyDims, TypologyEncoder};
use tyco_core::{Array, Graph, Result, SeededRng, Var};

/// Outcome of one check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    /// The measured quantity (an error, a count of violations, a score).
    pub value: f64,
    pub limit: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("{verdict} {:<24} value {:.3e} limit {} ({:.2}s) {}", self.name, self.value, self.limit, self.seconds, self.detail)
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(f64, String, bool, String)>) -> Check {
    let t = Instant::now();
    match f() {
        Ok((value, limit, passed, detail)) => Check { name, value, limit, passed, detail, seconds: t.elapsed().as_secs_f64() },
        Err(e) => Check { name, value: f64::NAN, limit: String::new(), passed: false, detail: format!("error: {e}"), seconds: t.elapsed().as_secs_f64() },
    }
}

/// Forward-backward against path enumeration on 200 seeded instances with
/// at most 6 frames, 4 labels plus blank and 3 target symbols.
pub fn ctc_oracle() -> Check {
    timed("ctc_oracle", || {
        let mut rng = SeededRng::new(1337);
        let mut worst: f64 = 0.0;
        let mut n = 0;
        while n < 200 {
            let t = 1 + rng.below(6);
            let v = 1 + rng.below(4);
            let l = rng.below(4);
            let inst = random_instance(&mut rng, t, v, l);
            if min_frames(inst.labels()) > t {
                continue;
            }
            worst = worst.max((ctc_loss(&inst) - ctc_brute_force(&inst)?).abs());
            n += 1;
        }
        Ok((worst, "< 1e-8".into(), worst < 1e-8, format!("{n} instances")))
    })
}

/// Every labelling of `labels` over `vocab` symbols with length ≤ `max_len`.
fn all_labellings(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for l in &frontier {
            for s in 1..=vocab {
                let mut m: Vec<usize> = l.clone();
                m.push(s);
                next.push(m);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Σ exp(−loss) over all feasible labellings equals 1 for T ≤ 4, V ≤ 3.
pub fn ctc_normalization() -> Check {
    timed("ctc_normalization", || {
        let mut rng = SeededRng::new(7);
        let mut worst: f64 = 0.0;
        let mut lattices = 0;
        for t in 1..=4 {
            for v in 1..=3 {
                for _ in 0..5 {
                    let logits = Array::matrix(t, v + 1, rng.normal_vec(t * (v + 1), 1.5))?;
                    let mut total = 0.0;
                    for labels in all_labellings(v, t) {
                        if min_frames(&labels) <= t {
                            total += (-ctc_loss(&CtcInstance::from_logits(&logits, labels)?)).exp();
                        }
                    }
                    worst = worst.max((total - 1.0).abs());
                    lattices += 1;
                }
            }
        }
        Ok((worst, "< 1e-6".into(), worst < 1e-6, format!("{lattices} lattices")))
    })
}

/// Largest relative error over the given parameters of a scalar objective.
fn param_check(store: &ParamStore, ids: &[ParamId], coords: usize, objective: &dyn Fn(&mut Graph, &mut Binder) -> Result<Var>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        let rep = grad_check_sampled(
            |g, v| {
                let mut p = Binder::new(store, GroupSet::EMPTY);
                p.bind(id, v);
                objective(g, &mut p)
            },
            store.get(id),
            DEFAULT_STEP,
            coords,
            k as u64,
        )?;
        worst = worst.max(rep.max_rel_error);
    }
    Ok(worst)
}

/// Weighted sum of all entries of `x`, fixed by `seed`.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(x);
    let w = g.constant(r, c, SeededRng::new(seed).normal_vec(r * c, 1.0))?;
    let m = g.mul(x, w)?;
    Ok(g.sum(m))
}

fn small_dims() -> TypologyDims {
    TypologyDims { morphology: 4, reordering: 3, family: 4, residual: 5, fused: 6 }
}

/// Gradient checks of every differentiable component, as `(name, error)`.
pub fn gradient_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let reg = Registry::default_languages();
    let mut rng = SeededRng::new(21);

    // language fusion
    let mut store = ParamStore::new();
    let enc = TypologyEncoder::new(&mut store, &reg, small_dims(), None, &mut rng)?;
    let de = reg.lookup_profile("de")?.clone();
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    out.push(("fuse", param_check(&store, &ids, 30, &|g, p| {
        let r = enc.fuse(g, p, &de)?;
        project(g, r, 1)
    })?));

    // FiLM generator, modulation and gate
    let (d_h, d_r, frames) = (5, 6, 4);
    let mut store = ParamStore::new();
    let film = FilmGenerator::new(&mut store, d_r, 7, d_h, &mut rng)?;
    let gate = FrameGate::new(&mut store, d_h, d_r, 4, &mut rng)?;
    let hv = Array::randn(&[frames, d_h], 1.0, &mut rng);
    let rv = Array::randn(&[1, d_r], 1.0, &mut rng);
    let film_ids: Vec<ParamId> = store.ids_in(Group::Conditioning).into_iter().filter(|&id| store.param(id).name.starts_with("film")).collect();
    let film_err = param_check(&store, &film_ids, 30, &|g, p| {
        let r = g.leaf(&rv);
        let fp = film.film(g, p, r)?;
        let both = g.concat_cols(&[fp.gamma, fp.beta])?;
        project(g, both, 2)
    })?;
    let r_err = grad_check(
        |g, r| {
            let mut p = Binder::new(&store, GroupSet::EMPTY);
            let fp = film.film(g, &mut p, r)?;
            let both = g.concat_cols(&[fp.gamma, fp.beta])?;
            project(g, both, 2)
        },
        &rv,
        DEFAULT_STEP,
    )?
    .max_rel_error;
    out.push(("film", film_err.max(r_err)));

    let gv = Array::randn(&[frames, 1], 1.0, &mut rng);
    let gamma_v = Array::randn(&[1, d_h], 0.5, &mut rng);
    let beta_v = Array::randn(&[1, d_h], 0.5, &mut rng);
    let inputs = [hv.clone(), gamma_v.clone(), beta_v.clone(), gv.clone()];
    let mut mod_err: f64 = 0.0;
    for which in 0..4 {
        let rep = grad_check(
            |g, x| {
                let mut leaf = |i: usize| if i == which { x } else { g.leaf(&inputs[i]) };
                let (h, gm, bt, gt) = (leaf(0), leaf(1), leaf(2), leaf(3));
                let y = modulate(g, h, &FilmParams { gamma: gm, beta: bt }, gt)?;
                project(g, y, 3)
            },
            &inputs[which],
            DEFAULT_STEP,
        )?;
        mod_err = mod_err.max(rep.max_rel_error);
    }
    out.push(("modulate", mod_err));

    let gate_ids = store.ids_in(Group::Conditioning).into_iter().filter(|&id| store.param(id).name.starts_with("gate")).collect::<Vec<_>>();
    let gate_err = param_check(&store, &gate_ids, 30, &|g, p| {
        let h = g.leaf(&hv);
        let r = g.leaf(&rv);
        let gt = gate.gate(g, p, h, r)?;
        Ok(g.mean(gt))
    })?;
    let tau_err = param_check(&store, &[gate.tau_learn], 1, &|g, p| {
        let h = g.leaf(&hv);
        let r = g.leaf(&rv);
        let gt = gate.gate(g, p, h, r)?;
        Ok(g.mean(gt))
    })?;
    out.push(("gate", gate_err.max(tau_err)));

    // adapter on a padded batch of two
    let mut store = ParamStore::new();
    let cfg = AdapterConfig { kernel: 3, ffn_mult: 2, ..AdapterConfig::toy(4, 5, 3) };
    let adapter = Adapter::new(&mut store, cfg, &mut rng)?;
    let batch = FeatureSequence::from_items(vec![Array::randn(&[6, 4], 1.0, &mut rng), Array::randn(&[3, 4], 1.0, &mut rng)])?;
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    out.push(("adapter_forward", param_check(&store, &ids, 8, &|g, p| {
        let b = adapter_forward(g, p, &adapter, &batch)?;
        let mut parts = Vec::new();
        for (i, (h, z)) in b.h_down.iter().zip(&b.z).enumerate() {
            let a = project(g, *h, 10 + i as u64)?;
            let c = project(g, *z, 20 + i as u64)?;
            parts.push(g.add(a, c)?);
        }
        let s = g.add(parts[0], parts[1])?;
        Ok(s)
    })?));

    // CTC through a log-softmax
    let logits = Array::randn(&[5, 4], 1.0, &mut rng);
    let ctc_err = grad_check(
        |g, x| {
            let lp = g.log_softmax_rows(x);
            ctc_node(g, lp, &[1, 3, 3], 5)
        },
        &logits,
        DEFAULT_STEP,
    )?
    .max_rel_error;
    out.push(("ctc_loss", ctc_err));

    // LoRA with a nonzero B so both factors matter
    let mut store = ParamStore::new();
    let lcfg = LoraConfig { rank: 2, alpha: 8.0, dropout: 0.1 };
    let lin = lora_standalone(
        &mut store,
        "probe",
        Array::randn(&[4, 3], 1.0, &mut rng),
        Array::randn(&[4, 2], 1.0, &mut rng),
        Array::randn(&[2, 3], 1.0, &mut rng),
        lcfg,
    )?;
    let xv = Array::randn(&[3, 4], 1.0, &mut rng);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let lora_err = param_check(&store, &ids, 12, &|g, p| {
        let x = g.leaf(&xv);
        let y = lora_forward(g, p, &lin, x, &mut LoraMode::Eval)?;
        project(g, y, 4)
    })?;
    out.push(("lora_forward", lora_err));

    out.push(("forward_full_total", model_total_error()?));
    Ok(out)
}

fn tiny_corpus() -> Result<SynthCorpus> {
    generate_corpus(&SynthLanguageSpec::defaults(), &[30; 4], GrammarConfig::default(), 3)
}

fn tiny_model(c: &SynthCorpus, variants: Variants, seed: u64) -> Result<Model> {
    Model::new(ModelConfig::tiny(), variants, Registry::default_languages(), PromptTemplates::default(), &c.world, seed)
}

/// Total stage loss of the tiny model against central differences, for
/// parameters of every trainable group in both stages.
fn model_total_error() -> Result<f64> {
    let c = tiny_corpus()?;
    let mut m = tiny_model(&c, Variants::default(), 4)?;
    // give LoRA a nonzero B so the adapter path is exercised
    let mut rng = SeededRng::new(5);
    for id in m.store.ids_in(Group::Lora) {
        for x in m.store.get_mut(id).data_mut() {
            *x = 0.1 * rng.normal();
        }
    }
    let items = m.prepare(&c.train)?;
    let batch: Vec<&Prepared> = items.iter().step_by(17).take(3).collect();
    let mut worst: f64 = 0.0;
    for (obj, groups) in [
        (StageObjective::stage_i(), &[Group::Adapter, Group::Typology, Group::Conditioning, Group::CtcHeads, Group::Classifier][..]),
        (StageObjective::stage_ii(), &[Group::Adapter, Group::Lora][..]),
    ] {
        let ids: Vec<ParamId> = groups.iter().flat_map(|&g| m.store.ids_in(g)).collect();
        // every third tensor keeps the suite quick while touching each group
        let picked: Vec<ParamId> = ids.iter().copied().step_by(3).chain(groups.iter().filter_map(|&g| m.store.ids_in(g).first().copied())).collect();
        let e = param_check(&m.store, &picked, 4, &|g, p| Ok(m.loss_graph(g, p, &batch, &obj, &mut LoraMode::Eval, None)?.total))?;
        worst = worst.max(e);
    }
    Ok(worst)
}

pub fn gradient_suite() -> Check {
    timed("gradient_suite", || {
        let errs = gradient_errors()?;
        let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
        let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
        Ok((worst, "< 1e-4".into(), worst < 1e-4, detail))
    })
}

/// Identity and range properties of FiLM, gate and modulation over 1000
/// seeded inputs. Returns the number of violations.
pub fn conditioning_violations() -> Result<usize> {
    let (d_h, d_r) = (6, 5);
    let mut bad = 0;
    let mut rng = SeededRng::new(4242);
    for i in 0..1000 {
        let mut store = ParamStore::new();
        let mut init = SeededRng::new(i);
        let film = FilmGenerator::new(&mut store, d_r, 8, d_h, &mut init)?;
        let gate = FrameGate::new(&mut store, d_h, d_r, 4, &mut init)?;
        let tau = 4.0 * rng.normal();
        store.get_mut(gate.tau_learn).data_mut()[0] = tau;
        let frames = 1 + rng.below(6);
        let hv = Array::randn(&[frames, d_h], 2.0, &mut rng);
        let rv = Array::randn(&[1, d_r], 2.0, &mut rng);

        let mut g = Graph::new();
        let mut p = Binder::new(&store, GroupSet::EMPTY);
        let h = g.leaf(&hv);
        let r = g.leaf(&rv);
        let fp = film.film(&mut g, &mut p, r)?;
        let gt = gate.gate(&mut g, &mut p, h, r)?;
        let t = gate.temperature(&mut g, &mut p);
        bad += g.value(gt).iter().filter(|&&x| !(x > 0.0 && x < 1.0)).count();
        bad += g.value(fp.gamma).iter().chain(g.value(fp.beta)).filter(|&&x| !(x > -1.0 && x < 1.0)).count();
        bad += usize::from(!(g.item(t) >= 0.1 && temperature(tau) >= 0.1));

        let zero_gate = g.constant(frames, 1, vec![0.0; frames])?;
        let a = modulate(&mut g, h, &fp, zero_gate)?;
        let zg = g.constant(1, d_h, vec![0.0; d_h])?;
        let zb = g.constant(1, d_h, vec![0.0; d_h])?;
        let b = modulate(&mut g, h, &FilmParams { gamma: zg, beta: zb }, gt)?;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bad += usize::from(bits(g.value(a)) != bits(hv.data()));
        bad += usize::from(bits(g.value(b)) != bits(hv.data()));
    }
    Ok(bad)
}

pub fn conditioning_identities() -> Check {
    timed("conditioning_identities", || {
        let bad = conditioning_violations()?;
        Ok((bad as f64, "= 0".into(), bad == 0, "1000 inputs".into()))
    })
}

fn bits_of(m: &Model, groups: &[Group]) -> Vec<(String, Vec<u64>)> {
    groups.iter().flat_map(|&g| m.store.fingerprint(g)).collect()
}

fn perturb(m: &mut Model, groups: &[Group], seed: u64) {
    let mut rng = SeededRng::new(seed);
    for id in groups.iter().flat_map(|&g| m.store.ids_in(g)).collect::<Vec<_>>() {
        for x in m.store.get_mut(id).data_mut() {
            *x += 0.5 * rng.normal();
        }
    }
}

/// Wiring contracts on the tiny model, as a list of broken ones.
pub fn wiring_failures() -> Result<Vec<String>> {
    let c = tiny_corpus()?;
    let m = tiny_model(&c, Variants::default(), 8)?;
    let items = m.prepare(&c.train)?;
    let batch: Vec<&Prepared> = items.iter().step_by(9).take(5).collect();
    let mut failed = Vec::new();

    // target branch ignores FiLM and gate
    let base = m.forward_full(&batch, &StageObjective::stage_i())?;
    let mut moved = m.clone();
    perturb(&mut moved, &[Group::Conditioning], 1);
    let after = moved.forward_full(&batch, &StageObjective::stage_i())?;
    if base.ctc_tgt.to_bits() != after.ctc_tgt.to_bits() || base.ce.to_bits() != after.ce.to_bits() {
        failed.push("target CTC or CE moved with conditioning parameters".into());
    }
    if base.ctc_src.to_bits() == after.ctc_src.to_bits() {
        failed.push("source CTC did not react to conditioning parameters".into());
    }

    // inference ignores training-only modules
    let test = m.prepare(&c.test)?;
    let hyps = m.translate_all(&test)?;
    let mut moved = m.clone();
    perturb(&mut moved, &[Group::Typology, Group::Conditioning, Group::CtcHeads, Group::Classifier], 2);
    if moved.translate_all(&test)? != hyps {
        failed.push("inference changed with typology, conditioning, CTC or classifier parameters".into());
    }
    let (z0, z1) = (m.inference_prefix(&test[0])?, moved.inference_prefix(&test[0])?);
    if z0.data().iter().zip(z1.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        failed.push("decoder prefix changed with training-only parameters".into());
    }

    // frozen sets stay bitwise fixed
    let frozen_i = [Group::Encoder, Group::DecoderBase, Group::Lora];
    let mut t = m.clone();
    let before = bits_of(&t, &frozen_i);
    let s1 = Schedule { stage_i_steps: 3, stage_ii_steps: 0, batch_size: 4, lr: 1e-3, ..Schedule::default() };
    train_run(&mut t, &items, &s1, 1, &mut |_| {})?;
    if bits_of(&t, &frozen_i) != before {
        failed.push("Stage I changed encoder, decoder base or LoRA".into());
    }
    let frozen_ii = [Group::Encoder, Group::DecoderBase];
    let before = bits_of(&t, &frozen_ii);
    let lora = bits_of(&t, &[Group::Lora]);
    let s2 = Schedule { stage_i_steps: 0, stage_ii_steps: 3, batch_size: 4, lr: 1e-3, ..Schedule::default() };
    train_run(&mut t, &items, &s2, 1, &mut |_| {})?;
    if bits_of(&t, &frozen_ii) != before {
        failed.push("Stage II changed encoder or decoder base".into());
    }
    if bits_of(&t, &[Group::Lora]) == lora {
        failed.push("Stage II left LoRA unchanged".into());
    }
    Ok(failed)
}

pub fn wiring_contracts() -> Check {
    timed("wiring_contracts", || {
        let failed = wiring_failures()?;
        let detail = if failed.is_empty() { "target branch, inference and frozen sets".to_string() } else { failed.join("; ") };
        Ok((failed.len() as f64, "= 0".into(), failed.is_empty(), detail))
    })
}

/// `(zeroed residual: fr == es, default: fr != es)` with default widths.
pub fn typology_sharing_facts() -> Result<(bool, bool)> {
    let reg = Registry::default_languages();
    let mut store = ParamStore::new();
    let enc = TypologyEncoder::new(&mut store, &reg, TypologyDims::default(), None, &mut SeededRng::new(3))?;
    let repr = |store: &ParamStore, code: &str| -> Result<Vec<u64>> {
        let mut g = Graph::new();
        let mut p = Binder::new(store, GroupSet::EMPTY);
        let r = enc.fuse(&mut g, &mut p, reg.lookup_profile(code)?)?;
        Ok(g.value(r).iter().map(|x| x.to_bits()).collect())
    };
    let differ = repr(&store, "fr")? != repr(&store, "es")?;
    let residual = enc.tables.residual.expect("residual channel present");
    store.get_mut(residual).data_mut().fill(0.0);
    let equal = repr(&store, "fr")? == repr(&store, "es")?;
    Ok((equal, differ))
}

pub fn typology_sharing() -> Check {
    timed("typology_sharing", || {
        let (equal, differ) = typology_sharing_facts()?;
        let ok = equal && differ;
        Ok((f64::from(u8::from(!ok)), "= 0".into(), ok, format!("zeroed residual equal: {equal}, default differ: {differ}")))
    })
}

pub fn stage_arithmetic() -> Check {
    timed("stage_arithmetic", || {
        let a = stage_loss(1.0, 2.0, 3.0, &StageObjective::stage_i())?;
        let b = stage_loss(1.0, 2.0, 3.0, &StageObjective::stage_ii())?;
        let ok = a == 1.8 && b == 1.17;
        Ok(((a - 1.8).abs().max((b - 1.17).abs()), "= 0 (exact)".into(), ok, format!("stage I {a}, stage II {b}")))
    })
}

/// Full-matrix Levenshtein distance.
pub fn edit_distance_full(a: &[String], b: &[String]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, x) in d[0].iter_mut().enumerate() {
        *x = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Metric values next to their oracles.
#[derive(Debug, Clone, Copy)]
pub struct MetricFacts {
    pub bleu_identical: f64,
    pub bleu_empty: f64,
    pub bleu_single: f64,
    /// Hand count for the single pair: 1-, 2- and 3-gram precisions are 1,
    /// no 4-grams exist, brevity penalty e^(1 − 4/3).
    pub bleu_single_oracle: f64,
    /// Largest |TER − full-matrix oracle| over 100 seeded pairs.
    pub ter_deviation: f64,
}

impl MetricFacts {
    pub fn ok(&self) -> bool {
        (self.bleu_identical - 100.0).abs() < 1e-9
            && self.bleu_empty == 0.0
            && (self.bleu_single - self.bleu_single_oracle).abs() < 0.01
            && self.ter_deviation < 1e-12
    }
}

pub fn metric_facts() -> Result<MetricFacts> {
    let toks = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let refs = vec![toks("a b c d e f"), toks("the cat sat on the mat")];
    let bleu_identical = corpus_bleu(&refs, &refs)?;
    let bleu_empty = corpus_bleu(&[Vec::<String>::new(), Vec::new()], &refs)?;
    let bleu_single_oracle = 100.0 * (1.0f64 - 4.0 / 3.0).exp();
    let bleu_single = corpus_bleu(&[toks("the cat sat")], &[toks("the cat sat down")])?;
    let mut rng = SeededRng::new(99);
    let words: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let mut ter_deviation: f64 = 0.0;
    for _ in 0..100 {
        let mut draw = || (0..rng.below(9)).map(|_| words[rng.below(4)].clone()).collect::<Vec<_>>();
        let h = draw();
        let mut r = draw();
        if r.is_empty() {
            r.push(words[0].clone());
        }
        let want = edit_distance_full(&h, &r) as f64 / r.len() as f64;
        let got = token_error_rate(std::slice::from_ref(&h), std::slice::from_ref(&r))?;
        ter_deviation = ter_deviation.max((got - want).abs());
    }
    Ok(MetricFacts { bleu_identical, bleu_empty, bleu_single, bleu_single_oracle, ter_deviation })
}

pub fn metrics_oracles() -> Check {
    timed("metrics_oracles", || {
        let f = metric_facts()?;
        let detail = format!(
            "identical {:.2}, empty {:.2}, single pair {:.4} vs {:.4}, TER deviation {:.1e}",
            f.bleu_identical, f.bleu_empty, f.bleu_single, f.bleu_single_oracle, f.ter_deviation
        );
        Ok(((f.bleu_single - f.bleu_single_oracle).abs(), "< 0.01".into(), f.ok(), detail))
    })
}

/// Every check, in order.
pub fn run_all() -> Vec<Check> {
    vec![
        ctc_oracle(),
        ctc_normalization(),
        gradient_suite(),
        conditioning_identities(),
        wiring_contracts(),
        typology_sharing(),
        stage_arithmetic(),
        metrics_oracles(),
    ]
}
