//! Toy causal decoder with low-rank adapters on its query and value
//! projections.
//!
//! Input layout per utterance is `[prompt][Z][BOS y_1 … y_n]`. Prompt rows
//! only ever attend to prompt rows, so their keys and values are computed once
//! per language and shared by every utterance of that language.

use alloc::format;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Mask, Var};
use crate::nn::{sinusoidal, LayerNorm, Linear, Mlp};
use crate::params::{Binder, Group, ParamId, ParamStore};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 32.0, dropout: 0.1 }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Low-rank update `s·(x·A)·B` with `A: d_in × r`, `B: r × d_out`.
#[derive(Debug, Clone, Copy)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    /// `A ~ N(0, 1/d_in)`, `B = 0`.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, cfg: LoraConfig, rng: &mut SeededRng) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::Config("LoRA rank must be ≥ 1".into()));
        }
        let std = 1.0 / libm::sqrt(d_in as f64);
        Ok(Self {
            a: store.add(&format!("{name}.lora_a"), Group::Lora, Array::randn(&[d_in, cfg.rank], std, rng))?,
            b: store.add(&format!("{name}.lora_b"), Group::Lora, Array::zeros(&[cfg.rank, d_out]))?,
            rank: cfg.rank,
            scale: cfg.scale(),
            dropout: cfg.dropout,
        })
    }
}

/// How adapters participate in a forward pass.
#[derive(Debug)]
pub enum LoraMode<'r> {
    /// Adapters left out of the graph entirely.
    Off,
    /// Adapters applied without dropout.
    Eval,
    /// Adapters applied with dropout on their input path.
    Train(&'r mut SeededRng),
}

/// Frozen projection plus an optional adapter.
#[derive(Debug, Clone, Copy)]
pub struct LoraLinear {
    pub base: Linear,
    pub adapter: LoraAdapter,
}

/// `x·W + b + (α/r)·(drop(x)·A)·B`; dropout only in training mode.
pub fn lora_forward(g: &mut Graph, p: &mut Binder, lin: &LoraLinear, x: Var, mode: &mut LoraMode) -> Result<Var> {
    let base = lin.base.forward(g, p, x)?;
    let rng = match mode {
        LoraMode::Off => return Ok(base),
        LoraMode::Eval => None,
        LoraMode::Train(rng) => Some(rng),
    };
    let a = p.var(g, lin.adapter.a);
    let b = p.var(g, lin.adapter.b);
    if g.rows(a) != g.cols(x) || g.cols(a) != g.rows(b) || g.cols(b) != g.cols(base) {
        return Err(shape_err(
            "lora_forward",
            format!("x {:?}, A {:?}, B {:?}, base out {}", g.shape(x), g.shape(a), g.shape(b), g.cols(base)),
        ));
    }
    let x_in = match rng {
        Some(rng) if lin.adapter.dropout > 0.0 => {
            let keep = 1.0 - lin.adapter.dropout;
            let (r, c) = g.shape(x);
            let mask: Vec<f64> = (0..r * c).map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 }).collect();
            let m = g.constant(r, c, mask)?;
            g.mul(x, m)?
        }
        _ => x,
    };
    let low = g.matmul(x_in, a)?;
    let up = g.matmul(low, b)?;
    let up = g.scale(up, lin.adapter.scale);
    g.add(base, up)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct DecoderConfig {
    pub blocks: usize,
    /// FFN hidden width as a multiple of the model width.
    pub ffn_mult: usize,
    pub lora: LoraConfig,
    /// Longest greedy output, excluding EOS.
    pub max_decode: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { blocks: 2, ffn_mult: 4, lora: LoraConfig::default(), max_decode: 16 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub q: LoraLinear,
    pub k: Linear,
    pub v: LoraLinear,
    pub o: Linear,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

/// Keys and values of the prompt rows for every block.
#[derive(Debug, Clone)]
pub struct PromptStates {
    pub len: usize,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ToyDecoder {
    pub cfg: DecoderConfig,
    pub width: usize,
    /// Rows of `embed`; ids `0..outputs` are predictable.
    pub vocab: usize,
    pub outputs: usize,
    pub embed: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
    /// Output logits reuse the first `outputs` embedding rows.
    pub out_bias: ParamId,
}

impl ToyDecoder {
    /// Base weights come from `base_rng`, adapters from `lora_rng`, so the two
    /// can be seeded independently.
    pub fn new(
        store: &mut ParamStore,
        cfg: DecoderConfig,
        width: usize,
        vocab: usize,
        outputs: usize,
        base_rng: &mut SeededRng,
        lora_rng: &mut SeededRng,
    ) -> Result<Self> {
        if outputs > vocab || width == 0 || cfg.blocks == 0 {
            return Err(Error::Config(format!("decoder with width {width}, {outputs} outputs over {vocab} tokens")));
        }
        let grp = Group::DecoderBase;
        let embed = store.add("decoder.embed", grp, Array::randn(&[vocab, width], 1.0, base_rng))?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let n = format!("decoder.block{i}");
            let q = Linear::new(store, &format!("{n}.q"), grp, width, width, base_rng)?;
            let k = Linear::new(store, &format!("{n}.k"), grp, width, width, base_rng)?;
            let v = Linear::new(store, &format!("{n}.v"), grp, width, width, base_rng)?;
            let o = Linear::new(store, &format!("{n}.o"), grp, width, width, base_rng)?;
            let ffn = Mlp::new(store, &format!("{n}.ffn"), grp, [width, width * cfg.ffn_mult, width], base_rng)?;
            blocks.push(DecoderBlock {
                norm1: LayerNorm::new(store, &format!("{n}.ln1"), grp, width)?,
                q: LoraLinear { base: q, adapter: LoraAdapter::new(store, &format!("{n}.q"), width, width, cfg.lora, lora_rng)? },
                k,
                v: LoraLinear { base: v, adapter: LoraAdapter::new(store, &format!("{n}.v"), width, width, cfg.lora, lora_rng)? },
                o,
                norm2: LayerNorm::new(store, &format!("{n}.ln2"), grp, width)?,
                ffn,
            });
        }
        let final_norm = LayerNorm::new(store, "decoder.ln_f", grp, width)?;
        let out_bias = store.add("decoder.out_bias", grp, Array::zeros(&[1, outputs]))?;
        Ok(Self { cfg, width, vocab, outputs, embed, blocks, final_norm, out_bias })
    }

    fn embed_tokens(&self, g: &mut Graph, p: &mut Binder, ids: &[usize], start: usize) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::UnknownToken(format!("decoder id {bad} outside {}", self.vocab)));
        }
        let table = p.var(g, self.embed);
        let e = g.gather(table, ids)?;
        let pos = g.constant(ids.len(), self.width, sinusoidal(start, ids.len(), self.width))?;
        g.add(e, pos)
    }

    /// One block over `x`, whose rows sit after `prefix_len` cached rows.
    fn block(
        &self,
        g: &mut Graph,
        p: &mut Binder,
        b: &DecoderBlock,
        x: Var,
        cached: Option<(Var, Var)>,
        mode: &mut LoraMode,
    ) -> Result<(Var, Var, Var)> {
        let h = b.norm1.forward(g, p, x)?;
        let q = lora_forward(g, p, &b.q, h, mode)?;
        let k = b.k.forward(g, p, h)?;
        let v = lora_forward(g, p, &b.v, h, mode)?;
        let (k_all, v_all, offset) = match cached {
            Some((pk, pv)) => (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?, g.rows(pk)),
            None => (k, v, 0),
        };
        let a = g.attention(q, k_all, v_all, Mask::Causal { offset })?;
        let a = b.o.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let h = b.norm2.forward(g, p, x)?;
        let h = b.ffn.forward(g, p, h)?;
        Ok((g.add(x, h)?, k, v))
    }

    /// Keys and values of the prompt rows, block by block.
    pub fn prompt_states(&self, g: &mut Graph, p: &mut Binder, prompt: &[usize], mode: &mut LoraMode) -> Result<PromptStates> {
        let mut states = PromptStates { len: prompt.len(), keys: Vec::new(), values: Vec::new() };
        if prompt.is_empty() {
            return Ok(states);
        }
        let mut x = self.embed_tokens(g, p, prompt, 0)?;
        for b in &self.blocks {
            let (nx, k, v) = self.block(g, p, b, x, None, mode)?;
            states.keys.push(k);
            states.values.push(v);
            x = nx;
        }
        Ok(states)
    }

    /// Log-probabilities over output ids for each row of `tokens`
    /// (`BOS y_1 … y_n` during training), given prompt states and `Z`.
    pub fn token_log_probs(
        &self,
        g: &mut Graph,
        p: &mut Binder,
        prompt: &PromptStates,
        z: Var,
        tokens: &[usize],
        mode: &mut LoraMode,
    ) -> Result<Var> {
        if g.cols(z) != self.width {
            return Err(shape_err("decoder", format!("Z width {} but decoder width {}", g.cols(z), self.width)));
        }
        let t_z = g.rows(z);
        let zpos = g.constant(t_z, self.width, sinusoidal(prompt.len, t_z, self.width))?;
        let z_in = g.add(z, zpos)?;
        let tok = self.embed_tokens(g, p, tokens, prompt.len + t_z)?;
        let mut x = g.concat_rows(&[z_in, tok])?;
        for (i, b) in self.blocks.iter().enumerate() {
            let cached = (prompt.len > 0).then(|| (prompt.keys[i], prompt.values[i]));
            x = self.block(g, p, b, x, cached, mode)?.0;
        }
        let x = g.slice_rows(x, t_z, tokens.len())?;
        let x = self.final_norm.forward(g, p, x)?;
        let table = p.var(g, self.embed);
        let table = g.slice_rows(table, 0, self.outputs)?;
        let logits = g.matmul_nt(x, table)?;
        let logits = g.scale(logits, 1.0 / libm::sqrt(self.width as f64));
        let bias = p.var(g, self.out_bias);
        let logits = g.add(logits, bias)?;
        Ok(g.log_softmax_rows(logits))
    }
}

/// Mean negative log-likelihood of `targets[i]` under row `i` of `log_probs`.
pub fn token_nll(g: &mut Graph, log_probs: Var, targets: &[usize]) -> Result<Var> {
    let picked = g.pick(log_probs, targets)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Copies `values` into the store under fresh names; used by tests and the
/// gradient suite to build stand-alone adapters.
pub fn lora_standalone(
    store: &mut ParamStore,
    name: &str,
    w: Array,
    a: Array,
    b: Array,
    cfg: LoraConfig,
) -> Result<LoraLinear> {
    let (d_in, d_out) = w.dims2();
    let base_w = store.add(&format!("{name}.w"), Group::DecoderBase, w)?;
    let base_b = store.add(&format!("{name}.b"), Group::DecoderBase, Array::zeros(&[1, d_out]))?;
    let a_id = store.add(&format!("{name}.lora_a"), Group::Lora, a)?;
    let b_id = store.add(&format!("{name}.lora_b"), Group::Lora, b)?;
    if store.get(a_id).dims2() != (d_in, cfg.rank) || store.get(b_id).dims2() != (cfg.rank, d_out) {
        return Err(shape_err("lora", format!("rank {} adapter for {d_in}x{d_out}", cfg.rank)));
    }
    Ok(LoraLinear {
        base: Linear { w: base_w, b: base_b, fan_in: d_in, fan_out: d_out },
        adapter: LoraAdapter { a: a_id, b: b_id, rank: cfg.rank, scale: cfg.scale(), dropout: cfg.dropout },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};
    use crate::params::GroupSet;

    fn eval(store: &ParamStore, lin: &LoraLinear, x: &Array, mode: &mut LoraMode) -> Vec<f64> {
        let mut g = Graph::new();
        let mut p = Binder::new(store, GroupSet::EMPTY);
        let xv = g.leaf(x);
        let y = lora_forward(&mut g, &mut p, lin, xv, mode).unwrap();
        g.value(y).to_vec()
    }

    #[test]
    fn zero_b_is_exact_no_op() {
        let mut rng = SeededRng::new(1);
        let cfg = LoraConfig::default();
        let mut store = ParamStore::new();
        let lin = lora_standalone(
            &mut store,
            "t",
            Array::randn(&[6, 5], 1.0, &mut rng),
            Array::randn(&[6, 8], 1.0, &mut rng),
            Array::zeros(&[8, 5]),
            cfg,
        )
        .unwrap();
        let x = Array::randn(&[3, 6], 1.0, &mut rng);
        assert_eq!(eval(&store, &lin, &x, &mut LoraMode::Eval), eval(&store, &lin, &x, &mut LoraMode::Off));
    }

    #[test]
    fn matches_naive_triple_product() {
        let mut rng = SeededRng::new(2);
        let cfg = LoraConfig { rank: 8, alpha: 32.0, dropout: 0.0 };
        let (d_in, d_out) = (5, 4);
        let a = Array::randn(&[d_in, 8], 1.0, &mut rng);
        let b = Array::randn(&[8, d_out], 1.0, &mut rng);
        let mut store = ParamStore::new();
        let lin = lora_standalone(&mut store, "t", Array::zeros(&[d_in, d_out]), a.clone(), b.clone(), cfg).unwrap();
        let x = Array::randn(&[2, d_in], 1.0, &mut rng);
        let got = eval(&store, &lin, &x, &mut LoraMode::Eval);
        for i in 0..2 {
            for j in 0..d_out {
                let mut want = 0.0;
                for r in 0..8 {
                    let mut xa = 0.0;
                    for k in 0..d_in {
                        xa += x.data()[i * d_in + k] * a.data()[k * 8 + r];
                    }
                    want += xa * b.data()[r * d_out + j];
                }
                assert!((got[i * d_out + j] - 4.0 * want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let mut rng = SeededRng::new(3);
        let cfg = LoraConfig { dropout: 0.0, ..LoraConfig::default() };
        let mut store = ParamStore::new();
        let lin = lora_standalone(
            &mut store,
            "t",
            Array::randn(&[4, 4], 1.0, &mut rng),
            Array::randn(&[4, 8], 1.0, &mut rng),
            Array::randn(&[8, 4], 1.0, &mut rng),
            cfg,
        )
        .unwrap();
        let x = Array::randn(&[3, 4], 1.0, &mut rng);
        let mut drng = SeededRng::new(4);
        assert_eq!(eval(&store, &lin, &x, &mut LoraMode::Train(&mut drng)), eval(&store, &lin, &x, &mut LoraMode::Eval));
    }

    #[test]
    fn rank_mismatch_is_error() {
        let mut store = ParamStore::new();
        let cfg = LoraConfig::default();
        let r = lora_standalone(&mut store, "t", Array::zeros(&[4, 4]), Array::zeros(&[4, 3]), Array::zeros(&[3, 4]), cfg);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn gradient_wrt_adapter_passes_check() {
        let mut rng = SeededRng::new(5);
        let cfg = LoraConfig { rank: 2, alpha: 8.0, dropout: 0.1 };
        let mut store = ParamStore::new();
        let lin = lora_standalone(
            &mut store,
            "t",
            Array::randn(&[4, 3], 1.0, &mut rng),
            Array::randn(&[4, 2], 1.0, &mut rng),
            Array::randn(&[2, 3], 1.0, &mut rng),
            cfg,
        )
        .unwrap();
        let x = Array::randn(&[3, 4], 1.0, &mut rng);
        for id in [lin.adapter.a, lin.adapter.b] {
            let rep = grad_check(
                |g, v| {
                    let mut p = Binder::new(&store, GroupSet::EMPTY);
                    p.bind(id, v);
                    let xv = g.leaf(&x);
                    // fixed dropout mask: the same seed on every evaluation
                    let mut drng = SeededRng::new(6);
                    let y = lora_forward(g, &mut p, &lin, xv, &mut LoraMode::Train(&mut drng))?;
                    let y = g.tanh(y);
                    Ok(g.sum(y))
                },
                store.get(id),
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-4);
        }
    }

    fn decoder(seed: u64) -> (ParamStore, ToyDecoder) {
        let mut store = ParamStore::new();
        let d = ToyDecoder::new(
            &mut store,
            DecoderConfig { blocks: 2, ffn_mult: 2, ..DecoderConfig::default() },
            8,
            12,
            9,
            &mut SeededRng::new(seed),
            &mut SeededRng::new(seed + 1),
        )
        .unwrap();
        (store, d)
    }

    #[test]
    fn cached_prompt_matches_full_causal_pass() {
        // Treating the prompt as part of Z must give identical token outputs.
        let (store, d) = decoder(7);
        let prompt = [9, 10, 11, 3];
        let tokens = [1, 4, 5];
        let zdata = Array::randn(&[3, 8], 1.0, &mut SeededRng::new(8));
        let mut g = Graph::new();
        let mut p = Binder::new(&store, GroupSet::EMPTY);
        let ps = d.prompt_states(&mut g, &mut p, &prompt, &mut LoraMode::Eval).unwrap();
        let z = g.leaf(&zdata);
        let cached = d.token_log_probs(&mut g, &mut p, &ps, z, &tokens, &mut LoraMode::Eval).unwrap();
        let cached = g.value(cached).to_vec();

        let mut g = Graph::new();
        let mut p = Binder::new(&store, GroupSet::EMPTY);
        let table = p.var(&mut g, d.embed);
        let pe = g.gather(table, &prompt).unwrap();
        let z = g.leaf(&zdata);
        let joint = g.concat_rows(&[pe, z]).unwrap();
        // positions of the joint block start at 0, exactly as with a cached prompt
        let empty = PromptStates { len: 0, keys: Vec::new(), values: Vec::new() };
        let full = d.token_log_probs(&mut g, &mut p, &empty, joint, &tokens, &mut LoraMode::Eval).unwrap();
        for (a, b) in cached.iter().zip(g.value(full)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}
