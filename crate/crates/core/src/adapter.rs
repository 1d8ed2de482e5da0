//! Speech adapter and the frozen encoder stand-in that feeds it.
//!
//! The adapter maps encoder frames of width `d_in` to `H_down` (width `d_h`,
//! `⌈T/stride⌉` frames) and `Z` (width `d_llm`):
//!
//! ```text
//! linear → conv block × n → pointwise + stride → attention block × m → H_down
//! Z = linear(H_down)
//! ```
//!
//! Batches are processed item by item on valid frames only, then zero-padded,
//! so padding can never leak into valid outputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Mask, Var};
use crate::nn::{sinusoidal, LayerNorm, Linear, Mlp};
use crate::params::{Binder, Group, ParamId, ParamStore};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct AdapterConfig {
    pub d_in: usize,
    pub d_h: usize,
    pub kernel: usize,
    pub stride: usize,
    pub conv_blocks: usize,
    pub attn_blocks: usize,
    pub d_llm: usize,
    /// FFN hidden width as a multiple of `d_h`.
    pub ffn_mult: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { d_in: 1280, d_h: 1024, kernel: 7, stride: 2, conv_blocks: 2, attn_blocks: 2, d_llm: 3584, ffn_mult: 2 }
    }
}

impl AdapterConfig {
    pub fn toy(d_in: usize, d_h: usize, d_llm: usize) -> Self {
        Self { d_in, d_h, d_llm, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("adapter kernel {} must be odd", self.kernel)));
        }
        if self.stride == 0 {
            return Err(Error::Config("adapter stride must be ≥ 1".into()));
        }
        if self.d_in == 0 || self.d_h == 0 || self.d_llm == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("adapter widths must be positive".into()));
        }
        Ok(())
    }

    /// Frames after downsampling.
    pub fn output_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride)
    }
}

/// A batch of zero-padded `frames × width` matrices with valid lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub items: Vec<Array>,
    pub lengths: Vec<usize>,
}

impl FeatureSequence {
    /// Pads every item to the longest one.
    pub fn from_items(items: Vec<Array>) -> Result<Self> {
        let width = items.first().map_or(0, |a| a.dims2().1);
        if let Some(bad) = items.iter().find(|a| a.dims2().1 != width) {
            return Err(shape_err("feature_sequence", format!("width {} among width {width}", bad.dims2().1)));
        }
        let lengths: Vec<usize> = items.iter().map(|a| a.dims2().0).collect();
        let max = lengths.iter().copied().max().unwrap_or(0);
        let items = items
            .into_iter()
            .map(|a| {
                let mut data = a.into_data();
                data.resize(max * width, 0.0);
                Array::matrix(max, width, data)
            })
            .collect::<Result<_>>()?;
        Ok(Self { items, lengths })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Valid rows of item `i`.
    pub fn valid(&self, i: usize) -> Array {
        let (_, w) = self.items[i].dims2();
        let n = self.lengths[i];
        Array::matrix(n, w, self.items[i].data()[..n * w].to_vec()).expect("valid rows fit")
    }
}

/// `x + GELU(pointwise(depthwise(LN(x))))`.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlock {
    pub norm: LayerNorm,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise: Linear,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, name: &str, width: usize, kernel: usize, rng: &mut SeededRng) -> Result<Self> {
        let std = 1.0 / libm::sqrt(kernel as f64);
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.ln"), Group::Adapter, width)?,
            depthwise: store.add(&format!("{name}.dw"), Group::Adapter, Array::randn(&[kernel, width], std, rng))?,
            depthwise_bias: store.add(&format!("{name}.dw_b"), Group::Adapter, Array::zeros(&[1, width]))?,
            pointwise: Linear::new(store, &format!("{name}.pw"), Group::Adapter, width, width, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, p, x)?;
        let w = p.var(g, self.depthwise);
        let h = g.depthwise_conv1d(h, w)?;
        let b = p.var(g, self.depthwise_bias);
        let h = g.add(h, b)?;
        let h = self.pointwise.forward(g, p, h)?;
        let h = g.gelu(h);
        g.add(x, h)
    }
}

/// Pre-norm single-head self-attention followed by a pre-norm FFN.
#[derive(Debug, Clone, Copy)]
pub struct AttnBlock {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

impl AttnBlock {
    fn new(store: &mut ParamStore, name: &str, width: usize, ffn: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), Group::Adapter, width)?,
            q: Linear::new(store, &format!("{name}.q"), Group::Adapter, width, width, rng)?,
            k: Linear::new(store, &format!("{name}.k"), Group::Adapter, width, width, rng)?,
            v: Linear::new(store, &format!("{name}.v"), Group::Adapter, width, width, rng)?,
            o: Linear::new(store, &format!("{name}.o"), Group::Adapter, width, width, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), Group::Adapter, width)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), Group::Adapter, [width, ffn, width], rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let q = self.q.forward(g, p, h)?;
        let k = self.k.forward(g, p, h)?;
        let v = self.v.forward(g, p, h)?;
        let a = g.attention(q, k, v, Mask::None)?;
        let a = self.o.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let h = self.ffn.forward(g, p, h)?;
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct Adapter {
    pub cfg: AdapterConfig,
    pub input: Linear,
    pub convs: Vec<ConvBlock>,
    pub down: Linear,
    pub attns: Vec<AttnBlock>,
    pub out: Linear,
}

/// One item's adapter outputs over its valid frames.
#[derive(Debug, Clone, Copy)]
pub struct AdapterItem {
    pub h_down: Var,
    pub z: Var,
}

/// Zero-padded batch outputs.
#[derive(Debug, Clone)]
pub struct AdapterBatch {
    pub h_down: Vec<Var>,
    pub z: Vec<Var>,
    pub lengths: Vec<usize>,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, cfg: AdapterConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let input = Linear::new(store, "adapter.in", Group::Adapter, cfg.d_in, cfg.d_h, rng)?;
        let convs = (0..cfg.conv_blocks)
            .map(|i| ConvBlock::new(store, &format!("adapter.conv{i}"), cfg.d_h, cfg.kernel, rng))
            .collect::<Result<_>>()?;
        let down = Linear::new(store, "adapter.down", Group::Adapter, cfg.d_h, cfg.d_h, rng)?;
        let attns = (0..cfg.attn_blocks)
            .map(|i| AttnBlock::new(store, &format!("adapter.attn{i}"), cfg.d_h, cfg.d_h * cfg.ffn_mult, rng))
            .collect::<Result<_>>()?;
        let out = Linear::new(store, "adapter.out", Group::Adapter, cfg.d_h, cfg.d_llm, rng)?;
        Ok(Self { cfg, input, convs, down, attns, out })
    }

    /// Runs the pipeline on the valid frames `x` (`T × d_in`).
    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<AdapterItem> {
        if g.cols(x) != self.cfg.d_in {
            return Err(shape_err("adapter", format!("input width {} but d_in = {}", g.cols(x), self.cfg.d_in)));
        }
        if g.rows(x) == 0 {
            return Err(Error::Empty("adapter input has no frames".into()));
        }
        let mut h = self.input.forward(g, p, x)?;
        for block in &self.convs {
            h = block.forward(g, p, h)?;
        }
        // the pointwise projection is per frame, so it commutes with row selection
        let h = g.subsample_rows(h, self.cfg.stride)?;
        let mut h = self.down.forward(g, p, h)?;
        for block in &self.attns {
            h = block.forward(g, p, h)?;
        }
        let z = self.out.forward(g, p, h)?;
        Ok(AdapterItem { h_down: h, z })
    }
}

/// Batch forward: each item on its valid frames, outputs zero-padded to the
/// batch maximum.
pub fn adapter_forward(g: &mut Graph, p: &mut Binder, adapter: &Adapter, batch: &FeatureSequence) -> Result<AdapterBatch> {
    let max_in = batch.items.first().map_or(0, |a| a.dims2().0);
    let max_out = adapter.cfg.output_len(max_in);
    let mut out = AdapterBatch { h_down: Vec::new(), z: Vec::new(), lengths: Vec::new() };
    for i in 0..batch.len() {
        let x = g.leaf(&batch.valid(i));
        let item = adapter.forward(g, p, x)?;
        out.lengths.push(g.rows(item.h_down));
        out.h_down.push(g.pad_rows(item.h_down, max_out)?);
        out.z.push(g.pad_rows(item.z, max_out)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct EncoderConfig {
    pub d_in: usize,
    pub frames_per_stem: usize,
    /// Scale of the per-language signature vector.
    pub signature_std: f64,
    /// Scale of the added sinusoidal position code.
    pub position_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_in: 32, frames_per_stem: 2, signature_std: 0.5, position_scale: 0.5 }
    }
}

/// One source morpheme: a vocabulary id plus whether it continues a
/// compound started by the previous stem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SourceStem {
    pub id: usize,
    pub joined: bool,
}

/// Frozen random "acoustic" features standing in for a pretrained encoder.
///
/// Each stem contributes `frames_per_stem` copies of its embedding, plus a
/// language signature, a junction marker inside compounds, a position code
/// and seeded Gaussian noise.
#[derive(Debug, Clone, Copy)]
pub struct EncoderStandin {
    pub cfg: EncoderConfig,
    pub table: ParamId,
    pub signatures: ParamId,
    pub junction: ParamId,
    pub vocab: usize,
}

impl EncoderStandin {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig, vocab: usize, languages: usize, rng: &mut SeededRng) -> Result<Self> {
        if cfg.frames_per_stem == 0 || cfg.d_in == 0 {
            return Err(Error::Config("encoder needs positive width and frames per stem".into()));
        }
        Ok(Self {
            cfg,
            table: store.add("encoder.table", Group::Encoder, Array::randn(&[vocab.max(1), cfg.d_in], 1.0, rng))?,
            signatures: store.add("encoder.signature", Group::Encoder, Array::randn(&[languages.max(1), cfg.d_in], cfg.signature_std, rng))?,
            junction: store.add("encoder.junction", Group::Encoder, Array::randn(&[1, cfg.d_in], 1.0, rng))?,
            vocab,
        })
    }

    /// `frames_per_stem · stems.len()` frames of width `d_in`.
    pub fn encode(&self, store: &ParamStore, stems: &[SourceStem], lang: usize, noise_std: f64, noise_seed: u64) -> Result<Array> {
        if let Some(bad) = stems.iter().find(|s| s.id >= self.vocab) {
            return Err(Error::UnknownToken(format!("source id {} outside vocabulary of {}", bad.id, self.vocab)));
        }
        let sig = store.get(self.signatures);
        if lang >= sig.dims2().0 {
            return Err(Error::UnknownLanguage(format!("language index {lang}")));
        }
        let d = self.cfg.d_in;
        let k = self.cfg.frames_per_stem;
        let frames = stems.len() * k;
        let table = store.get(self.table);
        let sig = sig.row(lang);
        let junction = store.get(self.junction).row(0);
        let pos = sinusoidal(0, frames, d);
        let mut rng = SeededRng::new(noise_seed);
        let mut data = vec![0.0; frames * d];
        for (s, stem) in stems.iter().enumerate() {
            let emb = table.row(stem.id);
            for f in 0..k {
                let t = s * k + f;
                let row = &mut data[t * d..(t + 1) * d];
                for j in 0..d {
                    let mut v = emb[j] + sig[j] + self.cfg.position_scale * pos[t * d + j];
                    if stem.joined {
                        v += junction[j];
                    }
                    row[j] = v + noise_std * rng.normal();
                }
            }
        }
        Array::matrix(frames, d, data)
    }
}
