//! Language registry and the hierarchical language encoder.
//!
//! A language is described by three coarse categories (morphology, word
//! order, family) plus a private residual slot. Each category indexes its own
//! embedding table; the four rows are concatenated, projected to the fused
//! width, layer-normalised and passed through GELU to give `r_lang`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::LayerNorm;
use crate::params::{Binder, Group, ParamId, ParamStore};
use crate::rng::SeededRng;

/// Standard deviation of embedding-table initialisation.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Morphology {
    Fusional,
    FusionalCompounding,
    Agglutinative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Reordering {
    SvoOriented,
    VerbClauseFinal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Family {
    Romance,
    Germanic,
    Japonic,
}

impl Morphology {
    pub const COUNT: usize = 3;
}

impl Reordering {
    pub const COUNT: usize = 2;
}

impl Family {
    pub const COUNT: usize = 3;
}

/// One of the four embedding channels feeding the fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Channel {
    Morphology,
    Reordering,
    Family,
    Residual,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Morphology, Channel::Reordering, Channel::Family, Channel::Residual];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Morphology => "morphology",
            Channel::Reordering => "reordering",
            Channel::Family => "family",
            Channel::Residual => "residual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageProfile {
    pub code: String,
    /// Display name, used by prompts.
    pub name: String,
    pub morphology: Morphology,
    pub reordering: Reordering,
    pub family: Family,
    /// Row of the residual table owned by this language.
    pub residual: usize,
}

impl LanguageProfile {
    fn row(&self, channel: Channel) -> usize {
        match channel {
            Channel::Morphology => self.morphology as usize,
            Channel::Reordering => self.reordering as usize,
            Channel::Family => self.family as usize,
            Channel::Residual => self.residual,
        }
    }
}

/// Ordered set of language profiles; a language's position is its index
/// everywhere a per-language table or logit is needed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Registry {
    profiles: Vec<LanguageProfile>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// French, Spanish, German and Japanese.
    pub fn default_languages() -> Self {
        let mut r = Self::new();
        let rows = [
            ("fr", "French", Morphology::Fusional, Reordering::SvoOriented, Family::Romance),
            ("es", "Spanish", Morphology::Fusional, Reordering::SvoOriented, Family::Romance),
            ("de", "German", Morphology::FusionalCompounding, Reordering::VerbClauseFinal, Family::Germanic),
            ("ja", "Japanese", Morphology::Agglutinative, Reordering::VerbClauseFinal, Family::Japonic),
        ];
        for (code, name, m, w, f) in rows {
            r.register(code, name, m, w, f).expect("built-in codes are distinct");
        }
        r
    }

    /// Adds a language with the next free residual slot.
    pub fn register(&mut self, code: &str, name: &str, morphology: Morphology, reordering: Reordering, family: Family) -> Result<()> {
        if code.is_empty() {
            return Err(Error::Config("empty language code".to_string()));
        }
        if self.index_of(code).is_some() {
            return Err(Error::Config(format!("language {code:?} registered twice")));
        }
        let residual = self.profiles.len();
        self.profiles.push(LanguageProfile {
            code: code.to_string(),
            name: name.to_string(),
            morphology,
            reordering,
            family,
            residual,
        });
        Ok(())
    }

    pub fn lookup_profile(&self, code: &str) -> Result<&LanguageProfile> {
        self.profiles.iter().find(|p| p.code == code).ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.profiles.iter().position(|p| p.code == code)
    }

    pub fn profiles(&self) -> &[LanguageProfile] {
        &self.profiles
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.profiles.iter().map(|p| p.code.as_str())
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}

/// Channel widths and fused width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct TypologyDims {
    pub morphology: usize,
    pub reordering: usize,
    pub family: usize,
    pub residual: usize,
    pub fused: usize,
}

impl Default for TypologyDims {
    fn default() -> Self {
        Self { morphology: 64, reordering: 64, family: 64, residual: 128, fused: 256 }
    }
}

impl TypologyDims {
    pub fn width(&self, channel: Channel) -> usize {
        match channel {
            Channel::Morphology => self.morphology,
            Channel::Reordering => self.reordering,
            Channel::Family => self.family,
            Channel::Residual => self.residual,
        }
    }

    /// Concatenated width of all four channels.
    pub fn concat(&self) -> usize {
        Channel::ALL.iter().map(|&c| self.width(c)).sum()
    }
}

/// `W_f`, `b_f` and the layer-norm affine of the fusion step.
#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub w: ParamId,
    pub b: ParamId,
    pub norm: LayerNorm,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, fan_in: usize, fused: usize, rng: &mut SeededRng) -> Result<Self> {
        let std = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        Ok(Self {
            w: store.add(&format!("{name}.w"), group, Array::randn(&[fan_in, fused], std, rng))?,
            b: store.add(&format!("{name}.b"), group, Array::zeros(&[1, fused]))?,
            norm: LayerNorm::new(store, &format!("{name}.ln"), group, fused)?,
        })
    }

    /// `GELU(LN(x·W_f + b_f))`.
    pub fn apply(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var> {
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        let z = g.affine(x, w, b)?;
        let z = self.norm.forward(g, p, z)?;
        Ok(g.gelu(z))
    }
}

/// The four embedding tables. A dropped channel has no table.
#[derive(Debug, Clone, Copy)]
pub struct TypologyTables {
    pub morphology: Option<ParamId>,
    pub reordering: Option<ParamId>,
    pub family: Option<ParamId>,
    pub residual: Option<ParamId>,
}

impl TypologyTables {
    pub fn get(&self, channel: Channel) -> Option<ParamId> {
        match channel {
            Channel::Morphology => self.morphology,
            Channel::Reordering => self.reordering,
            Channel::Family => self.family,
            Channel::Residual => self.residual,
        }
    }
}

/// Hierarchical encoder: tables plus fusion, optionally with one channel removed.
#[derive(Debug, Clone, Copy)]
pub struct TypologyEncoder {
    pub tables: TypologyTables,
    pub fusion: FusionParams,
    pub dims: TypologyDims,
    pub dropped: Option<Channel>,
}

impl TypologyEncoder {
    /// Removing a channel drops its table and the matching columns of `W_f`.
    pub fn new(store: &mut ParamStore, registry: &Registry, dims: TypologyDims, dropped: Option<Channel>, rng: &mut SeededRng) -> Result<Self> {
        let mut table = |channel: Channel, rows: usize, rng: &mut SeededRng| -> Result<Option<ParamId>> {
            // drawn even when dropped so the other channels keep their values
            let value = Array::randn(&[rows.max(1), dims.width(channel)], EMBED_INIT_STD, rng);
            if dropped == Some(channel) {
                return Ok(None);
            }
            store.add(&format!("typology.{}", channel.name()), Group::Typology, value).map(Some)
        };
        let tables = TypologyTables {
            morphology: table(Channel::Morphology, Morphology::COUNT, rng)?,
            reordering: table(Channel::Reordering, Reordering::COUNT, rng)?,
            family: table(Channel::Family, Family::COUNT, rng)?,
            residual: table(Channel::Residual, registry.len(), rng)?,
        };
        let fan_in = dims.concat() - dropped.map_or(0, |c| dims.width(c));
        let fusion = FusionParams::new(store, "typology.fusion", Group::Typology, fan_in, dims.fused, rng)?;
        Ok(Self { tables, fusion, dims, dropped })
    }

    /// `r_lang` for one profile, as a `1 × fused` node.
    pub fn fuse(&self, g: &mut Graph, p: &mut Binder, profile: &LanguageProfile) -> Result<Var> {
        fuse(g, p, profile, &self.tables, &self.fusion)
    }
}

/// Concatenates the profile's rows from every present table and fuses them.
pub fn fuse(g: &mut Graph, p: &mut Binder, profile: &LanguageProfile, tables: &TypologyTables, fusion: &FusionParams) -> Result<Var> {
    let mut parts = Vec::with_capacity(4);
    for channel in Channel::ALL {
        let Some(id) = tables.get(channel) else { continue };
        let table = p.var(g, id);
        let row = profile.row(channel);
        if row >= g.rows(table) {
            return Err(Error::UnknownLanguage(format!("{} has no {} row {row}", profile.code, channel.name())));
        }
        parts.push(g.gather(table, &[row])?);
    }
    let concat = g.concat_cols(&parts)?;
    fusion.apply(g, p, concat)
}

/// Ablation baseline: one free row per language, no category sharing.
#[derive(Debug, Clone, Copy)]
pub struct FlatEncoder {
    pub table: ParamId,
    pub fusion: FusionParams,
}

impl FlatEncoder {
    pub fn new(store: &mut ParamStore, registry: &Registry, dims: TypologyDims, rng: &mut SeededRng) -> Result<Self> {
        let width = dims.concat();
        let table = store.add("flat.table", Group::FlatTypology, Array::randn(&[registry.len().max(1), width], EMBED_INIT_STD, rng))?;
        let fusion = FusionParams::new(store, "flat.fusion", Group::FlatTypology, width, dims.fused, rng)?;
        Ok(Self { table, fusion })
    }

    pub fn flat_fuse(&self, g: &mut Graph, p: &mut Binder, registry: &Registry, code: &str) -> Result<Var> {
        let idx = registry.index_of(code).ok_or_else(|| Error::UnknownLanguage(code.to_string()))?;
        let table = p.var(g, self.table);
        let row = g.gather(table, &[idx])?;
        self.fusion.apply(g, p, row)
    }
}
