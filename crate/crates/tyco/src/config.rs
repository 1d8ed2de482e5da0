//! Run configuration, language registry and prompt template files.
//!
//! All three are UTF-8 JSON. A run config is merged key by key onto the
//! defaults, so any omitted field takes its default value; keys the defaults
//! do not know are rejected with their path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use tyco_core::model::objective::CtcWeights;
use tyco_core::model::train::Schedule;
use tyco_core::model::{ModelConfig, Variants};
use tyco_core::prompting::PromptTemplates;
use tyco_core::synthdata::{GrammarConfig, SynthLanguageSpec};
use tyco_core::typology::{Family, Morphology, Registry, Reordering};

use crate::error::{Error, Result};

/// Synthetic corpus recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub languages: Vec<SynthLanguageSpec>,
    /// Utterances per language, in `languages` order.
    pub sizes: Vec<usize>,
    pub grammar: GrammarConfig,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let languages = SynthLanguageSpec::defaults();
        let sizes = vec![2000; languages.len()];
        Self { languages, sizes, grammar: GrammarConfig::default(), seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Registry file; the built-in four languages when absent.
    pub registry: Option<PathBuf>,
    /// Prompt template file; built-in templates when absent.
    pub templates: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: Schedule,
    /// Seeds trainable initialisation, batch order, dropout and the budget subset.
    pub seed: u64,
    pub variants: Variants,
    /// Share of the training split used, in (0, 1].
    pub budget: f64,
    pub out: PathBuf,
    /// Directory for pretrained decoder bases, shared between runs.
    pub pretrain_cache: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            registry: None,
            templates: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: Schedule::default(),
            seed: 1,
            variants: Variants::default(),
            budget: 1.0,
            out: PathBuf::from("runs/default"),
            pretrain_cache: None,
        }
    }
}

/// A parsed config plus the notes produced while resolving it.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    /// CTC weights that differ from the stage defaults.
    pub overrides: Vec<String>,
    /// Valid but suspicious settings.
    pub warnings: Vec<String>,
}

impl RunConfig {
    /// Reads `path`, resolving relative resource paths against its directory.
    pub fn load(path: &Path) -> Result<Resolved> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut resolved = Self::from_json(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut resolved.config.registry, &mut resolved.config.templates] {
            if let Some(rel) = p.as_mut().filter(|q| q.is_relative()) {
                *rel = base.join(&*rel);
            }
        }
        Ok(resolved)
    }

    /// Parses and validates config text; `origin` names it in errors.
    pub fn from_json(text: &str, origin: &str) -> Result<Resolved> {
        let user: Value = serde_json::from_str(text).map_err(|e| schema(origin, "", e))?;
        let mut merged = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        merge(&mut merged, user, "", origin)?;
        let config: RunConfig = from_value(merged, origin)?;
        config.validate()?;
        let overrides = config.lambda_overrides();
        let warnings = config.warnings();
        Ok(Resolved { config, overrides, warnings })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            return Err(Error::Invalid(format!("budget {} outside (0, 1]", self.budget)));
        }
        if self.data.languages.len() != self.data.sizes.len() {
            return Err(Error::Invalid(format!(
                "data has {} languages but {} sizes",
                self.data.languages.len(),
                self.data.sizes.len()
            )));
        }
        Ok(())
    }

    fn lambda_overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (stage, got, default) in [("stage_i", self.schedule.stage_i, CtcWeights::STAGE_I), ("stage_ii", self.schedule.stage_ii, CtcWeights::STAGE_II)] {
            for (name, v, d) in [("src", got.src, default.src), ("tgt", got.tgt, default.tgt)] {
                if v != d {
                    out.push(format!("schedule.{stage}.{name} = {v} (default {d})"));
                }
            }
        }
        out
    }

    fn warnings(&self) -> Vec<String> {
        let (a, b) = (self.schedule.stage_i, self.schedule.stage_ii);
        let mut out = Vec::new();
        for (name, one, two) in [("src", a.src, b.src), ("tgt", a.tgt, b.tgt)] {
            if two >= one {
                out.push(format!("stage II λ_{name} {two} ≥ stage I λ_{name} {one}: CTC is not down-weighted in Stage II"));
            }
        }
        out
    }

    /// Pretty JSON of every resolved field.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load_registry(&self) -> Result<Registry> {
        match &self.registry {
            Some(p) => load_registry(p),
            None => Ok(Registry::default_languages()),
        }
    }

    pub fn load_templates(&self) -> Result<PromptTemplates> {
        match &self.templates {
            Some(p) => load_json(p),
            None => Ok(PromptTemplates::default()),
        }
    }
}

fn schema(file: &str, path: &str, e: impl std::fmt::Display) -> Error {
    Error::Schema { file: file.to_string(), path: if path.is_empty() { ".".into() } else { path.to_string() }, msg: e.to_string() }
}

/// Overlays `user` onto `base`. Objects merge recursively; anything else
/// replaces. A key absent from a `base` object is an error.
fn merge(base: &mut Value, user: Value, path: &str, origin: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub, origin)?,
                    None => {
                        let known: Vec<&str> = b.keys().map(String::as_str).collect();
                        return Err(schema(origin, &sub, format!("unknown field, expected one of: {}", known.join(", "))));
                    }
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn from_value<T: DeserializeOwned>(v: Value, origin: &str) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        schema(origin, &path, e.into_inner())
    })
}

/// Parses a JSON file into `T`, reporting the failing field path.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let origin = path.display().to_string();
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let p = e.path().to_string();
        schema(&origin, &p, e.into_inner())
    })
}

/// One registry row. The residual slot is the row's position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub code: String,
    pub name: String,
    pub morphology: Morphology,
    pub reordering: Reordering,
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryFile {
    pub languages: Vec<RegistryEntry>,
}

impl RegistryFile {
    pub fn from_registry(r: &Registry) -> Self {
        let languages = r
            .profiles()
            .iter()
            .map(|p| RegistryEntry { code: p.code.clone(), name: p.name.clone(), morphology: p.morphology, reordering: p.reordering, family: p.family })
            .collect();
        Self { languages }
    }

    pub fn to_registry(&self) -> Result<Registry> {
        let mut r = Registry::new();
        for e in &self.languages {
            r.register(&e.code, &e.name, e.morphology, e.reordering, e.family)?;
        }
        Ok(r)
    }
}

pub fn load_registry(path: &Path) -> Result<Registry> {
    load_json::<RegistryFile>(path)?.to_registry()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let r = RunConfig::from_json("{}", "t").unwrap();
        assert_eq!(r.config, RunConfig::default());
        assert!(r.overrides.is_empty() && r.warnings.is_empty());
    }

    #[test]
    fn partial_lambda_keeps_stage_default_for_the_rest() {
        let r = RunConfig::from_json(r#"{"schedule": {"stage_ii": {"src": 0.02}}}"#, "t").unwrap();
        assert_eq!(r.config.schedule.stage_ii, CtcWeights { src: 0.02, tgt: 0.05 });
        assert_eq!(r.config.schedule.stage_i, CtcWeights::STAGE_I);
        assert_eq!(r.overrides.len(), 1);
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let e = RunConfig::from_json(r#"{"schedule": {"stage_i": {"srcc": 1}}}"#, "t").unwrap_err();
        match e {
            Error::Schema { path, .. } => assert_eq!(path, "schedule.stage_i.srcc"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn wrong_type_reports_its_path() {
        let e = RunConfig::from_json(r#"{"model": {"adapter": {"d_h": "wide"}}}"#, "t").unwrap_err();
        match e {
            Error::Schema { path, .. } => assert_eq!(path, "model.adapter.d_h"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn non_down_weighted_stage_two_warns() {
        let r = RunConfig::from_json(r#"{"schedule": {"stage_ii": {"src": 0.1, "tgt": 0.3}}}"#, "t").unwrap();
        assert_eq!(r.warnings.len(), 2);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig { seed: 9, ..RunConfig::default() };
        c.variants.channel_drop = Some(tyco_core::typology::Channel::Family);
        let back = RunConfig::from_json(&c.to_json(), "echo").unwrap();
        assert_eq!(back.config, c);
    }

    #[test]
    fn bad_budget_is_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"budget": 0}"#, "t"), Err(Error::Invalid(_))));
    }

    #[test]
    fn registry_file_round_trips() {
        let r = Registry::default_languages();
        assert_eq!(RegistryFile::from_registry(&r).to_registry().unwrap(), r);
    }
}
