//! Per-language prompt assembly.
//!
//! A prompt is a shared system instruction followed by one instruction for
//! the source language. The typology-aware instruction carries translation
//! guidance for the language's morphology and word order; the plain
//! language-aware variant only names the language. Prompts depend on the
//! language code and the templates, never on the utterance.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::typology::Registry;

pub const SEPARATOR: &str = "\n";

/// Editable template texts.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct PromptTemplates {
    pub system: String,
    /// Typology-aware instruction per language code.
    pub languages: BTreeMap<String, String>,
    /// Language-aware instruction; `{name}` is replaced by the language name.
    pub language_aware: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        let mut languages = BTreeMap::new();
        for (code, text) in [
            (
                "fr",
                "The source speech is French. Watch for idiomatic expressions and lexical usage, and keep the subject verb object order.",
            ),
            (
                "es",
                "The source speech is Spanish. Watch for idiomatic expressions and lexical usage, and keep the subject verb object order.",
            ),
            (
                "de",
                "The source speech is German. Apply compound decomposition to long nouns and move clause final verbs to the English position after the subject.",
            ),
            (
                "ja",
                "The source speech is Japanese. Reorder subject object verb into subject verb object, drop case particles, infer omitted subjects and apply honorific normalization.",
            ),
        ] {
            languages.insert(code.to_string(), text.to_string());
        }
        Self {
            system: "You are a speech translation assistant. Translate the source speech into fluent English text.".to_string(),
            languages,
            language_aware: "The source speech is {name}.".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum PromptVariant {
    #[default]
    Typology,
    LanguageAware,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub system: String,
    pub instruction: String,
    /// `system` + separator + `instruction`, or just `system` on fallback.
    pub text: String,
    /// Set when the language had no registry entry or template.
    pub fallback: bool,
}

impl PromptSpec {
    fn assemble(system: &str, instruction: Option<String>) -> Self {
        match instruction {
            Some(instruction) => {
                let text = [system, instruction.as_str()].join(SEPARATOR);
                Self { system: system.to_string(), instruction, text, fallback: false }
            }
            None => Self { system: system.to_string(), instruction: String::new(), text: system.to_string(), fallback: true },
        }
    }

    /// Lower-cased words with punctuation removed.
    pub fn tokens(&self) -> Vec<String> {
        prompt_tokens(&self.text)
    }
}

pub fn prompt_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Typology-aware prompt. Unknown languages fall back to the system text.
pub fn build_prompt(code: &str, registry: &Registry, templates: &PromptTemplates) -> PromptSpec {
    let instruction = registry.lookup_profile(code).ok().and_then(|_| templates.languages.get(code).cloned());
    PromptSpec::assemble(&templates.system, instruction)
}

/// Prompt naming the source language without typological guidance.
pub fn language_aware_prompt_variant(code: &str, registry: &Registry, templates: &PromptTemplates) -> PromptSpec {
    let instruction = registry.lookup_profile(code).ok().map(|p| templates.language_aware.replace("{name}", &p.name));
    PromptSpec::assemble(&templates.system, instruction)
}

pub fn prompt_for(variant: PromptVariant, code: &str, registry: &Registry, templates: &PromptTemplates) -> PromptSpec {
    match variant {
        PromptVariant::Typology => build_prompt(code, registry, templates),
        PromptVariant::LanguageAware => language_aware_prompt_variant(code, registry, templates),
    }
}
