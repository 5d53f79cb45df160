//! Few-shot prompt templates and assembly.
//!
//! Six completion templates are supported. T1/T2 spell out "translates into"
//! between the sentence and the target header, T3/T4 are the compact
//! `Name: text` form, and T5/T6 use "<language> sentence" / "<language>
//! translation" header lines. Even-numbered templates localize their headers
//! into the source/target languages; odd-numbered ones keep them in English.
//!
//! The template separator is rendered as a newline and completed examples are
//! separated by one blank line; both are overridable on [`PromptSpec`]. By
//! default the most similar example sits closest to the sentence to
//! translate, i.e. example blocks appear in reverse rank order.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LangCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateId {
    T1,
    T2,
    T3,
    T4,
    T5,
    T6,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::T1,
        TemplateId::T2,
        TemplateId::T3,
        TemplateId::T4,
        TemplateId::T5,
        TemplateId::T6,
    ];

    fn localized(self) -> bool {
        matches!(self, TemplateId::T2 | TemplateId::T4 | TemplateId::T6)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for TemplateId {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, PromptError> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(TemplateId::T1),
            "T2" => Ok(TemplateId::T2),
            "T3" => Ok(TemplateId::T3),
            "T4" => Ok(TemplateId::T4),
            "T5" => Ok(TemplateId::T5),
            "T6" => Ok(TemplateId::T6),
            other => Err(PromptError::UnknownTemplate(other.to_string())),
        }
    }
}

/// In-prompt ordering of retrieved examples relative to the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleOrder {
    /// Rank 1 renders last, directly above the sentence to translate.
    MostSimilarAdjacent,
    /// The exact opposite: rank 1 renders first.
    LeastSimilarAdjacent,
}

impl Default for ExampleOrder {
    fn default() -> Self {
        ExampleOrder::MostSimilarAdjacent
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no display name for language {lang:?} in {in_lang:?}")]
    UnknownLanguage { lang: String, in_lang: String },
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed language-name table: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Deserialize)]
struct NameEntry {
    name: String,
    sentence: String,
    translation: String,
}

/// Display names and header phrases per (language, display language) pair.
/// The table is data, not code: ship a custom file to add directions.
#[derive(Debug, Clone)]
pub struct LanguageNameTable {
    entries: HashMap<(String, String), NameEntry>,
}

static BUILTIN_TABLE: OnceLock<LanguageNameTable> = OnceLock::new();

impl LanguageNameTable {
    fn from_json(raw: &str) -> Result<Self, PromptError> {
        let parsed: HashMap<String, HashMap<String, NameEntry>> =
            serde_json::from_str(raw).map_err(|e| PromptError::Malformed(e.to_string()))?;
        let mut entries = HashMap::new();
        for (lang, by_display) in parsed {
            for (in_lang, entry) in by_display {
                entries.insert((lang.clone(), in_lang), entry);
            }
        }
        Ok(LanguageNameTable { entries })
    }

    pub fn from_path(path: &Path) -> Result<Self, PromptError> {
        let raw = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&raw)
    }

    /// The packaged table covering eng, fra, deu, swh and wol.
    pub fn builtin() -> &'static LanguageNameTable {
        BUILTIN_TABLE.get_or_init(|| {
            Self::from_json(include_str!("../data/language_names.json"))
                .expect("packaged language-name table parses")
        })
    }

    fn entry(&self, lang: &LangCode, in_lang: &LangCode) -> Result<&NameEntry, PromptError> {
        self.entries
            .get(&(lang.as_str().to_string(), in_lang.as_str().to_string()))
            .ok_or_else(|| PromptError::UnknownLanguage {
                lang: lang.as_str().to_string(),
                in_lang: in_lang.as_str().to_string(),
            })
    }

    pub fn name(&self, lang: &LangCode, in_lang: &LangCode) -> Result<String, PromptError> {
        Ok(self.entry(lang, in_lang)?.name.clone())
    }

    pub fn sentence_phrase(
        &self,
        lang: &LangCode,
        in_lang: &LangCode,
    ) -> Result<String, PromptError> {
        Ok(self.entry(lang, in_lang)?.sentence.clone())
    }

    pub fn translation_phrase(
        &self,
        lang: &LangCode,
        in_lang: &LangCode,
    ) -> Result<String, PromptError> {
        Ok(self.entry(lang, in_lang)?.translation.clone())
    }
}

/// Display name of `lang` written in `in_lang`, from the builtin table.
pub fn localized_language_name(lang: &LangCode, in_lang: &LangCode) -> Result<String, PromptError> {
    LanguageNameTable::builtin().name(lang, in_lang)
}

/// A fully resolved prompt recipe: template, ordering, and the header strings
/// the template needs for one translation direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSpec {
    pub template: TemplateId,
    pub order: ExampleOrder,
    pub source_header: String,
    pub target_header: String,
    /// Surface form of the template separator (default: newline).
    pub diamond: String,
    /// Separator between consecutive example blocks (default: blank line).
    pub example_separator: String,
}

fn english() -> LangCode {
    LangCode::new("eng").expect("static code")
}

impl PromptSpec {
    pub fn new(
        template: TemplateId,
        order: ExampleOrder,
        source_lang: &LangCode,
        target_lang: &LangCode,
        table: &LanguageNameTable,
    ) -> Result<Self, PromptError> {
        let eng = english();
        let (src_display, tgt_display) = if template.localized() {
            (source_lang, target_lang)
        } else {
            (&eng, &eng)
        };
        let (source_header, target_header) = match template {
            TemplateId::T1 | TemplateId::T2 | TemplateId::T3 | TemplateId::T4 => (
                table.name(source_lang, src_display)?,
                table.name(target_lang, tgt_display)?,
            ),
            TemplateId::T5 | TemplateId::T6 => (
                table.sentence_phrase(source_lang, src_display)?,
                table.translation_phrase(target_lang, tgt_display)?,
            ),
        };
        Ok(PromptSpec {
            template,
            order,
            source_header,
            target_header,
            diamond: "\n".to_string(),
            example_separator: "\n\n".to_string(),
        })
    }

    pub fn with_order(mut self, order: ExampleOrder) -> Self {
        self.order = order;
        self
    }
}

/// Render one example block. With `target_text` absent the block ends right
/// after the target header, awaiting generation.
pub fn render_example(spec: &PromptSpec, source_text: &str, target_text: Option<&str>) -> String {
    let d = &spec.diamond;
    match spec.template {
        TemplateId::T3 | TemplateId::T4 => {
            let mut block = format!(
                "{src}: {text}{d}{tgt}:",
                src = spec.source_header,
                text = source_text,
                tgt = spec.target_header,
            );
            if let Some(target) = target_text {
                block.push(' ');
                block.push_str(target);
            }
            block
        }
        TemplateId::T1 | TemplateId::T2 => {
            let mut block = format!(
                "{src}{d}{text}{d}translates into{d}{tgt}{d}",
                src = spec.source_header,
                text = source_text,
                tgt = spec.target_header,
            );
            if let Some(target) = target_text {
                block.push_str(target);
                block.push_str(d);
            }
            block
        }
        TemplateId::T5 | TemplateId::T6 => {
            let mut block = format!(
                "{src}{d}{text}{d}{tgt}{d}",
                src = spec.source_header,
                text = source_text,
                tgt = spec.target_header,
            );
            if let Some(target) = target_text {
                block.push_str(target);
                block.push_str(d);
            }
            block
        }
    }
}

/// A completed demonstration, in rank order (rank 1 = most similar first).
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleTexts {
    pub source_text: String,
    pub target_text: String,
}

/// Assemble the full prompt: completed example blocks, then the query block
/// with its target pending. Under the default ordering the blocks appear in
/// reverse rank order so rank 1 sits next to the query.
pub fn build_prompt(examples: &[ExampleTexts], query_source: &str, spec: &PromptSpec) -> String {
    let query_block = render_example(spec, query_source, None);
    if examples.is_empty() {
        return query_block;
    }
    let ordered: Vec<&ExampleTexts> = match spec.order {
        ExampleOrder::MostSimilarAdjacent => examples.iter().rev().collect(),
        ExampleOrder::LeastSimilarAdjacent => examples.iter().collect(),
    };
    let mut out = String::new();
    for example in ordered {
        let block = render_example(spec, &example.source_text, Some(&example.target_text));
        out.push_str(block.trim_end_matches('\n'));
        out.push_str(&spec.example_separator);
    }
    out.push_str(&query_block);
    out
}
