//! Translation, reflection and hard-negative prompt assembly.
//!
//! A translation prompt has a fixed section order: task description, the
//! `k` few-shot examples, the entity and relation descriptions, the
//! translation instruction and finally the labeled query.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewrite::contains_absolute_iri;
use crate::types::DescriptionEntry;

pub const DEFAULT_K: usize = 4;

pub const DEFAULT_TASK_DESCRIPTION: &str =
    "You are an AI translator for converting SPARQL queries into their natural language questions. Here are some examples:";

pub const DEFAULT_TRANSLATE_INSTRUCTION: &str = "Translate the following SPARQL query into natural language; formulate the response as a question and respond in one sentence only with the translation itself.";

pub const REFLECTION_INSTRUCTION: &str =
    "Reflect on your answer and improve it if necessary; respond with only the improved question in one sentence only.";

pub const DEFAULT_NEGATIVE_INSTRUCTION: &str = "You are given a SPARQL query and a correct natural language translation of it. Write a very similar question that mentions the same entities and relations but has a distinctly different meaning, for example by inverting a relation, swapping the roles of the entities, or changing the aggregation. Respond in one sentence only with the new question itself.";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("expected {expected} few-shot examples, got {got}")]
    WrongExampleCount { expected: usize, got: usize },
    #[error("labeled query still contains an absolute IRI")]
    IriInQuery,
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub query_labeled: String,
    pub translation: String,
}

/// Editable prompt wording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task_description: String,
    pub translate_instruction: String,
    pub negative_instruction: String,
    pub k: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            task_description: DEFAULT_TASK_DESCRIPTION.to_string(),
            translate_instruction: DEFAULT_TRANSLATE_INSTRUCTION.to_string(),
            negative_instruction: DEFAULT_NEGATIVE_INSTRUCTION.to_string(),
            k: DEFAULT_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub task_description: String,
    pub examples: Vec<FewShotExample>,
    pub descriptions_block: String,
    pub query_block: String,
    /// The full translation prompt.
    pub rendered: String,
    pub reflection_instruction: String,
}

/// Quotes a string the way Python's `repr` does for `str`.
fn py_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

/// One sentence per description: `[label] is description`, or `[label]`
/// alone when the graph had none.
pub fn description_sentence(entry: &DescriptionEntry) -> String {
    if entry.missing_description || entry.description.is_empty() {
        format!("[{}]", entry.label)
    } else {
        format!("[{}] is {}", entry.label, entry.description)
    }
}

/// Single-line list of quoted description sentences; empty when there are
/// no descriptions.
pub fn render_descriptions(descriptions: &[DescriptionEntry]) -> String {
    if descriptions.is_empty() {
        return String::new();
    }
    let items: Vec<String> = descriptions.iter().map(|d| py_repr(&description_sentence(d))).collect();
    format!("[{}]", items.join(", "))
}

pub fn build_prompt(
    query_labeled: &str,
    descriptions: &[DescriptionEntry],
    examples: &[FewShotExample],
    template: &PromptTemplate,
) -> Result<PromptBundle, PromptError> {
    if query_labeled.trim().is_empty() {
        return Err(PromptError::EmptyInput("query"));
    }
    if contains_absolute_iri(query_labeled) {
        return Err(PromptError::IriInQuery);
    }
    if examples.len() != template.k {
        return Err(PromptError::WrongExampleCount {
            expected: template.k,
            got: examples.len(),
        });
    }

    let descriptions_block = render_descriptions(descriptions);
    let query_block = query_labeled.trim().to_string();

    let mut rendered = String::new();
    rendered.push_str(template.task_description.trim());
    rendered.push_str("\n\nFew Shot Examples\n");
    for ex in examples {
        rendered.push_str("\nQuery:\n");
        rendered.push_str(ex.query_labeled.trim());
        rendered.push_str("\n-\nTranslation: ");
        rendered.push_str(ex.translation.trim());
        rendered.push('\n');
    }
    rendered.push_str("\nEntity and Relation Descriptions: ");
    rendered.push_str(&descriptions_block);
    rendered.push_str("\n\n");
    rendered.push_str(template.translate_instruction.trim());
    rendered.push_str("\n\nSPARQL Query:\n");
    rendered.push_str(&query_block);
    rendered.push('\n');

    Ok(PromptBundle {
        task_description: template.task_description.clone(),
        examples: examples.to_vec(),
        descriptions_block,
        query_block,
        rendered,
        reflection_instruction: REFLECTION_INSTRUCTION.to_string(),
    })
}

/// The follow-up turn sent after the first answer. It does not depend on the
/// bundle.
pub fn build_reflection_prompt(bundle: &PromptBundle, translation: &str) -> Result<String, PromptError> {
    if translation.trim().is_empty() {
        return Err(PromptError::EmptyInput("translation"));
    }
    Ok(bundle.reflection_instruction.clone())
}

pub fn build_negative_prompt(
    query_labeled: &str,
    translation: &str,
    template: &PromptTemplate,
) -> Result<String, PromptError> {
    if query_labeled.trim().is_empty() {
        return Err(PromptError::EmptyInput("query"));
    }
    if translation.trim().is_empty() {
        return Err(PromptError::EmptyInput("translation"));
    }
    if contains_absolute_iri(query_labeled) {
        return Err(PromptError::IriInQuery);
    }
    Ok(format!(
        "{}\n\nSPARQL Query:\n{}\n\nCorrect Translation: {}\n",
        template.negative_instruction.trim(),
        query_labeled.trim(),
        translation.trim()
    ))
}
