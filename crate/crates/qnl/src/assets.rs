//! Prompt wording and few-shot examples, loaded from a directory of plain
//! files so they can be edited without a rebuild.
//!
//! A directory may hold any of `task_description.txt`,
//! `translate_instruction.txt`, `negative_instruction.txt` and
//! `examples.json`; missing files fall back to the built-in defaults.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use qnl_core::prompt::{FewShotExample, PromptTemplate};
use thiserror::Error;

const TASK_DESCRIPTION: &str = include_str!("../assets/prompts/task_description.txt");
const TRANSLATE_INSTRUCTION: &str = include_str!("../assets/prompts/translate_instruction.txt");
const NEGATIVE_INSTRUCTION: &str = include_str!("../assets/prompts/negative_instruction.txt");
const EXAMPLES: &str = include_str!("../assets/prompts/examples.json");

#[derive(Debug, Error)]
pub enum AssetError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("asked for {k} few-shot examples but only {available} are available")]
    TooFewExamples { k: usize, available: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAssets {
    pub template: PromptTemplate,
    pub examples: Vec<FewShotExample>,
}

fn parse_examples(text: &str, origin: &str) -> Result<Vec<FewShotExample>, AssetError> {
    serde_json::from_str(text).map_err(|e| AssetError::Invalid {
        path: origin.to_string(),
        message: e.to_string(),
    })
}

impl PromptAssets {
    pub fn builtin() -> Self {
        Self {
            template: PromptTemplate {
                task_description: TASK_DESCRIPTION.trim_end().to_string(),
                translate_instruction: TRANSLATE_INSTRUCTION.trim_end().to_string(),
                negative_instruction: NEGATIVE_INSTRUCTION.trim_end().to_string(),
                k: qnl_core::prompt::DEFAULT_K,
            },
            examples: parse_examples(EXAMPLES, "builtin examples.json").expect("builtin examples parse"),
        }
    }

    /// Built-in defaults overridden by whatever files `dir` contains.
    pub fn load(dir: Option<&Path>) -> Result<Self, AssetError> {
        let mut assets = Self::builtin();
        let Some(dir) = dir else {
            return Ok(assets);
        };
        let read = |name: &str| -> Result<Option<String>, AssetError> {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
                Err(source) => Err(AssetError::Io {
                    path: path.display().to_string(),
                    source,
                }),
            }
        };
        if let Some(s) = read("task_description.txt")? {
            assets.template.task_description = s.trim_end().to_string();
        }
        if let Some(s) = read("translate_instruction.txt")? {
            assets.template.translate_instruction = s.trim_end().to_string();
        }
        if let Some(s) = read("negative_instruction.txt")? {
            assets.template.negative_instruction = s.trim_end().to_string();
        }
        if let Some(s) = read("examples.json")? {
            assets.examples = parse_examples(&s, &dir.join("examples.json").display().to_string())?;
        }
        Ok(assets)
    }

    /// Uses the first `k` examples.
    pub fn with_k(mut self, k: usize) -> Result<Self, AssetError> {
        if k > self.examples.len() {
            return Err(AssetError::TooFewExamples {
                k,
                available: self.examples.len(),
            });
        }
        self.examples.truncate(k);
        self.template.k = k;
        Ok(self)
    }
}
