use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionKind {
    Entity,
    Relation,
}

/// A label and natural-language description for one entity or relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionEntry {
    pub label: String,
    pub kind: DescriptionKind,
    pub description: String,
    /// Set when the knowledge graph had no description for this resource.
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub missing_description: bool,
}

impl DescriptionEntry {
    pub fn new(label: impl Into<String>, kind: DescriptionKind, description: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            kind,
            description: description.into(),
            missing_description: false,
        }
    }

    pub fn without_description(label: impl Into<String>, kind: DescriptionKind) -> Self {
        Self {
            label: label.into(),
            kind,
            description: String::new(),
            missing_description: true,
        }
    }
}

/// Records which tool run produced a value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceStamp {
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    pub timestamp: String,
    /// Stable hash of the step configuration and its inputs.
    pub params_digest: String,
    /// Step settings worth reading back, such as whether reflection ran.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
}

/// A labeled query paired with a candidate translation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub query_labeled: String,
    pub text: String,
    /// 1 = correct translation, 0 = incorrect.
    pub label: u8,
}
