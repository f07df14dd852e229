//! Versioned in-context prompt templates, bundled from `assets/prompts`.

use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::judge::{JudgeRequest, Message};
use crate::error::{FaithError, Result};

const TWO_HOP: &str = include_str!("../../assets/prompts/v1/two_hop.json");
const AGNEWS: &str = include_str!("../../assets/prompts/v1/classification_agnews.json");
const LEDGAR: &str = include_str!("../../assets/prompts/v1/classification_ledgar.json");
const ADAPTER: &str = include_str!("../../assets/prompts/v1/adapter.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub user: String,
    pub assistant: String,
}

/// Preprompt, fixed exemplars and a query pattern with `{name}` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: u32,
    pub preprompt: String,
    /// joins the preprompt with each user turn
    pub separator: String,
    pub examples: Vec<Exemplar>,
    pub query: String,
}

impl PromptTemplate {
    fn parse(json: &str) -> PromptTemplate {
        serde_json::from_str(json).expect("bundled prompt template is valid JSON")
    }

    /// Fills `{key}` slots in the query.
    pub fn render_query(&self, slots: &[(&str, &str)]) -> String {
        let mut q = self.query.clone();
        for (k, v) in slots {
            q = q.replace(&format!("{{{k}}}"), v);
        }
        q
    }

    /// Exemplar turns, then the preprompt plus the rendered query.
    pub fn request(&self, slots: &[(&str, &str)], max_tokens: u32) -> JudgeRequest {
        let mut messages = Vec::with_capacity(self.examples.len() * 2 + 1);
        for ex in &self.examples {
            messages.push(Message::user(format!("{}{}{}", self.preprompt, self.separator, ex.user)));
            messages.push(Message::assistant(ex.assistant.clone()));
        }
        messages.push(Message::user(format!(
            "{}{}{}",
            self.preprompt,
            self.separator,
            self.render_query(slots)
        )));
        JudgeRequest { messages, max_tokens }
    }
}

pub fn two_hop_template() -> &'static PromptTemplate {
    static T: OnceLock<PromptTemplate> = OnceLock::new();
    T.get_or_init(|| PromptTemplate::parse(TWO_HOP))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassificationDataset {
    #[default]
    AgNews,
    Ledgar,
}

impl FromStr for ClassificationDataset {
    type Err = FaithError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "agnews" => Ok(ClassificationDataset::AgNews),
            "ledgar" => Ok(ClassificationDataset::Ledgar),
            _ => Err(FaithError::invalid(format!("unknown classification dataset {s:?}"))),
        }
    }
}

pub fn classification_template(dataset: ClassificationDataset) -> &'static PromptTemplate {
    static AG: OnceLock<PromptTemplate> = OnceLock::new();
    static LG: OnceLock<PromptTemplate> = OnceLock::new();
    match dataset {
        ClassificationDataset::AgNews => AG.get_or_init(|| PromptTemplate::parse(AGNEWS)),
        ClassificationDataset::Ledgar => LG.get_or_init(|| PromptTemplate::parse(LEDGAR)),
    }
}

/// Generation and decoding settings consumed by the model adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterDefaults {
    pub version: u32,
    pub self_nle_turn: String,
    pub patchscopes_prompt: String,
    pub patchscopes_layers: Vec<usize>,
    pub generation: serde_json::Value,
    /// model id → inclusive `[lo, hi]` layer window on the last `o1` token
    pub layer_windows: std::collections::BTreeMap<String, (usize, usize)>,
}

pub fn adapter_defaults() -> &'static AdapterDefaults {
    static T: OnceLock<AdapterDefaults> = OnceLock::new();
    T.get_or_init(|| serde_json::from_str(ADAPTER).expect("bundled adapter defaults are valid JSON"))
}
