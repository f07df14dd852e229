//! Explanation records: newline-delimited JSON, one record per line.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FaithError, Result};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    TwoHop,
    Classification,
}

impl FromStr for Task {
    type Err = FaithError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "two_hop" | "twohop" | "2hop" | "2_hop" => Ok(Task::TwoHop),
            "classification" | "classif" => Ok(Task::Classification),
            _ => Err(FaithError::UnknownTask(s.to_string())),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::TwoHop => "two_hop",
            Task::Classification => "classification",
        })
    }
}

/// Ground truth for a record: the 2-hop chain `(o1, r1, o2, r2, o3)` or a
/// class label with per-concept input presence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub o1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub o2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub o3: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub concept_presence: BTreeMap<String, bool>,
}

impl GoldAnnotation {
    pub fn chain(o1: &str, r1: &str, o2: &str, r2: &str, o3: &str) -> Self {
        Self {
            o1: Some(o1.into()),
            r1: Some(r1.into()),
            o2: Some(o2.into()),
            r2: Some(r2.into()),
            o3: Some(o3.into()),
            ..Default::default()
        }
    }

    pub fn has_chain(&self) -> bool {
        self.o1.is_some() && self.r1.is_some() && self.o2.is_some() && self.r2.is_some() && self.o3.is_some()
    }
}

/// Machine-readable content of an explanation, emitted by the synthetic lab
/// so extraction can be checked without a judge.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StructuredNle {
    #[serde(default)]
    pub bridge: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub concepts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    #[serde(default)]
    pub id: String,
    pub input_text: String,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    pub self_nle: String,
    #[serde(default)]
    pub extracted_concepts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<GoldAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured: Option<StructuredNle>,
}

impl ExplanationRecord {
    pub fn validate(&self, task: Task) -> std::result::Result<(), String> {
        if let Some(p) = self.probability {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("probability {p} outside [0,1]"));
            }
        }
        match task {
            Task::TwoHop => match &self.gold {
                Some(g) if g.has_chain() => Ok(()),
                Some(_) => Err("2-hop gold annotation needs o1, r1, o2, r2 and o3".into()),
                None => Ok(()),
            },
            Task::Classification => match &self.gold {
                Some(g) if g.class_label.is_none() => Err("classification gold annotation needs class_label".into()),
                _ => Ok(()),
            },
        }
    }

    /// Whether the prediction matches the gold answer, when one is known.
    pub fn prediction_correct(&self) -> Option<bool> {
        let gold = self.gold.as_ref()?;
        if let Some(o3) = &gold.o3 {
            return Some(text::token_set_match(o3, &self.prediction));
        }
        gold.class_label
            .as_ref()
            .map(|label| text::normalize(label) == text::normalize(&self.prediction))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestFilters {
    /// Keep at most this many records per (normalized) prediction.
    #[serde(default)]
    pub max_answer_occurrences: Option<usize>,
    /// Drop 2-hop records whose r1 or r2 contains any of these phrases.
    #[serde(default)]
    pub relation_blocklist: Vec<String>,
}

impl IngestFilters {
    pub fn is_empty(&self) -> bool {
        self.max_answer_occurrences.is_none() && self.relation_blocklist.is_empty()
    }
}

fn parse_lines(text: &str, task: Task) -> Result<Vec<ExplanationRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ExplanationRecord = serde_json::from_str(line).map_err(|e| FaithError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        rec.validate(task).map_err(|message| FaithError::Schema { line: line_no, message })?;
        if rec.id.is_empty() {
            rec.id = format!("rec-{line_no:05}");
        }
        out.push(rec);
    }
    Ok(out)
}

/// Reads records without filtering.
pub fn load_records(path: &Path, task: Task) -> Result<Vec<ExplanationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| FaithError::io(path, e))?;
    parse_lines(&text, task)
}

pub fn ingest_records(path: &Path, task: Task, filters: &IngestFilters) -> Result<Vec<ExplanationRecord>> {
    let records = load_records(path, task)?;
    Ok(apply_filters(records, filters))
}

pub(crate) fn apply_filters(records: Vec<ExplanationRecord>, filters: &IngestFilters) -> Vec<ExplanationRecord> {
    let blocked: Vec<String> = filters.relation_blocklist.iter().map(|r| text::normalize(r)).collect();
    let mut seen: HashMap<String, usize> = HashMap::new();
    records
        .into_iter()
        .filter(|rec| {
            let Some(gold) = &rec.gold else { return true };
            !blocked.iter().any(|b| {
                [&gold.r1, &gold.r2]
                    .into_iter()
                    .flatten()
                    .any(|r| text::normalize(r).contains(b.as_str()))
            })
        })
        .filter(|rec| match filters.max_answer_occurrences {
            None => true,
            Some(cap) => {
                let n = seen.entry(text::normalize(&rec.prediction)).or_insert(0);
                *n += 1;
                *n <= cap
            }
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[ExplanationRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| FaithError::io(path, e))?;
    f.write_all(&buf).map_err(|e| FaithError::io(path, e))
}
