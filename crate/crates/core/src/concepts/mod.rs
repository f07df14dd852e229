//! Concept extraction from self-explanations: an LLM judge for free text,
//! and a deterministic path for records that carry structured fields.

mod judge;
mod prompts;

pub use judge::{
    HttpJudge, JudgeClient, JudgeRequest, JudgeResponse, Message, MockJudge, RetryingJudge, Role, JUDGE_TOKEN_ENV,
    JUDGE_URL_ENV,
};
pub use prompts::{
    adapter_defaults, classification_template, two_hop_template, AdapterDefaults, ClassificationDataset, Exemplar,
    PromptTemplate,
};

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FaithError, Result};
use crate::text;
use crate::trace::{ExplanationRecord, Task};

pub const NO_BRIDGE: &str = "no bridge object";
const MAX_TOKENS: u32 = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub id: String,
    pub display_name: String,
}

/// The task-relevant concepts. Classification sets must be non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub task: Task,
    pub concepts: Vec<ConceptEntry>,
}

impl ConceptSet {
    pub fn new(task: Task, concepts: Vec<ConceptEntry>) -> Result<Self> {
        let set = ConceptSet { task, concepts };
        set.validate()?;
        Ok(set)
    }

    /// Display names derived from ids by replacing underscores.
    pub fn from_ids<S: AsRef<str>>(task: Task, ids: &[S]) -> Result<Self> {
        Self::new(
            task,
            ids.iter()
                .map(|id| ConceptEntry {
                    id: id.as_ref().to_string(),
                    display_name: id.as_ref().replace('_', " "),
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.concepts {
            if !seen.insert(c.id.as_str()) {
                return Err(FaithError::invalid(format!("duplicate concept id {:?}", c.id)));
            }
        }
        if self.task == Task::Classification && self.concepts.is_empty() {
            return Err(FaithError::invalid("classification concept set is empty"));
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ConceptEntry> {
        self.concepts.iter().find(|c| c.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }
}

/// Normalized judge reply with markdown emphasis removed.
pub fn normalize_reply(reply: &str) -> String {
    text::normalize(&reply.replace("**", "").replace("__", ""))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeExtraction {
    /// normalized bridge object, None when the judge found none
    pub bridge: Option<String>,
    /// set when the judge replied with nothing at all
    pub empty_reply: bool,
}

fn gold_field<'a>(record: &'a ExplanationRecord, name: &str, f: impl Fn(&'a crate::trace::GoldAnnotation) -> Option<&'a String>) -> Result<&'a str> {
    record
        .gold
        .as_ref()
        .and_then(f)
        .map(String::as_str)
        .ok_or_else(|| FaithError::Missing(format!("record {} has no gold {name}", record.id)))
}

/// The judge request asking for the bridge object of a 2-hop explanation.
pub fn bridge_request(record: &ExplanationRecord) -> Result<JudgeRequest> {
    let o1 = gold_field(record, "o1", |g| g.o1.as_ref())?;
    let r1 = gold_field(record, "r1", |g| g.r1.as_ref())?;
    Ok(two_hop_template().request(
        &[("self_nle", record.self_nle.as_str()), ("r1", r1), ("o1", o1)],
        MAX_TOKENS,
    ))
}

pub fn extract_bridge_object(record: &ExplanationRecord, judge: &dyn JudgeClient) -> Result<BridgeExtraction> {
    let reply = judge.complete(&bridge_request(record)?)?;
    let norm = normalize_reply(&reply.text);
    if norm.is_empty() {
        return Ok(BridgeExtraction {
            bridge: None,
            empty_reply: true,
        });
    }
    Ok(BridgeExtraction {
        bridge: (!norm.contains(NO_BRIDGE)).then_some(norm),
        empty_reply: false,
    })
}

/// Judge request for one (prediction, explanation, concept) triple.
pub fn classification_request(record: &ExplanationRecord, concept: &ConceptEntry, dataset: ClassificationDataset) -> JudgeRequest {
    classification_template(dataset).request(
        &[
            ("prediction", record.prediction.as_str()),
            ("explanation", record.self_nle.as_str()),
            ("concept", concept.display_name.as_str()),
        ],
        MAX_TOKENS,
    )
}

/// Asks about each concept present in the input and keeps those the judge
/// answers "yes" to.
pub fn extract_classification_concepts(
    record: &ExplanationRecord,
    concept_set: &ConceptSet,
    dataset: ClassificationDataset,
    judge: &dyn JudgeClient,
) -> Result<Vec<String>> {
    let gold = record
        .gold
        .as_ref()
        .ok_or_else(|| FaithError::Missing(format!("record {} has no concept presence annotations", record.id)))?;
    let mut out = Vec::new();
    for (id, &present) in &gold.concept_presence {
        if !present {
            continue;
        }
        let entry = concept_set.get(id).ok_or_else(|| FaithError::UnknownConcept(id.clone()))?;
        let reply = judge.complete(&classification_request(record, entry, dataset))?;
        if normalize_reply(&reply.text).starts_with("yes") {
            out.push(id.clone());
        }
    }
    Ok(out)
}

/// Reads the structured explanation fields of a synthetic record.
pub fn deterministic_extract(record: &ExplanationRecord, task: Task) -> Result<Vec<String>> {
    let s = record
        .structured
        .as_ref()
        .ok_or_else(|| FaithError::Missing(format!("record {} has no structured explanation", record.id)))?;
    Ok(match task {
        Task::TwoHop => s.bridge.iter().cloned().collect(),
        Task::Classification => s.concepts.clone(),
    })
}

/// Any source of extracted concepts. For 2-hop records the result holds at
/// most one bridge object.
pub trait ConceptExtractor: Send + Sync {
    fn extract(&self, record: &ExplanationRecord) -> Result<Vec<String>>;
}

pub struct DeterministicExtractor {
    pub task: Task,
}

impl ConceptExtractor for DeterministicExtractor {
    fn extract(&self, record: &ExplanationRecord) -> Result<Vec<String>> {
        deterministic_extract(record, self.task)
    }
}

/// Uses the concepts already stored on the record, e.g. human annotations.
pub struct PrefilledExtractor;

impl ConceptExtractor for PrefilledExtractor {
    fn extract(&self, record: &ExplanationRecord) -> Result<Vec<String>> {
        Ok(record.extracted_concepts.clone())
    }
}

pub struct JudgeExtractor<'j> {
    pub judge: &'j dyn JudgeClient,
    pub task: Task,
    /// required for classification
    pub concept_set: Option<ConceptSet>,
    pub dataset: ClassificationDataset,
}

impl ConceptExtractor for JudgeExtractor<'_> {
    fn extract(&self, record: &ExplanationRecord) -> Result<Vec<String>> {
        match self.task {
            Task::TwoHop => Ok(extract_bridge_object(record, self.judge)?.bridge.into_iter().collect()),
            Task::Classification => {
                let set = self
                    .concept_set
                    .as_ref()
                    .ok_or_else(|| FaithError::Precondition("classification extraction needs a concept set".into()))?;
                extract_classification_concepts(record, set, self.dataset, self.judge)
            }
        }
    }
}

/// Extracts over a batch with at most `max_in_flight` concurrent calls.
/// Output order follows the input.
pub fn extract_batch(
    records: &[ExplanationRecord],
    extractor: &dyn ConceptExtractor,
    max_in_flight: usize,
) -> Result<Vec<Vec<String>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| FaithError::invalid(format!("thread pool: {e}")))?;
    pool.install(|| records.par_iter().map(|r| extractor.extract(r)).collect())
}

/// Fraction of records on which two extractions name the same concepts
/// after normalization.
pub fn extraction_agreement(a: &[Vec<String>], b: &[Vec<String>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FaithError::SizeMismatch(format!("{} vs {} extractions", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(FaithError::invalid("agreement over zero records"));
    }
    let norm = |v: &[String]| v.iter().map(|s| normalize_reply(s)).collect::<BTreeSet<_>>();
    let same = a.iter().zip(b).filter(|(x, y)| norm(x) == norm(y)).count();
    Ok(same as f64 / a.len() as f64)
}

/// A mock judge answering bridge requests from the records' structured
/// fields, for offline runs on synthetic corpora.
pub fn gold_driven_judge(records: &[ExplanationRecord]) -> Result<MockJudge> {
    let mut judge = MockJudge::new();
    for r in records {
        let req = bridge_request(r)?;
        let reply = match r.structured.as_ref().and_then(|s| s.bridge.as_deref()) {
            Some(b) => b.to_string(),
            None => format!("**{NO_BRIDGE}**"),
        };
        judge.insert(req.last_user_text(), reply);
    }
    Ok(judge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{GoldAnnotation, StructuredNle};

    fn two_hop(nle: &str) -> ExplanationRecord {
        ExplanationRecord {
            id: "r".into(),
            input_text: "The country of origin of the director of Persona is".into(),
            prediction: "Sweden".into(),
            probability: None,
            self_nle: nle.into(),
            extracted_concepts: vec![],
            gold: Some(GoldAnnotation::chain("Persona", "director of", "Ingmar Bergman", "country of origin of", "Sweden")),
            structured: None,
        }
    }

    #[test]
    fn bridge_examples() {
        let r = two_hop("Persona was directed by Ingmar Bergman, who is Swedish");
        let j = MockJudge::constant("Ingmar Bergman");
        assert_eq!(extract_bridge_object(&r, &j).unwrap().bridge.as_deref(), Some("ingmar bergman"));
        let j = MockJudge::constant("**No bridge object**.");
        assert_eq!(extract_bridge_object(&r, &j).unwrap().bridge, None);
        let j = MockJudge::constant("X");
        assert_eq!(extract_bridge_object(&r, &j).unwrap().bridge.as_deref(), Some("x"));
        let e = extract_bridge_object(&r, &MockJudge::constant("  ")).unwrap();
        assert!(e.empty_reply && e.bridge.is_none());
    }

    fn classification() -> (ExplanationRecord, ConceptSet) {
        let mut r = two_hop("The article talks about sports events.");
        r.prediction = "Sports".into();
        r.gold = Some(GoldAnnotation {
            class_label: Some("Sports".into()),
            concept_presence: [("sports_events".to_string(), true), ("scores".to_string(), true), ("finance".to_string(), false)].into(),
            ..Default::default()
        });
        let set = ConceptSet::from_ids(Task::Classification, &["sports_events", "scores", "finance"]).unwrap();
        (r, set)
    }

    #[test]
    fn classification_filter() {
        let (r, set) = classification();
        let ds = ClassificationDataset::AgNews;
        let yes = classification_request(&r, set.get("sports_events").unwrap(), ds);
        let no = classification_request(&r, set.get("scores").unwrap(), ds);
        let j = MockJudge::new()
            .with_reply(yes.last_user_text(), "Yes, clearly.")
            .with_reply(no.last_user_text(), "NO");
        assert_eq!(extract_classification_concepts(&r, &set, ds, &j).unwrap(), vec!["sports_events"]);
        assert_eq!(j.calls(), 2);

        let small = ConceptSet::from_ids(Task::Classification, &["scores"]).unwrap();
        assert!(matches!(
            extract_classification_concepts(&r, &small, ds, &j),
            Err(FaithError::UnknownConcept(_))
        ));

        let mut none = r.clone();
        none.gold.as_mut().unwrap().concept_presence.values_mut().for_each(|v| *v = false);
        assert!(extract_classification_concepts(&none, &set, ds, &j).unwrap().is_empty());
    }

    #[test]
    fn deterministic_and_gold_judge_agree() {
        let mut a = two_hop("e1");
        a.structured = Some(StructuredNle {
            bridge: Some("Ingmar Bergman".into()),
            concepts: vec![],
        });
        let mut b = two_hop("e2");
        b.structured = Some(StructuredNle::default());
        let recs = vec![a, b];
        let judge = gold_driven_judge(&recs).unwrap();
        let via_judge = extract_batch(
            &recs,
            &JudgeExtractor {
                judge: &judge,
                task: Task::TwoHop,
                concept_set: None,
                dataset: ClassificationDataset::AgNews,
            },
            4,
        )
        .unwrap();
        let direct = extract_batch(&recs, &DeterministicExtractor { task: Task::TwoHop }, 1).unwrap();
        assert_eq!(direct[1], Vec::<String>::new());
        assert_eq!(extraction_agreement(&via_judge, &direct).unwrap(), 1.0);
        assert!(deterministic_extract(&two_hop("e"), Task::TwoHop).is_err());
    }

    #[test]
    fn concept_set_rules() {
        assert!(ConceptSet::from_ids(Task::Classification, &["a", "a"]).is_err());
        assert!(ConceptSet::from_ids::<&str>(Task::Classification, &[]).is_err());
        assert!(ConceptSet::from_ids::<&str>(Task::TwoHop, &[]).is_ok());
    }
}
