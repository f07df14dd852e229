//! Faithfulness score, 2-hop characterization and taxonomy reporting.

mod taxonomy;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use taxonomy::{classify_simplified, classify_taxonomy, Category, Simplified};

use crate::error::{FaithError, Result};
use crate::mechinterp::{probing_attribution, Attribution};
use crate::text;
use crate::trace::{Circuit, Coord, ExplanationRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaithScore {
    Score(f64),
    NoConcepts,
}

impl FaithScore {
    pub fn value(self) -> Option<f64> {
        match self {
            FaithScore::Score(v) => Some(v),
            FaithScore::NoConcepts => None,
        }
    }
}

/// Fraction of attributions with a strictly positive score.
pub fn faithfulness_score(attrs: &[Attribution]) -> FaithScore {
    if attrs.is_empty() {
        return FaithScore::NoConcepts;
    }
    let hits = attrs.iter().filter(|a| a.score > 0.0).count();
    FaithScore::Score(hits as f64 / attrs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Scored,
    NoConcepts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub record_id: String,
    pub attributions: Vec<Attribution>,
    pub f_score: Option<f64>,
    pub status: ReportStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_nle_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_hop1_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simplified: Option<Simplified>,
}

impl FaithfulnessReport {
    pub fn from_attributions(record_id: impl Into<String>, attributions: Vec<Attribution>) -> Self {
        let score = faithfulness_score(&attributions);
        FaithfulnessReport {
            record_id: record_id.into(),
            f_score: score.value(),
            status: match score {
                FaithScore::Score(_) => ReportStatus::Scored,
                FaithScore::NoConcepts => ReportStatus::NoConcepts,
            },
            attributions,
            prediction_correct: None,
            self_nle_correct: None,
            latent_hop1_correct: None,
            taxonomy: None,
            simplified: None,
        }
    }

    /// Binary faithfulness label for polarized analyses. A 2-hop record
    /// whose explanation names no bridge counts as unfaithful; other
    /// unscored or fractional records have no label.
    pub fn polarized_label(&self) -> Option<bool> {
        match self.f_score {
            Some(f) if f == 1.0 => Some(true),
            Some(f) if f == 0.0 => Some(false),
            Some(_) => None,
            None if self.taxonomy.is_some() => Some(false),
            None => None,
        }
    }

    pub fn faithful(&self) -> bool {
        self.polarized_label() == Some(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoHopFlags {
    pub self_nle_correct: bool,
    pub latent_hop1_correct: bool,
    pub faithful: bool,
}

pub fn characterize_two_hop(
    record: &ExplanationRecord,
    extracted_bridge: Option<&str>,
    decoded: &BTreeMap<Coord, Vec<String>>,
    circuit: &Circuit,
) -> Result<TwoHopFlags> {
    let o2 = record
        .gold
        .as_ref()
        .and_then(|g| g.o2.as_deref())
        .ok_or_else(|| FaithError::Missing(format!("record {} has no gold bridge object", record.id)))?;
    let latent_hop1_correct = probing_attribution(o2, decoded, circuit)?.score > 0.0;
    let (self_nle_correct, faithful) = match extracted_bridge {
        None => (false, false),
        Some(b) => (
            text::token_set_match(o2, b),
            probing_attribution(b, decoded, circuit)?.score > 0.0,
        ),
    };
    Ok(TwoHopFlags {
        self_nle_correct,
        latent_hop1_correct,
        faithful,
    })
}

/// Full 2-hop report: the single bridge attribution, flags and categories.
pub fn two_hop_report(
    record: &ExplanationRecord,
    extracted_bridge: Option<&str>,
    decoded: &BTreeMap<Coord, Vec<String>>,
    circuit: &Circuit,
) -> Result<FaithfulnessReport> {
    let flags = characterize_two_hop(record, extracted_bridge, decoded, circuit)?;
    let prediction_correct = record
        .prediction_correct()
        .ok_or_else(|| FaithError::Missing(format!("record {} has no gold answer", record.id)))?;
    let attributions = match extracted_bridge {
        Some(b) => vec![probing_attribution(b, decoded, circuit)?],
        None => vec![],
    };
    let mut report = FaithfulnessReport::from_attributions(&record.id, attributions);
    report.prediction_correct = Some(prediction_correct);
    report.self_nle_correct = Some(flags.self_nle_correct);
    report.latent_hop1_correct = Some(flags.latent_hop1_correct);
    report.taxonomy = Some(classify_taxonomy(
        prediction_correct,
        flags.faithful,
        flags.self_nle_correct,
        flags.latent_hop1_correct,
    ));
    report.simplified = Some(classify_simplified(prediction_correct, flags.self_nle_correct));
    Ok(report)
}

pub fn taxonomy_histogram(reports: &[FaithfulnessReport]) -> BTreeMap<Category, usize> {
    let mut hist: BTreeMap<Category, usize> = Category::ALL.iter().map(|&c| (c, 0)).collect();
    for c in reports.iter().filter_map(|r| r.taxonomy) {
        *hist.entry(c).or_default() += 1;
    }
    hist
}

fn pct(num: usize, den: usize) -> String {
    if den == 0 {
        "-".into()
    } else {
        format!("{:.1}%", 100.0 * num as f64 / den as f64)
    }
}

/// Two tables, one for incorrect (C1-C5) and one for correct (C6-C10)
/// predictions, each row-normalized.
pub fn render_taxonomy_tables(model: &str, hist: &BTreeMap<Category, usize>) -> String {
    let mut out = String::new();
    for (title, cats) in [
        ("Incorrect Predictions", &Category::ALL[..5]),
        ("Correct Predictions", &Category::ALL[5..]),
    ] {
        let total: usize = cats.iter().map(|c| hist.get(c).copied().unwrap_or(0)).sum();
        let _ = writeln!(out, "{title} (n={total})");
        let _ = write!(out, "{:<16}", "Model");
        for c in cats {
            let _ = write!(out, " | {:>6}", c.to_string());
        }
        out.push('\n');
        let _ = write!(out, "{model:<16}");
        for c in cats {
            let _ = write!(out, " | {:>6}", pct(hist.get(c).copied().unwrap_or(0), total));
        }
        out.push('\n');
        for c in cats {
            let _ = writeln!(out, "  {c}: {}", c.name());
        }
        out.push('\n');
    }
    out
}

/// One accuracy-stratified rate: `(Accurate, Inaccurate)` numerators and
/// denominators over records where the flag is defined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Stratified {
    pub accurate: (usize, usize),
    pub inaccurate: (usize, usize),
}

impl Stratified {
    fn add(&mut self, correct: bool, flag: bool) {
        let cell = if correct { &mut self.accurate } else { &mut self.inaccurate };
        cell.1 += 1;
        if flag {
            cell.0 += 1;
        }
    }

    pub fn rates(&self) -> (Option<f64>, Option<f64>) {
        let r = |(n, d): (usize, usize)| (d > 0).then(|| n as f64 / d as f64);
        (r(self.accurate), r(self.inaccurate))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SummaryRow {
    pub n: usize,
    pub n_correct: usize,
    pub self_nle_correct: Stratified,
    pub latent_hop1_correct: Stratified,
    pub faithful: Stratified,
}

pub fn summarize(reports: &[FaithfulnessReport]) -> SummaryRow {
    let mut row = SummaryRow::default();
    for r in reports {
        let Some(correct) = r.prediction_correct else { continue };
        row.n += 1;
        row.n_correct += usize::from(correct);
        if let Some(b) = r.self_nle_correct {
            row.self_nle_correct.add(correct, b);
        }
        if let Some(b) = r.latent_hop1_correct {
            row.latent_hop1_correct.add(correct, b);
        }
        if let Some(b) = r.polarized_label() {
            row.faithful.add(correct, b);
        }
    }
    row
}

pub fn render_summary_table(model: &str, row: &SummaryRow) -> String {
    let cell = |s: &Stratified| {
        let (a, i) = (s.accurate, s.inaccurate);
        format!("{:>9} | {:>10}", pct(a.0, a.1), pct(i.0, i.1))
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} | {:>8} | {:^22} | {:^22} | {:^22}",
        "Model", "Task Acc", "Self-NLE Correctness", "Latent Hop 1", "Self-NLE Faithfulness"
    );
    let _ = writeln!(
        out,
        "{:<16} | {:>8} | {:>9} | {:>10} | {:>9} | {:>10} | {:>9} | {:>10}",
        "", "", "Accurate", "Inaccurate", "Accurate", "Inaccurate", "Accurate", "Inaccurate"
    );
    let _ = writeln!(
        out,
        "{:<16} | {:>8} | {} | {} | {}",
        model,
        pct(row.n_correct, row.n),
        cell(&row.self_nle_correct),
        cell(&row.latent_hop1_correct),
        cell(&row.faithful)
    );
    out
}
