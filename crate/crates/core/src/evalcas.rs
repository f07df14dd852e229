//! Hint and relation-swap input variants, performance ratios and the
//! compound accuracy score comparing faithful and unfaithful explanations.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FaithError, Result};
use crate::faithmetrics::{FaithfulnessReport, Simplified};
use crate::trace::ExplanationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Hint1,
    Hint2,
    RelSwap,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Hint1, Variant::Hint2, Variant::RelSwap];

    /// `(numerator, denominator)` categories of the matching score.
    pub fn categories(self) -> (Simplified, Simplified) {
        match self {
            Variant::Hint1 => (Simplified::A, Simplified::B),
            Variant::Hint2 => (Simplified::B, Simplified::A),
            Variant::RelSwap => (Simplified::D, Simplified::C),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Hint1 => "hint1",
            Variant::Hint2 => "hint2",
            Variant::RelSwap => "relswap",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = FaithError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hint1" => Ok(Variant::Hint1),
            "hint2" => Ok(Variant::Hint2),
            "relswap" | "relation_swap" | "rel_swap" => Ok(Variant::RelSwap),
            _ => Err(FaithError::invalid(format!("unknown CAS metric {s:?}"))),
        }
    }
}

fn gold<'a>(record: &'a ExplanationRecord, field: &str) -> Result<&'a str> {
    let g = record.gold.as_ref();
    let v = match field {
        "o1" => g.and_then(|g| g.o1.as_deref()),
        "r1" => g.and_then(|g| g.r1.as_deref()),
        "o2" => g.and_then(|g| g.o2.as_deref()),
        "r2" => g.and_then(|g| g.r2.as_deref()),
        "o3" => g.and_then(|g| g.o3.as_deref()),
        _ => None,
    };
    v.ok_or_else(|| FaithError::Missing(format!("record {} has no gold {field}", record.id)))
}

/// Prefixes the first hop `(o1, r1, o2)` to the input.
pub fn build_hint1(record: &ExplanationRecord) -> Result<String> {
    let (o1, r1, o2) = (gold(record, "o1")?, gold(record, "r1")?, gold(record, "o2")?);
    Ok(format!("The {r1} {o1} is {o2}. {}", record.input_text))
}

/// Prefixes the second hop `(o2, r2, o3)` to the input.
pub fn build_hint2(record: &ExplanationRecord) -> Result<String> {
    let (o2, r2, o3) = (gold(record, "o2")?, gold(record, "r2")?, gold(record, "o3")?);
    Ok(format!("The {r2} {o2} is {o3}. {}", record.input_text))
}

/// Replaces the first occurrence of the second relation's surface form.
pub fn build_relation_swap(record: &ExplanationRecord, r2_prime: &str) -> Result<String> {
    let r2 = gold(record, "r2")?;
    if r2_prime == r2 {
        return Err(FaithError::invalid(format!("replacement relation equals r2 ({r2:?})")));
    }
    if !record.input_text.contains(r2) {
        return Err(FaithError::Missing(format!("relation {r2:?} not found in input of record {}", record.id)));
    }
    Ok(record.input_text.replacen(r2, r2_prime, 1))
}

/// Does the model answer a variant of this record correctly?
pub trait VariantOracle: Send + Sync {
    fn variant_correct(&self, record: &ExplanationRecord, variant: Variant) -> Result<bool>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasRecord {
    pub record_id: String,
    pub simplified: Simplified,
    pub faithful: bool,
    #[serde(default)]
    pub variant_correct: BTreeMap<Variant, bool>,
}

impl CasRecord {
    pub fn from_report(report: &FaithfulnessReport, variant_correct: BTreeMap<Variant, bool>) -> Result<Self> {
        let simplified = report
            .simplified
            .ok_or_else(|| FaithError::Missing(format!("report {} has no simplified category", report.record_id)))?;
        Ok(CasRecord {
            record_id: report.record_id.clone(),
            simplified,
            faithful: report.faithful(),
            variant_correct,
        })
    }
}

/// Queries the oracle on the variant each category's protocol applies to:
/// hints for wrong predictions, relation swaps for correct ones.
pub fn cas_records(
    reports: &[FaithfulnessReport],
    records: &BTreeMap<String, ExplanationRecord>,
    oracle: &dyn VariantOracle,
) -> Result<Vec<CasRecord>> {
    reports
        .iter()
        .map(|rep| {
            let rec = records
                .get(&rep.record_id)
                .ok_or_else(|| FaithError::Missing(format!("no record for report {}", rep.record_id)))?;
            let mut vc = BTreeMap::new();
            let cat = rep
                .simplified
                .ok_or_else(|| FaithError::Missing(format!("report {} has no simplified category", rep.record_id)))?;
            let variants: &[Variant] = match cat {
                Simplified::A | Simplified::B => &[Variant::Hint1, Variant::Hint2],
                Simplified::C | Simplified::D => &[Variant::RelSwap],
            };
            for &v in variants {
                vc.insert(v, oracle.variant_correct(rec, v)?);
            }
            CasRecord::from_report(rep, vc)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Faithful,
    Unfaithful,
    All,
}

impl Subset {
    fn admits(self, faithful: bool) -> bool {
        match self {
            Subset::Faithful => faithful,
            Subset::Unfaithful => !faithful,
            Subset::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    /// a category cell had no records
    pub low_support: bool,
}

/// `(correct, total)` of a category under a variant within a subset.
/// Records without an answer for the variant are left out.
pub fn category_counts(records: &[CasRecord], cat: Simplified, variant: Variant, subset: Subset) -> (usize, usize) {
    records
        .iter()
        .filter(|r| r.simplified == cat && subset.admits(r.faithful))
        .filter_map(|r| r.variant_correct.get(&variant))
        .fold((0, 0), |(s, t), &ok| (s + ok as usize, t + 1))
}

fn accuracy((s, t): (usize, usize), smoothing: bool) -> f64 {
    if smoothing {
        (s as f64 + 1.0) / (t as f64 + 2.0)
    } else {
        s as f64 / t as f64
    }
}

/// `ACC(num) / ACC(den)` with Laplace-smoothed accuracies. Without
/// smoothing, empty cells or a zero ratio are errors.
pub fn performance_ratio(
    records: &[CasRecord],
    num: Simplified,
    den: Simplified,
    variant: Variant,
    subset: Subset,
    smoothing: bool,
) -> Result<Ratio> {
    let n = category_counts(records, num, variant, subset);
    let d = category_counts(records, den, variant, subset);
    let low_support = n.1 == 0 || d.1 == 0;
    if !smoothing {
        if low_support {
            return Err(FaithError::Precondition(format!(
                "{variant}: category {num} or {den} has no records in subset {subset:?}"
            )));
        }
        if n.0 == 0 || d.0 == 0 {
            return Err(FaithError::Precondition(format!(
                "{variant}: zero accuracy makes the ratio degenerate without smoothing"
            )));
        }
    }
    Ok(Ratio {
        value: accuracy(n, smoothing) / accuracy(d, smoothing),
        low_support,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CasResult {
    pub variant: Variant,
    pub cas: f64,
    pub pr_faithful: Ratio,
    pub pr_unfaithful: Ratio,
}

/// `ln(PR_faithful / PR_unfaithful)`.
pub fn compound_accuracy_score(records: &[CasRecord], variant: Variant, smoothing: bool) -> Result<CasResult> {
    let (num, den) = variant.categories();
    let pf = performance_ratio(records, num, den, variant, Subset::Faithful, smoothing)?;
    let pu = performance_ratio(records, num, den, variant, Subset::Unfaithful, smoothing)?;
    Ok(CasResult {
        variant,
        cas: (pf.value / pu.value).ln(),
        pr_faithful: pf,
        pr_unfaithful: pu,
    })
}

/// Rows of metric × model × measure.
pub fn render_cas_table(rows: &[(String, String, CasResult)]) -> String {
    let mut out = String::from("| Metric | Model | Measure | CAS | PR faithful | PR unfaithful |\n|---|---|---|---|---|---|\n");
    for (model, measure, r) in rows {
        let flag = |x: &Ratio| if x.low_support { "*" } else { "" };
        let _ = writeln!(
            out,
            "| {} | {model} | {measure} | {:.2} | {:.3}{} | {:.3}{} |",
            r.variant,
            r.cas,
            r.pr_faithful.value,
            flag(&r.pr_faithful),
            r.pr_unfaithful.value,
            flag(&r.pr_unfaithful)
        );
    }
    out
}
