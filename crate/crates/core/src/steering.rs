//! Inference-time steering over traces and re-audit of the regenerated
//! explanations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FaithError, Result};
use crate::faithmetrics::{Category, FaithfulnessReport};
use crate::trace::{ActivationTrace, Circuit, ExplanationRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPlan {
    pub vectors: BTreeMap<usize, Vec<f64>>,
    pub lambda: f64,
    pub layers: BTreeSet<usize>,
}

impl SteeringPlan {
    pub fn new(vectors: BTreeMap<usize, Vec<f64>>, lambda: f64, layers: BTreeSet<usize>) -> Result<Self> {
        let plan = SteeringPlan { vectors, lambda, layers };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(FaithError::invalid(format!("steering lambda {} is not finite", self.lambda)));
        }
        if self.layers.is_empty() {
            return Err(FaithError::invalid("steering plan has no layers"));
        }
        if let Some(l) = self.layers.iter().find(|l| !self.vectors.contains_key(l)) {
            return Err(FaithError::invalid(format!("steering layer {l} has no vector")));
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        SteeringPlan {
            lambda,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenScope {
    #[default]
    LastToken,
    AllTokens,
}

/// `h ← h + λ·v_ℓ` at every in-scope token of every plan layer. Each entry
/// is computed in f64 and rounded once. Zero deltas leave the stored bits
/// untouched, so `λ = 0` is the identity, signed zeros included.
pub fn steer_trace(trace: &ActivationTrace, plan: &SteeringPlan, scope: TokenScope) -> Result<ActivationTrace> {
    plan.validate()?;
    for &layer in &plan.layers {
        if layer >= trace.n_layers() {
            return Err(FaithError::OutOfBounds {
                token: trace.last_token(),
                layer,
                n_tokens: trace.n_tokens(),
                n_layers: trace.n_layers(),
            });
        }
        let v = &plan.vectors[&layer];
        if v.len() != trace.d_model() {
            return Err(FaithError::DimensionMismatch {
                expected: trace.d_model(),
                found: v.len(),
            });
        }
    }
    let tokens: Vec<usize> = match scope {
        TokenScope::LastToken => vec![trace.last_token()],
        TokenScope::AllTokens => (0..trace.n_tokens()).collect(),
    };
    let coords = tokens
        .iter()
        .flat_map(|&t| plan.layers.iter().map(move |&l| (t, l)));
    let lambda = plan.lambda;
    trace.with_edits(coords, |(_, layer), h| {
        for (x, v) in h.iter_mut().zip(&plan.vectors[&layer]) {
            let delta = lambda * v;
            if delta != 0.0 {
                *x = (f64::from(*x) + delta) as f32;
            }
        }
    })
}

/// A record together with the trace and circuit it was audited on.
#[derive(Debug, Clone)]
pub struct SteerItem {
    pub record: ExplanationRecord,
    pub trace: ActivationTrace,
    pub circuit: Circuit,
}

/// Output of re-running the model under steering.
#[derive(Debug, Clone)]
pub struct Regenerated {
    pub record: ExplanationRecord,
    pub trace: ActivationTrace,
}

/// Maps a steered trace to a regenerated prediction and explanation.
pub trait ExplanationOracle: Send + Sync {
    fn regenerate(&self, item: &SteerItem, steered: &ActivationTrace) -> Result<Regenerated>;
}

/// Runs extraction, attribution and scoring for one record.
pub trait Auditor: Send + Sync {
    fn audit(&self, record: &ExplanationRecord, trace: &ActivationTrace, circuit: &Circuit) -> Result<FaithfulnessReport>;
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub pairs: Vec<(FaithfulnessReport, FaithfulnessReport)>,
    /// `(record_id, error)` for records the oracle failed on
    pub skipped: Vec<(String, String)>,
}

pub fn steering_sweep(
    items: &[SteerItem],
    plan: &SteeringPlan,
    eligible_layers: &BTreeSet<usize>,
    scope: TokenScope,
    oracle: &dyn ExplanationOracle,
    auditor: &dyn Auditor,
) -> Result<SweepOutcome> {
    plan.validate()?;
    if let Some(l) = plan.layers.iter().find(|l| !eligible_layers.contains(l)) {
        return Err(FaithError::Precondition(format!(
            "steering layer {l} is not among the eligible layers {eligible_layers:?}"
        )));
    }
    let results: Vec<Result<std::result::Result<_, (String, String)>>> = items
        .par_iter()
        .map(|item| {
            let before = auditor.audit(&item.record, &item.trace, &item.circuit)?;
            let steered = steer_trace(&item.trace, plan, scope)?;
            match oracle.regenerate(item, &steered) {
                Ok(regen) => {
                    let after = auditor.audit(&regen.record, &regen.trace, &item.circuit)?;
                    Ok(Ok((before, after)))
                }
                Err(e) => Ok(Err((item.record.id.clone(), e.to_string()))),
            }
        })
        .collect();
    let mut out = SweepOutcome::default();
    for r in results {
        match r? {
            Ok(pair) => out.pairs.push(pair),
            Err(skip) => out.skipped.push(skip),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratify {
    All,
    PredictionAccuracy,
}

/// Fraction of initially unfaithful records made faithful. Strata with no
/// unfaithful records are left out.
pub fn conversion_rate(
    pairs: &[(FaithfulnessReport, FaithfulnessReport)],
    stratify: Stratify,
) -> Result<BTreeMap<String, f64>> {
    if pairs.is_empty() {
        return Err(FaithError::invalid("conversion rate needs at least one pair"));
    }
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (before, after) in pairs {
        if before.faithful() {
            continue;
        }
        let mut strata = vec!["all".to_string()];
        if stratify == Stratify::PredictionAccuracy {
            match before.prediction_correct {
                Some(true) => strata.push("accurate".into()),
                Some(false) => strata.push("inaccurate".into()),
                None => {}
            }
        }
        for s in strata {
            let c = counts.entry(s).or_default();
            c.1 += 1;
            if after.faithful() {
                c.0 += 1;
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|(k, (conv, total))| (k, conv as f64 / total as f64))
        .collect())
}

pub type TransitionMatrix = [[usize; 10]; 10];

/// `m[before][after]` category counts.
pub fn transition_matrix(pairs: &[(FaithfulnessReport, FaithfulnessReport)]) -> Result<TransitionMatrix> {
    let mut m = [[0usize; 10]; 10];
    for (before, after) in pairs {
        let (Some(b), Some(a)) = (before.taxonomy, after.taxonomy) else {
            return Err(FaithError::Missing(format!("taxonomy missing for record {}", before.record_id)));
        };
        m[b.index()][a.index()] += 1;
    }
    Ok(m)
}

pub fn transition_csv(m: &TransitionMatrix) -> String {
    let mut out = String::from("before");
    for c in Category::ALL {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (i, row) in m.iter().enumerate() {
        let _ = write!(out, "{}", Category::ALL[i]);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Granularity;

    fn trace() -> ActivationTrace {
        ActivationTrace::new(
            "m",
            Granularity::ResidualStream,
            vec!["a".into(), "b".into()],
            8,
            2,
            (0..32).map(|i| i as f32 * 0.25 - 3.0).collect(),
        )
        .unwrap()
    }

    fn plan(lambda: f64) -> SteeringPlan {
        SteeringPlan::new([(7, vec![1.0, 0.0])].into(), lambda, [7].into()).unwrap()
    }

    #[test]
    fn zero_lambda_is_identity() {
        let t = trace();
        assert!(steer_trace(&t, &plan(0.0), TokenScope::AllTokens).unwrap().bit_eq(&t));
    }

    #[test]
    fn unit_vector_adds_one() {
        let t = trace();
        let s = steer_trace(&t, &plan(1.0), TokenScope::LastToken).unwrap();
        assert_eq!(s.state(1, 7).unwrap()[0], t.state(1, 7).unwrap()[0] + 1.0);
        assert_eq!(s.state(1, 7).unwrap()[1], t.state(1, 7).unwrap()[1]);
        assert_eq!(s.state(0, 7).unwrap(), t.state(0, 7).unwrap());
        assert_eq!(s.state(1, 6).unwrap(), t.state(1, 6).unwrap());
        let inhibited = steer_trace(&t, &plan(-1.0), TokenScope::AllTokens).unwrap();
        assert_eq!(inhibited.state(0, 7).unwrap()[0], t.state(0, 7).unwrap()[0] - 1.0);
    }

    #[test]
    fn plan_validation() {
        assert!(SteeringPlan::new([(7, vec![1.0])].into(), 1.0, [6].into()).is_err());
        assert!(SteeringPlan::new([(7, vec![1.0])].into(), f64::NAN, [7].into()).is_err());
        assert!(SteeringPlan::new([(7, vec![1.0])].into(), 1.0, BTreeSet::new()).is_err());
        let bad_dim = SteeringPlan::new([(7, vec![1.0])].into(), 1.0, [7].into()).unwrap();
        assert!(steer_trace(&trace(), &bad_dim, TokenScope::LastToken).is_err());
    }
}
