use std::collections::BTreeMap;

use super::ConceptVector;
use crate::error::{FaithError, Result};
use crate::trace::{ActivationTrace, Circuit, Coord};

/// Additive f64 deltas per (token, layer). Kept separate from the f32
/// trace so oracles can evaluate interventions without rounding.
pub type StateEdits = BTreeMap<Coord, Vec<f64>>;

/// Probability of the original prediction under an intervention.
pub trait ProbabilityOracle: Send + Sync {
    fn probability(&self, trace: &ActivationTrace, edits: &StateEdits) -> Result<f64>;
}

/// `0.0, 0.1, ..., 1.0`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Materializes edits into a new f32 trace, for oracles that need one.
pub fn apply_edits(trace: &ActivationTrace, edits: &StateEdits) -> Result<ActivationTrace> {
    for (coord, delta) in edits {
        trace.check_coord(*coord)?;
        if delta.len() != trace.d_model() {
            return Err(FaithError::DimensionMismatch {
                expected: trace.d_model(),
                found: delta.len(),
            });
        }
    }
    trace.with_edits(edits.keys().copied(), |coord, h| {
        for (x, d) in h.iter_mut().zip(&edits[&coord]) {
            *x = (f64::from(*x) + d) as f32;
        }
    })
}

pub fn erasure_sweep(
    oracle: &dyn ProbabilityOracle,
    trace: &ActivationTrace,
    circuit: &Circuit,
    cav_by_layer: &BTreeMap<usize, ConceptVector>,
    lambdas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if lambdas.is_empty() {
        return Err(FaithError::invalid("empty lambda grid"));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(FaithError::invalid(format!("lambda {bad} outside [0, 1]")));
    }
    for coord in circuit.coords() {
        trace.check_coord(coord)?;
        let cav = cav_by_layer
            .get(&coord.1)
            .ok_or_else(|| FaithError::Missing(format!("no concept vector for circuit layer {}", coord.1)))?;
        if cav.dim() != trace.d_model() {
            return Err(FaithError::DimensionMismatch {
                expected: trace.d_model(),
                found: cav.dim(),
            });
        }
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let edits: StateEdits = circuit
                .coords()
                .map(|c| (c, cav_by_layer[&c.1].vector.iter().map(|v| -lambda * v).collect()))
                .collect();
            oracle.probability(trace, &edits).map(|p| (lambda, p))
        })
        .collect()
}
