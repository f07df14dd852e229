//! Concept vectors, probes and the two attribution families: probing over
//! decoded hidden states and importance from erasure sweeps.

mod cav;
mod erasure;
mod probing;
mod regression;
mod tcav;

use serde::{Deserialize, Serialize};

pub use cav::{
    diff_mean_cav, evaluate_probe_f1, f1_score, fit_layer_cavs, probe_predict, select_layers, stratified_split,
    ConceptVector, DEFAULT_LAYER_THRESHOLD,
};
pub use erasure::{apply_edits, erasure_sweep, default_lambda_grid, ProbabilityOracle, StateEdits};
pub use probing::{decode_circuit, probe_attribution, probing_attribution, HiddenStateDecoder};
pub use regression::{fit_linear, importance_attribution, RegressionResult, DEFAULT_ALPHA};
pub use tcav::{tcav_attribution, tcav_attribution_by_layer, Aggregator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionKind {
    Probing,
    Importance,
}

/// Influence of one concept on one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub concept_id: String,
    pub kind: AttributionKind,
    pub score: f64,
    pub significant: bool,
}

impl Attribution {
    pub fn probing(concept_id: impl Into<String>, detected: bool) -> Self {
        Attribution {
            concept_id: concept_id.into(),
            kind: AttributionKind::Probing,
            score: if detected { 1.0 } else { 0.0 },
            significant: detected,
        }
    }
}
