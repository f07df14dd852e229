use std::collections::BTreeMap;

use super::{Attribution, ConceptVector};
use crate::error::{FaithError, Result};
use crate::text;
use crate::trace::{slice_circuit, ActivationTrace, Circuit, Coord};
use crate::vecops;

/// Turns a hidden state into natural-language descriptions of its content.
/// Synthetic worlds decode analytically; real models go through a
/// patch-and-decode pass outside this crate.
pub trait HiddenStateDecoder: Send + Sync {
    fn decode(&self, h: &[f32]) -> Result<Vec<String>>;
}

pub fn decode_circuit(
    trace: &ActivationTrace,
    circuit: &Circuit,
    decoder: &dyn HiddenStateDecoder,
) -> Result<BTreeMap<Coord, Vec<String>>> {
    slice_circuit(trace, circuit)?
        .into_iter()
        .map(|(c, h)| decoder.decode(h).map(|d| (c, d)))
        .collect()
}

/// Score 1 iff the concept is found in the decoded text of at least one
/// circuit state.
pub fn probing_attribution(
    concept_id: &str,
    decoded: &BTreeMap<Coord, Vec<String>>,
    circuit: &Circuit,
) -> Result<Attribution> {
    let mut detected = false;
    for coord in circuit.coords() {
        let strings = decoded
            .get(&coord)
            .ok_or_else(|| FaithError::Missing(format!("no decoded strings for coordinate {coord:?}")))?;
        if !detected && strings.iter().any(|s| text::token_set_match(concept_id, s)) {
            detected = true;
        }
    }
    Ok(Attribution::probing(concept_id, detected))
}

/// Linear-probe variant: max over circuit states of the per-layer probe
/// output, i.e. whether any probe fires.
pub fn probe_attribution(
    trace: &ActivationTrace,
    circuit: &Circuit,
    cav_by_layer: &BTreeMap<usize, ConceptVector>,
) -> Result<Attribution> {
    let mut concept_id = None;
    let mut detected = false;
    for ((_, layer), h) in slice_circuit(trace, circuit)? {
        let cav = cav_by_layer
            .get(&layer)
            .ok_or_else(|| FaithError::Missing(format!("no concept vector for layer {layer}")))?;
        concept_id.get_or_insert_with(|| cav.concept_id.clone());
        detected |= cav.predict(&vecops::to_f64(h))?;
    }
    Ok(Attribution::probing(concept_id.unwrap_or_default(), detected))
}
