use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ConceptVector;
use crate::error::{FaithError, Result};
use crate::trace::{Circuit, Coord};
use crate::vecops;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Min,
    Max,
    #[default]
    Mean,
}

impl FromStr for Aggregator {
    type Err = FaithError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "min" => Ok(Aggregator::Min),
            "max" => Ok(Aggregator::Max),
            "mean" => Ok(Aggregator::Mean),
            _ => Err(FaithError::invalid(format!("unknown aggregator {s:?}"))),
        }
    }
}

/// Aggregates directional derivatives `<c, grad f>` over the circuit. The
/// same vector is used at every layer; see [`tcav_attribution_by_layer`]
/// for per-layer vectors.
pub fn tcav_attribution(
    cav: &ConceptVector,
    gradients: &BTreeMap<Coord, Vec<f64>>,
    circuit: &Circuit,
    aggregator: Aggregator,
) -> Result<f64> {
    let by_layer: BTreeMap<usize, &ConceptVector> = circuit.layers().into_iter().map(|l| (l, cav)).collect();
    aggregate(&by_layer, gradients, circuit, aggregator)
}

pub fn tcav_attribution_by_layer(
    cav_by_layer: &BTreeMap<usize, ConceptVector>,
    gradients: &BTreeMap<Coord, Vec<f64>>,
    circuit: &Circuit,
    aggregator: Aggregator,
) -> Result<f64> {
    let by_layer: BTreeMap<usize, &ConceptVector> = cav_by_layer.iter().map(|(l, c)| (*l, c)).collect();
    aggregate(&by_layer, gradients, circuit, aggregator)
}

fn aggregate(
    cavs: &BTreeMap<usize, &ConceptVector>,
    gradients: &BTreeMap<Coord, Vec<f64>>,
    circuit: &Circuit,
    aggregator: Aggregator,
) -> Result<f64> {
    let mut dots = Vec::with_capacity(circuit.len());
    for coord in circuit.coords() {
        let g = gradients
            .get(&coord)
            .ok_or_else(|| FaithError::Missing(format!("no gradient for coordinate {coord:?}")))?;
        let cav = cavs
            .get(&coord.1)
            .ok_or_else(|| FaithError::Missing(format!("no concept vector for layer {}", coord.1)))?;
        if g.len() != cav.dim() {
            return Err(FaithError::DimensionMismatch {
                expected: cav.dim(),
                found: g.len(),
            });
        }
        dots.push(vecops::dot(&cav.vector, g));
    }
    Ok(match aggregator {
        Aggregator::Min => dots.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregator::Max => dots.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregator::Mean => dots.iter().sum::<f64>() / dots.len() as f64,
    })
}
