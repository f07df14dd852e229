//! Activation traces, circuits and dataset records.
//!
//! An [`ActivationTrace`] holds the hidden states of one forward pass in
//! token-major order, `states[token][layer][dim]`. A [`Circuit`] names the
//! `(token, layer)` coordinates an analysis is restricted to.

mod format;
mod records;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{FaithError, Result};

pub use format::{load_trace, read_f32_blob, save_trace, trace_paths, write_f32_blob, FORMAT_VERSION};
pub use records::{
    ingest_records, load_records, write_records, ExplanationRecord, GoldAnnotation, IngestFilters,
    StructuredNle, Task,
};

/// `(token_index, layer)`.
pub type Coord = (usize, usize);

/// Sublayer output a trace was captured at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Granularity {
    ResidualStream,
    MultiHeadAttention,
    MultiLayerPerceptron,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::ResidualStream => "RS",
            Granularity::MultiHeadAttention => "MHA",
            Granularity::MultiLayerPerceptron => "MLP",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = FaithError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "RS" => Ok(Granularity::ResidualStream),
            "MHA" => Ok(Granularity::MultiHeadAttention),
            "MLP" => Ok(Granularity::MultiLayerPerceptron),
            other => Err(FaithError::UnknownGranularity(other.to_string())),
        }
    }
}

impl Serialize for Granularity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Granularity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Dense hidden states of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    model_id: String,
    granularity: Granularity,
    n_tokens: usize,
    n_layers: usize,
    d_model: usize,
    tokens: Vec<String>,
    states: Vec<f32>,
}

impl ActivationTrace {
    pub fn new(
        model_id: impl Into<String>,
        granularity: Granularity,
        tokens: Vec<String>,
        n_layers: usize,
        d_model: usize,
        states: Vec<f32>,
    ) -> Result<Self> {
        let n_tokens = tokens.len();
        if n_tokens == 0 || n_layers == 0 || d_model == 0 {
            return Err(FaithError::SizeMismatch(format!(
                "trace dimensions must be positive (tokens={n_tokens}, layers={n_layers}, d_model={d_model})"
            )));
        }
        let expected = n_tokens * n_layers * d_model;
        if states.len() != expected {
            return Err(FaithError::SizeMismatch(format!(
                "expected {expected} state values, got {}",
                states.len()
            )));
        }
        check_finite(&states)?;
        Ok(Self {
            model_id: model_id.into(),
            granularity,
            n_tokens,
            n_layers,
            d_model,
            tokens,
            states,
        })
    }

    pub fn zeros(
        model_id: impl Into<String>,
        granularity: Granularity,
        tokens: Vec<String>,
        n_layers: usize,
        d_model: usize,
    ) -> Result<Self> {
        let len = tokens.len() * n_layers * d_model;
        Self::new(model_id, granularity, tokens, n_layers, d_model, vec![0.0; len])
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn states(&self) -> &[f32] {
        &self.states
    }

    pub fn last_token(&self) -> usize {
        self.n_tokens - 1
    }

    fn offset(&self, token: usize, layer: usize) -> usize {
        (token * self.n_layers + layer) * self.d_model
    }

    pub fn check_coord(&self, (token, layer): Coord) -> Result<()> {
        if token >= self.n_tokens || layer >= self.n_layers {
            return Err(FaithError::OutOfBounds {
                token,
                layer,
                n_tokens: self.n_tokens,
                n_layers: self.n_layers,
            });
        }
        Ok(())
    }

    /// Hidden state at `(token, layer)`.
    pub fn state(&self, token: usize, layer: usize) -> Result<&[f32]> {
        self.check_coord((token, layer))?;
        let start = self.offset(token, layer);
        Ok(&self.states[start..start + self.d_model])
    }

    /// Copy of this trace with `edit` applied to the state at every listed
    /// coordinate. The result is re-checked for finiteness.
    pub fn with_edits<F>(&self, coords: impl IntoIterator<Item = Coord>, mut edit: F) -> Result<Self>
    where
        F: FnMut(Coord, &mut [f32]),
    {
        let mut out = self.clone();
        for coord in coords {
            self.check_coord(coord)?;
            let start = self.offset(coord.0, coord.1);
            edit(coord, &mut out.states[start..start + self.d_model]);
        }
        check_finite(&out.states)?;
        Ok(out)
    }

    /// Bitwise equality of all fields, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.model_id == other.model_id
            && self.granularity == other.granularity
            && self.n_tokens == other.n_tokens
            && self.n_layers == other.n_layers
            && self.d_model == other.d_model
            && self.tokens == other.tokens
            && self
                .states
                .iter()
                .zip(&other.states)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_finite(states: &[f32]) -> Result<()> {
    match states.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(FaithError::NonFinite { index }),
        None => Ok(()),
    }
}

/// A set of `(token, layer)` coordinates at one granularity.
///
/// Coordinates are kept sorted token-major, then by layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Circuit {
    granularity: Granularity,
    coords: BTreeSet<Coord>,
}

impl Circuit {
    pub fn new(granularity: Granularity, coords: impl IntoIterator<Item = Coord>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for c in coords {
            if !set.insert(c) {
                return Err(FaithError::InvalidCircuit(format!(
                    "duplicate coordinate ({}, {})",
                    c.0, c.1
                )));
            }
        }
        if set.is_empty() {
            return Err(FaithError::InvalidCircuit("circuit has no coordinates".into()));
        }
        Ok(Self {
            granularity,
            coords: set,
        })
    }

    /// One token across the inclusive layer range `lo..=hi`.
    pub fn window(granularity: Granularity, token: usize, lo: usize, hi: usize) -> Result<Self> {
        if lo > hi {
            return Err(FaithError::InvalidCircuit(format!("layer_lo {lo} > layer_hi {hi}")));
        }
        Self::new(granularity, (lo..=hi).map(|l| (token, l)))
    }

    /// Parses `TOKEN:LO-HI` or `TOKEN:LAYER`, optionally prefixed by a
    /// granularity such as `RS@7:5-11`.
    pub fn parse(s: &str) -> Result<Self> {
        let (gran, rest) = match s.split_once('@') {
            Some((g, r)) => (g.parse()?, r),
            None => (Granularity::ResidualStream, s),
        };
        let bad = || FaithError::InvalidCircuit(format!("cannot parse circuit {s:?}"));
        let (tok, layers) = rest.split_once(':').ok_or_else(bad)?;
        let token: usize = tok.trim().parse().map_err(|_| bad())?;
        let (lo, hi) = match layers.split_once('-') {
            Some((a, b)) => (
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ),
            None => {
                let l: usize = layers.trim().parse().map_err(|_| bad())?;
                (l, l)
            }
        };
        Self::window(gran, token, lo, hi)
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn coords(&self) -> impl Iterator<Item = Coord> + '_ {
        self.coords.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn contains(&self, c: Coord) -> bool {
        self.coords.contains(&c)
    }

    /// Distinct layers touched by the circuit, ascending.
    pub fn layers(&self) -> BTreeSet<usize> {
        self.coords.iter().map(|c| c.1).collect()
    }

    pub fn union(&self, other: &Circuit) -> Result<Circuit> {
        if self.granularity != other.granularity {
            return Err(FaithError::GranularityMismatch {
                circuit: other.granularity.to_string(),
                trace: self.granularity.to_string(),
            });
        }
        Ok(Circuit {
            granularity: self.granularity,
            coords: self.coords.union(&other.coords).copied().collect(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CircuitRepr {
    granularity: Granularity,
    coords: Vec<Coord>,
}

impl Serialize for Circuit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CircuitRepr {
            granularity: self.granularity,
            coords: self.coords().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Circuit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = CircuitRepr::deserialize(d)?;
        Circuit::new(repr.granularity, repr.coords).map_err(serde::de::Error::custom)
    }
}

/// One state vector per circuit coordinate, token-major then layer.
pub fn slice_circuit<'t>(trace: &'t ActivationTrace, circuit: &Circuit) -> Result<Vec<(Coord, &'t [f32])>> {
    if circuit.granularity() != trace.granularity() {
        return Err(FaithError::GranularityMismatch {
            circuit: circuit.granularity().to_string(),
            trace: trace.granularity().to_string(),
        });
    }
    circuit
        .coords()
        .map(|c| trace.state(c.0, c.1).map(|v| (c, v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    fn ramp(n_tokens: usize, n_layers: usize, d: usize) -> ActivationTrace {
        let states = (0..n_tokens * n_layers * d).map(|i| i as f32).collect();
        ActivationTrace::new("m", Granularity::ResidualStream, toks(n_tokens), n_layers, d, states).unwrap()
    }

    #[test]
    fn granularity_strings() {
        assert_eq!("RS".parse::<Granularity>().unwrap(), Granularity::ResidualStream);
        assert_eq!("MHA".parse::<Granularity>().unwrap(), Granularity::MultiHeadAttention);
        assert_eq!("MLP".parse::<Granularity>().unwrap(), Granularity::MultiLayerPerceptron);
        assert!(matches!("rs".parse::<Granularity>(), Err(FaithError::UnknownGranularity(_))));
        assert_eq!(serde_json::to_string(&Granularity::MultiLayerPerceptron).unwrap(), "\"MLP\"");
    }

    #[test]
    fn trace_rejects_nan_and_wrong_sizes() {
        let err = ActivationTrace::new("m", Granularity::ResidualStream, toks(1), 1, 2, vec![0.0, f32::NAN]);
        assert!(matches!(err, Err(FaithError::NonFinite { index: 1 })));
        let err = ActivationTrace::new("m", Granularity::ResidualStream, toks(2), 1, 2, vec![0.0; 3]);
        assert!(matches!(err, Err(FaithError::SizeMismatch(_))));
    }

    #[test]
    fn circuit_rejects_empty_and_duplicates() {
        assert!(Circuit::new(Granularity::ResidualStream, Vec::new()).is_err());
        assert!(Circuit::new(Granularity::ResidualStream, vec![(1, 1), (1, 1)]).is_err());
        assert!(Circuit::window(Granularity::ResidualStream, 0, 3, 2).is_err());
    }

    #[test]
    fn circuit_parse_forms() {
        let c = Circuit::parse("7:5-11").unwrap();
        assert_eq!(c.len(), 7);
        assert_eq!(c.coords().next(), Some((7, 5)));
        let c = Circuit::parse("MLP@2:3").unwrap();
        assert_eq!(c.granularity(), Granularity::MultiLayerPerceptron);
        assert_eq!(c.coords().collect::<Vec<_>>(), vec![(2, 3)]);
        assert!(Circuit::parse("x:1").is_err());
    }

    #[test]
    fn slice_single_coordinate() {
        let t = ramp(3, 4, 2);
        let c = Circuit::new(Granularity::ResidualStream, vec![(0, 0)]).unwrap();
        let s = slice_circuit(&t, &c).unwrap();
        assert_eq!(s, vec![((0, 0), &[0.0f32, 1.0][..])]);
    }

    #[test]
    fn slice_out_of_bounds() {
        let t = ramp(3, 4, 2);
        let c = Circuit::new(Granularity::ResidualStream, vec![(5, 0)]).unwrap();
        assert!(matches!(slice_circuit(&t, &c), Err(FaithError::OutOfBounds { token: 5, .. })));
    }

    #[test]
    fn slice_orders_token_major() {
        let t = ramp(3, 4, 2);
        let c = Circuit::new(Granularity::ResidualStream, vec![(1, 2), (1, 1)]).unwrap();
        let coords: Vec<Coord> = slice_circuit(&t, &c).unwrap().into_iter().map(|(c, _)| c).collect();
        assert_eq!(coords, vec![(1, 1), (1, 2)]);
    }

    #[test]
    fn slice_granularity_mismatch() {
        let t = ramp(2, 2, 2);
        let c = Circuit::new(Granularity::MultiHeadAttention, vec![(0, 0)]).unwrap();
        assert!(matches!(slice_circuit(&t, &c), Err(FaithError::GranularityMismatch { .. })));
    }

    #[test]
    fn with_edits_leaves_original() {
        let t = ramp(2, 2, 2);
        let before = t.clone();
        let edited = t.with_edits([(1, 1)], |_, s| s[0] += 100.0).unwrap();
        assert!(t.bit_eq(&before));
        assert_eq!(edited.state(1, 1).unwrap()[0], 106.0);
        assert!(t.with_edits([(0, 0)], |_, s| s[0] = f32::INFINITY).is_err());
    }

    #[test]
    fn circuit_serde_roundtrip() {
        let c = Circuit::window(Granularity::ResidualStream, 7, 5, 6).unwrap();
        let js = serde_json::to_string(&c).unwrap();
        assert_eq!(js, r#"{"granularity":"RS","coords":[[7,5],[7,6]]}"#);
        let back: Circuit = serde_json::from_str(&js).unwrap();
        assert_eq!(back, c);
    }
}
