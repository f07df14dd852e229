use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{FaithError, Result};
use crate::mechinterp::{ProbabilityOracle, StateEdits};
use crate::trace::{ActivationTrace, Circuit, Coord};
use crate::vecops;

/// Clamped-affine stand-in for a model's output probability:
/// `clamp01(base + Σ_c γ_c · mean_{(k,ℓ) ∈ readout} ⟨h_k^ℓ, ĉ⟩)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthForward {
    pub base_logit: f64,
    pub concept_gains: BTreeMap<String, f64>,
    /// unit direction per concept
    pub concept_directions: BTreeMap<String, Vec<f64>>,
    pub readout: Circuit,
    /// What was planted where, for inspection only.
    pub planted: BTreeMap<Coord, Vec<(String, f64)>>,
}

impl SynthForward {
    pub fn new(base_logit: f64, readout: Circuit) -> Self {
        SynthForward {
            base_logit,
            concept_gains: BTreeMap::new(),
            concept_directions: BTreeMap::new(),
            readout,
            planted: BTreeMap::new(),
        }
    }

    pub fn with_concept(mut self, concept_id: &str, gain: f64, direction: &[f64]) -> Self {
        let n = vecops::norm(direction);
        let unit = if n > 0.0 { vecops::scale(direction, 1.0 / n) } else { direction.to_vec() };
        self.concept_gains.insert(concept_id.to_string(), gain);
        self.concept_directions.insert(concept_id.to_string(), unit);
        self
    }

    fn unclamped(&self, trace: &ActivationTrace, edits: &StateEdits) -> Result<f64> {
        let mut logit = self.base_logit;
        let n = self.readout.len() as f64;
        for (concept, gain) in &self.concept_gains {
            let dir = &self.concept_directions[concept];
            if dir.len() != trace.d_model() {
                return Err(FaithError::DimensionMismatch {
                    expected: trace.d_model(),
                    found: dir.len(),
                });
            }
            let mut acc = 0.0;
            for coord in self.readout.coords() {
                acc += vecops::dot_f32(trace.state(coord.0, coord.1)?, dir);
                if let Some(delta) = edits.get(&coord) {
                    acc += vecops::dot(delta, dir);
                }
            }
            logit += gain * acc / n;
        }
        Ok(logit)
    }

    /// `∂p/∂h` with respect to the readout-mean state, `Σ_c γ_c ĉ`, listed
    /// at every readout coordinate.
    pub fn gradients(&self) -> BTreeMap<Coord, Vec<f64>> {
        let d = self.concept_directions.values().next().map_or(0, Vec::len);
        let mut g = vec![0.0; d];
        for (concept, gain) in &self.concept_gains {
            for (x, c) in g.iter_mut().zip(&self.concept_directions[concept]) {
                *x += gain * c;
            }
        }
        self.readout.coords().map(|c| (c, g.clone())).collect()
    }
}

impl ProbabilityOracle for SynthForward {
    fn probability(&self, trace: &ActivationTrace, edits: &StateEdits) -> Result<f64> {
        Ok(self.unclamped(trace, edits)?.clamp(0.0, 1.0))
    }
}

/// Evaluates the forward model under `h ← h − λ·ĉ` at each intervention's
/// circuit coordinates.
pub fn forward_probability(
    fwd: &SynthForward,
    trace: &ActivationTrace,
    interventions: &[(Circuit, String, f64)],
) -> Result<f64> {
    let mut edits = StateEdits::new();
    for (circuit, concept, lambda) in interventions {
        let dir = fwd
            .concept_directions
            .get(concept)
            .ok_or_else(|| FaithError::UnknownConcept(concept.clone()))?;
        for coord in circuit.coords() {
            trace.check_coord(coord)?;
            let e = edits.entry(coord).or_insert_with(|| vec![0.0; dir.len()]);
            for (x, c) in e.iter_mut().zip(dir) {
                *x -= lambda * c;
            }
        }
    }
    fwd.probability(trace, &edits)
}

/// Adds seeded Gaussian observation noise to another oracle. The noise for
/// a query is a pure function of the seed and the edit values, so the
/// wrapper stays deterministic and thread-safe.
pub struct NoisyProbability<O> {
    pub inner: O,
    pub sigma: f64,
    pub seed: u64,
}

impl<O: ProbabilityOracle> ProbabilityOracle for NoisyProbability<O> {
    fn probability(&self, trace: &ActivationTrace, edits: &StateEdits) -> Result<f64> {
        let p = self.inner.probability(trace, edits)?;
        if self.sigma == 0.0 {
            return Ok(p);
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for ((t, l), delta) in edits {
            h.update((*t as u64).to_le_bytes());
            h.update((*l as u64).to_le_bytes());
            for v in delta {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let normal = Normal::new(0.0, self.sigma).map_err(|e| FaithError::invalid(e.to_string()))?;
        Ok(p + normal.sample(&mut rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Granularity;

    fn setup(base: f64, gain: f64) -> (SynthForward, ActivationTrace, Circuit) {
        let circuit = Circuit::new(Granularity::ResidualStream, [(0, 0)]).unwrap();
        let trace = ActivationTrace::new("m", Granularity::ResidualStream, vec!["a".into()], 1, 2, vec![1.0, 0.0]).unwrap();
        let fwd = SynthForward::new(base, circuit.clone()).with_concept("c", gain, &[1.0, 0.0]);
        (fwd, trace, circuit)
    }

    #[test]
    fn no_interventions_is_base_plus_readout() {
        let (fwd, trace, _) = setup(0.2, 0.3);
        assert_eq!(forward_probability(&fwd, &trace, &[]).unwrap(), 0.2 + 0.3);
    }

    #[test]
    fn unit_erasure_drops_by_gain() {
        let (fwd, trace, circuit) = setup(0.2, 0.3);
        let p0 = forward_probability(&fwd, &trace, &[(circuit.clone(), "c".into(), 0.0)]).unwrap();
        let p1 = forward_probability(&fwd, &trace, &[(circuit, "c".into(), 1.0)]).unwrap();
        assert_eq!(p1 - p0, -0.3);
    }

    #[test]
    fn clamped_and_unknown() {
        let (fwd, trace, circuit) = setup(0.95, 0.3);
        assert_eq!(forward_probability(&fwd, &trace, &[]).unwrap(), 1.0);
        assert_eq!(forward_probability(&fwd, &trace, &[(circuit.clone(), "c".into(), 50.0)]).unwrap(), 0.0);
        assert!(matches!(
            forward_probability(&fwd, &trace, &[(circuit, "nope".into(), 1.0)]),
            Err(FaithError::UnknownConcept(_))
        ));
    }

    #[test]
    fn noisy_oracle_is_deterministic() {
        let (fwd, trace, _) = setup(0.2, 0.3);
        let noisy = NoisyProbability { inner: fwd, sigma: 0.01, seed: 4 };
        let e = StateEdits::new();
        assert_eq!(noisy.probability(&trace, &e).unwrap(), noisy.probability(&trace, &e).unwrap());
    }
}
