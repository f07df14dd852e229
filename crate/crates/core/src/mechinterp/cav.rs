//! Diff-mean concept activation vectors and the linear probes built on them.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FaithError, Result};
use crate::vecops;

/// Per-layer direction for a named concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    pub concept_id: String,
    pub layer: usize,
    pub vector: Vec<f64>,
    /// Probe threshold: projection of the midpoint between class means.
    pub bias: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    #[serde(default)]
    pub probe_f1: Option<f64>,
}

impl ConceptVector {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// [`probe_predict`] with the bias chosen at fit time.
    pub fn predict(&self, h: &[f64]) -> Result<bool> {
        probe_predict(self, h, self.bias)
    }
}

fn check_dims<V: AsRef<[f64]>>(vs: &[V], dim: usize) -> Result<()> {
    for v in vs {
        if v.as_ref().len() != dim {
            return Err(FaithError::DimensionMismatch {
                expected: dim,
                found: v.as_ref().len(),
            });
        }
    }
    Ok(())
}

pub fn diff_mean_cav<V: AsRef<[f64]>>(pos: &[V], neg: &[V], concept_id: &str, layer: usize) -> Result<ConceptVector> {
    if pos.is_empty() || neg.is_empty() {
        return Err(FaithError::invalid(format!(
            "diff-mean needs both sides non-empty (pos={}, neg={})",
            pos.len(),
            neg.len()
        )));
    }
    let dim = pos[0].as_ref().len();
    check_dims(pos, dim)?;
    check_dims(neg, dim)?;
    let mu_pos = vecops::mean(pos.iter().map(AsRef::as_ref), dim);
    let mu_neg = vecops::mean(neg.iter().map(AsRef::as_ref), dim);
    let vector = vecops::sub(&mu_pos, &mu_neg);
    let midpoint: Vec<f64> = mu_pos.iter().zip(&mu_neg).map(|(a, b)| (a + b) * 0.5).collect();
    let bias = vecops::dot(&midpoint, &vector);
    Ok(ConceptVector {
        concept_id: concept_id.to_string(),
        layer,
        vector,
        bias,
        n_pos: pos.len(),
        n_neg: neg.len(),
        probe_f1: None,
    })
}

/// `⟨h, v⟩ ≥ bias`; ties classify positive.
pub fn probe_predict(cav: &ConceptVector, h: &[f64], bias: f64) -> Result<bool> {
    if h.len() != cav.dim() {
        return Err(FaithError::DimensionMismatch {
            expected: cav.dim(),
            found: h.len(),
        });
    }
    Ok(vecops::dot(h, &cav.vector) >= bias)
}

/// F1 of the positive class. Zero when nothing is predicted positive.
pub fn f1_score(predicted: &[bool], actual: &[bool]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

pub fn evaluate_probe_f1<V: AsRef<[f64]>>(cav: &mut ConceptVector, labeled: &[(V, bool)]) -> Result<f64> {
    let n_pos = labeled.iter().filter(|(_, y)| *y).count();
    if n_pos == 0 || n_pos == labeled.len() {
        return Err(FaithError::invalid("probe evaluation needs both positive and negative labels"));
    }
    let predicted = labeled
        .iter()
        .map(|(h, _)| cav.predict(h.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let actual: Vec<bool> = labeled.iter().map(|(_, y)| *y).collect();
    let f1 = f1_score(&predicted, &actual);
    cav.probe_f1 = Some(f1);
    Ok(f1)
}

/// Layers whose probe F1 strictly exceeds `threshold`, ascending.
/// Unevaluated vectors are never selected.
pub fn select_layers(cavs: &[ConceptVector], threshold: f64) -> Vec<usize> {
    cavs.iter()
        .filter(|c| c.probe_f1.is_some_and(|f| f > threshold))
        .map(|c| c.layer)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

pub const DEFAULT_LAYER_THRESHOLD: f64 = 0.6;

/// Splits indices into (train, test) with `test_frac` of every stratum held
/// out, keeping at least one member of each stratum in train.
pub fn stratified_split<K: Ord + Clone>(strata: &[K], test_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in strata.iter().enumerate() {
        groups.entry(k.clone()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, mut idx) in groups {
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64) * test_frac).round() as usize;
        let n_test = n_test.min(idx.len().saturating_sub(1));
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Fits one CAV per layer from labelled per-layer states and scores each on
/// a seeded 80/20 held-out split. `states[i][layer]` is sample `i`'s vector.
pub fn fit_layer_cavs(
    concept_id: &str,
    states: &[Vec<Vec<f64>>],
    labels: &[bool],
    seed: u64,
) -> Result<Vec<ConceptVector>> {
    if states.len() != labels.len() || states.is_empty() {
        return Err(FaithError::invalid("states and labels must be non-empty and equally long"));
    }
    let n_layers = states[0].len();
    let (train, test) = stratified_split(labels, 0.2, seed);
    let mut out = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let pick = |idx: &[usize], want: bool| -> Vec<&[f64]> {
            idx.iter()
                .filter(|&&i| labels[i] == want)
                .map(|&i| states[i][layer].as_slice())
                .collect()
        };
        let mut cav = diff_mean_cav(&pick(&train, true), &pick(&train, false), concept_id, layer)?;
        let held: Vec<(&[f64], bool)> = test.iter().map(|&i| (states[i][layer].as_slice(), labels[i])).collect();
        if held.iter().any(|(_, y)| *y) && held.iter().any(|(_, y)| !*y) {
            evaluate_probe_f1(&mut cav, &held)?;
        }
        out.push(cav);
    }
    Ok(out)
}
