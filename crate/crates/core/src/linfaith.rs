//! Linear faithfulness detection: diff-mean faithfulness vectors over
//! explanation sequences, majority-vote probes, cosine comparison against
//! imported vector sets and cross-task transfer.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FaithError, Result};
use crate::faithmetrics::FaithfulnessReport;
use crate::mechinterp::{f1_score, stratified_split};
use crate::trace::{ActivationTrace, ExplanationRecord};
use crate::vecops;

pub const DEFAULT_MIN_LAYER: usize = 6;
pub const DEFAULT_PERMUTATIONS: usize = 1000;
pub const MIN_PERMUTATIONS: usize = 100;
pub const SIGNIFICANCE_LEVEL: f64 = 0.01;

pub type LayerVectors = BTreeMap<usize, Vec<f64>>;

/// Text of the sequence `[x, f(x), e(x)]` the traces are taken over.
pub fn nle_sequence_text(record: &ExplanationRecord) -> String {
    format!("{} {} {}", record.input_text, record.prediction, record.self_nle)
}

#[derive(Debug, Clone)]
pub struct NleSequenceTrace {
    pub record_id: String,
    pub trace: ActivationTrace,
    pub label: bool,
}

impl NleSequenceTrace {
    fn last_state(&self, layer: usize) -> Result<Vec<f64>> {
        Ok(vecops::to_f64(self.trace.state(self.trace.last_token(), layer)?))
    }
}

/// Keeps records scored exactly 0 or 1 and pairs them with their traces.
pub fn build_polarized_dataset(
    reports: &[FaithfulnessReport],
    traces: &BTreeMap<String, ActivationTrace>,
) -> Result<Vec<NleSequenceTrace>> {
    reports
        .iter()
        .filter_map(|r| r.polarized_label().map(|label| (r, label)))
        .map(|(r, label)| {
            let trace = traces
                .get(&r.record_id)
                .ok_or_else(|| FaithError::Missing(format!("no sequence trace for record {}", r.record_id)))?;
            Ok(NleSequenceTrace {
                record_id: r.record_id.clone(),
                trace: trace.clone(),
                label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithVectorSet {
    pub task: String,
    pub vectors: LayerVectors,
    pub f1_by_layer: BTreeMap<usize, f64>,
    /// probe threshold per layer: projection of the midpoint of the pooled
    /// class means
    pub biases: BTreeMap<usize, f64>,
}

impl FaithVectorSet {
    /// Layers whose held-out F1 strictly exceeds `threshold`.
    pub fn eligible_layers(&self, threshold: f64) -> BTreeSet<usize> {
        self.f1_by_layer
            .iter()
            .filter(|(_, &f)| f > threshold)
            .map(|(&l, _)| l)
            .collect()
    }

    pub fn d_model(&self) -> usize {
        self.vectors.values().next().map_or(0, Vec::len)
    }

    fn predict(&self, layer: usize, h: &[f64]) -> Result<bool> {
        let v = &self.vectors[&layer];
        if v.len() != h.len() {
            return Err(FaithError::DimensionMismatch {
                expected: v.len(),
                found: h.len(),
            });
        }
        Ok(vecops::dot(h, v) >= self.biases.get(&layer).copied().unwrap_or(0.0))
    }
}

fn check_shapes(dataset: &[NleSequenceTrace]) -> Result<(usize, usize)> {
    let first = dataset
        .first()
        .ok_or_else(|| FaithError::invalid("empty polarized dataset"))?;
    let (nl, d) = (first.trace.n_layers(), first.trace.d_model());
    for s in dataset {
        if s.trace.d_model() != d {
            return Err(FaithError::DimensionMismatch {
                expected: d,
                found: s.trace.d_model(),
            });
        }
        if s.trace.n_layers() != nl {
            return Err(FaithError::SizeMismatch(format!(
                "record {} has {} layers, expected {nl}",
                s.record_id,
                s.trace.n_layers()
            )));
        }
    }
    Ok((nl, d))
}

fn class_of<'a>(s: &NleSequenceTrace, class_labels: Option<&'a BTreeMap<String, String>>) -> Result<Option<&'a str>> {
    match class_labels {
        None => Ok(None),
        Some(m) => m
            .get(&s.record_id)
            .map(|c| Some(c.as_str()))
            .ok_or_else(|| FaithError::Missing(format!("no class label for record {}", s.record_id))),
    }
}

/// Diff-mean direction at one layer over `idx`, averaged over classes when
/// class labels are given. Also returns the pooled midpoint.
fn layer_vector(
    states: &[Vec<f64>],
    labels: &[bool],
    classes: &[Option<&str>],
    idx: &[usize],
    d: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut groups: BTreeMap<Option<&str>, (Vec<&[f64]>, Vec<&[f64]>)> = BTreeMap::new();
    for &i in idx {
        let g = groups.entry(classes[i]).or_default();
        if labels[i] {
            g.0.push(&states[i]);
        } else {
            g.1.push(&states[i]);
        }
    }
    let mut acc = vec![0.0; d];
    for (class, (pos, neg)) in &groups {
        if pos.is_empty() || neg.is_empty() {
            return Err(FaithError::invalid(format!(
                "class {:?} has only {} examples",
                class.unwrap_or("(all)"),
                if pos.is_empty() { "unfaithful" } else { "faithful" }
            )));
        }
        let diff = vecops::sub(&vecops::mean(pos.iter().copied(), d), &vecops::mean(neg.iter().copied(), d));
        for (a, x) in acc.iter_mut().zip(&diff) {
            *a += x;
        }
    }
    let v = vecops::scale(&acc, 1.0 / groups.len() as f64);
    let all_pos = idx.iter().filter(|&&i| labels[i]).map(|&i| states[i].as_slice());
    let all_neg = idx.iter().filter(|&&i| !labels[i]).map(|&i| states[i].as_slice());
    let mp = vecops::mean(all_pos, d);
    let mn = vecops::mean(all_neg, d);
    let mid: Vec<f64> = mp.iter().zip(&mn).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((v, mid))
}

/// Per-layer last-token faithfulness vectors fitted on a seeded 80/20
/// split, with held-out probe F1.
pub fn faithfulness_vectors(
    task: &str,
    dataset: &[NleSequenceTrace],
    class_labels: Option<&BTreeMap<String, String>>,
    seed: u64,
) -> Result<FaithVectorSet> {
    let (n_layers, d) = check_shapes(dataset)?;
    let labels: Vec<bool> = dataset.iter().map(|s| s.label).collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(FaithError::invalid("polarized dataset needs faithful and unfaithful records"));
    }
    let classes: Vec<Option<&str>> = dataset
        .iter()
        .map(|s| class_of(s, class_labels))
        .collect::<Result<_>>()?;
    let strata: Vec<(Option<&str>, bool)> = classes.iter().copied().zip(labels.iter().copied()).collect();
    let (train, test) = stratified_split(&strata, 0.2, seed);
    let test_labels: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
    if !test_labels.iter().any(|&l| l) || !test_labels.iter().any(|&l| !l) {
        return Err(FaithError::invalid("too few records for a held-out split with both labels"));
    }

    let per_layer: Vec<(usize, Vec<f64>, f64, f64)> = (0..n_layers)
        .into_par_iter()
        .map(|layer| {
            let states: Vec<Vec<f64>> = dataset.iter().map(|s| s.last_state(layer)).collect::<Result<_>>()?;
            let (v, mid) = layer_vector(&states, &labels, &classes, &train, d)?;
            let bias = vecops::dot(&mid, &v);
            let pred: Vec<bool> = test.iter().map(|&i| vecops::dot(&states[i], &v) >= bias).collect();
            Ok((layer, v, bias, f1_score(&pred, &test_labels)))
        })
        .collect::<Result<_>>()?;
    let mut fvs = FaithVectorSet {
        task: task.to_string(),
        vectors: BTreeMap::new(),
        f1_by_layer: BTreeMap::new(),
        biases: BTreeMap::new(),
    };
    for (layer, v, bias, f1) in per_layer {
        fvs.vectors.insert(layer, v);
        fvs.biases.insert(layer, bias);
        fvs.f1_by_layer.insert(layer, f1);
    }
    Ok(fvs)
}

/// Strict majority of per-layer probes at layers ≥ `min_layer`; a tie is
/// unfaithful.
pub fn majority_vote_classify(fvs: &FaithVectorSet, trace: &ActivationTrace, min_layer: usize) -> Result<bool> {
    let last = trace.last_token();
    let mut votes = 0usize;
    let mut n = 0usize;
    for &layer in fvs.vectors.keys().filter(|&&l| l >= min_layer && l < trace.n_layers()) {
        n += 1;
        if fvs.predict(layer, &vecops::to_f64(trace.state(last, layer)?))? {
            votes += 1;
        }
    }
    if n == 0 {
        return Err(FaithError::Precondition(format!("no probe layers >= {min_layer} in trace")));
    }
    Ok(2 * votes > n)
}

/// F1 of the majority vote on a labelled dataset.
pub fn majority_vote_f1(fvs: &FaithVectorSet, dataset: &[NleSequenceTrace], min_layer: usize) -> Result<f64> {
    let pred: Vec<bool> = dataset
        .par_iter()
        .map(|s| majority_vote_classify(fvs, &s.trace, min_layer))
        .collect::<Result<_>>()?;
    let actual: Vec<bool> = dataset.iter().map(|s| s.label).collect();
    Ok(f1_score(&pred, &actual))
}

/// Applies vectors from one task to another task's records.
pub fn transfer_eval(source: &FaithVectorSet, target: &[NleSequenceTrace], min_layer: usize) -> Result<f64> {
    let (_, d) = check_shapes(target)?;
    if source.d_model() != d {
        return Err(FaithError::DimensionMismatch {
            expected: source.d_model(),
            found: d,
        });
    }
    majority_vote_f1(source, target, min_layer)
}

/// Signed cosine of greatest magnitude over shared eligible layers, with
/// its layer. Ties keep the lowest layer.
pub fn cosine_similarity_analysis(a: &LayerVectors, b: &LayerVectors, eligible: &BTreeSet<usize>) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for &l in eligible {
        let (Some(x), Some(y)) = (a.get(&l), b.get(&l)) else {
            continue;
        };
        if x.len() != y.len() {
            return Err(FaithError::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        let c = vecops::cosine(x, y);
        if best.is_none_or(|(bc, _)| c.abs() > bc.abs()) {
            best = Some((c, l));
        }
    }
    best.ok_or_else(|| FaithError::Precondition("no shared eligible layer".into()))
}

/// Label-permutation test for `|cos(F_layer, reference)|`. Labels are
/// shuffled within classes when class labels are given. The p-value is
/// add-one smoothed.
pub fn permutation_pvalue(
    dataset: &[NleSequenceTrace],
    class_labels: Option<&BTreeMap<String, String>>,
    layer: usize,
    reference: &[f64],
    n_perms: usize,
    seed: u64,
) -> Result<f64> {
    if n_perms < MIN_PERMUTATIONS {
        return Err(FaithError::invalid(format!("n_perms {n_perms} < {MIN_PERMUTATIONS}")));
    }
    let (_, d) = check_shapes(dataset)?;
    if reference.len() != d {
        return Err(FaithError::DimensionMismatch {
            expected: d,
            found: reference.len(),
        });
    }
    let states: Vec<Vec<f64>> = dataset.iter().map(|s| s.last_state(layer)).collect::<Result<_>>()?;
    let labels: Vec<bool> = dataset.iter().map(|s| s.label).collect();
    let classes: Vec<Option<&str>> = dataset
        .iter()
        .map(|s| class_of(s, class_labels))
        .collect::<Result<_>>()?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let observed = vecops::cosine(&layer_vector(&states, &labels, &classes, &all, d)?.0, reference).abs();

    let mut by_class: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
    for (i, c) in classes.iter().enumerate() {
        by_class.entry(*c).or_default().push(i);
    }
    let hits: usize = (0..n_perms)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let mut perm = labels.clone();
            for idx in by_class.values() {
                let mut vals: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                vals.shuffle(&mut rng);
                for (&i, v) in idx.iter().zip(vals) {
                    perm[i] = v;
                }
            }
            let v = layer_vector(&states, &perm, &classes, &all, d)?.0;
            Ok(usize::from(vecops::cosine(&v, reference).abs() >= observed))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok((hits + 1) as f64 / (n_perms + 1) as f64)
}

/// Externally derived directions, e.g. hallucination or deception vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportedVectorSet {
    pub name: String,
    pub vectors: LayerVectors,
    /// citation of where the vectors come from
    pub source: String,
}

impl ImportedVectorSet {
    pub fn validate(&self) -> Result<()> {
        let d = self.vectors.values().next().map_or(0, Vec::len);
        for (l, v) in &self.vectors {
            if v.len() != d {
                return Err(FaithError::DimensionMismatch { expected: d, found: v.len() });
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(FaithError::invalid(format!("vector at layer {l} has a non-finite entry at {i}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCell {
    pub value: f64,
    pub layer: usize,
    pub significant: bool,
}

/// Rows are faithfulness vector sets, columns other vector sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<SimilarityCell>>,
}

/// One row entry of a similarity report.
pub struct SimilarityRow<'a> {
    pub fvs: &'a FaithVectorSet,
    pub dataset: &'a [NleSequenceTrace],
    pub class_labels: Option<&'a BTreeMap<String, String>>,
}

/// Max-magnitude cosine per (row, column) over the row's eligible layers,
/// with permutation significance at the 1% level.
pub fn similarity_report(
    rows: &[SimilarityRow<'_>],
    cols: &[(String, LayerVectors)],
    f1_threshold: f64,
    n_perms: usize,
    seed: u64,
) -> Result<SimilarityReport> {
    let mut cells = Vec::with_capacity(rows.len());
    for row in rows {
        let eligible = row.fvs.eligible_layers(f1_threshold);
        let mut line = Vec::with_capacity(cols.len());
        for (_, col) in cols {
            let (value, layer) = cosine_similarity_analysis(&row.fvs.vectors, col, &eligible)?;
            let p = permutation_pvalue(row.dataset, row.class_labels, layer, &col[&layer], n_perms, seed)?;
            line.push(SimilarityCell {
                value,
                layer,
                significant: p < SIGNIFICANCE_LEVEL,
            });
        }
        cells.push(line);
    }
    Ok(SimilarityReport {
        rows: rows.iter().map(|r| r.fvs.task.clone()).collect(),
        cols: cols.iter().map(|(n, _)| n.clone()).collect(),
        cells,
    })
}

/// Cell text such as `0.49* (22)`.
pub fn format_cell(c: &SimilarityCell) -> String {
    format!("{:.2}{} ({})", c.value, if c.significant { "*" } else { "" }, c.layer)
}
