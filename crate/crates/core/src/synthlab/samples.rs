//! Labelled sample generators for probes, faithfulness vectors and the
//! classification task.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::forward::SynthForward;
use super::instance::{FAITH_MIN_LAYER, SYNTH_LAYERS, SYNTH_MODEL_ID};
use super::world::SynthWorld;
use crate::error::{FaithError, Result};
use crate::trace::{ActivationTrace, Circuit, ExplanationRecord, GoldAnnotation, Granularity, StructuredNle};

fn normal(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| FaithError::invalid(e.to_string()))
}

/// `n_pos` states `direction + ε` and `n_neg` states `ε`, with
/// `ε ~ N(0, σ²I)`.
pub fn concept_samples(
    direction: &[f64],
    n_pos: usize,
    n_neg: usize,
    sigma: f64,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal(sigma)?;
    let mut draw = |plant: bool| -> Vec<f64> {
        direction
            .iter()
            .map(|&c| if plant { c } else { 0.0 } + noise.sample(&mut rng))
            .collect()
    };
    let pos = (0..n_pos).map(|_| draw(true)).collect();
    let neg = (0..n_neg).map(|_| draw(false)).collect();
    Ok((pos, neg))
}

/// A short x_nle trace with a known faithfulness label and class.
#[derive(Debug, Clone)]
pub struct PolarizedSample {
    pub record_id: String,
    pub trace: ActivationTrace,
    pub faithful: bool,
    pub class: String,
}

/// Balanced polarized corpus: faithful samples carry `direction` at the
/// last token of every layer ≥ [`FAITH_MIN_LAYER`]. Classes are assigned
/// round-robin.
pub fn polarized_samples(
    direction: &[f64],
    n: usize,
    n_classes: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<PolarizedSample>> {
    if n_classes == 0 {
        return Err(FaithError::invalid("need at least one class"));
    }
    let d = direction.len();
    let noise = normal(sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<String> = ["q", "a", "because", "e"].iter().map(|s| s.to_string()).collect();
    let n_tokens = tokens.len();
    (0..n)
        .map(|i| {
            let faithful = i % 2 == 0;
            let class = format!("class{}", (i / 2) % n_classes);
            let mut states = vec![0.0f32; n_tokens * SYNTH_LAYERS * d];
            for layer in 0..SYNTH_LAYERS {
                for tok in 0..n_tokens {
                    let off = (tok * SYNTH_LAYERS + layer) * d;
                    let planted = faithful && tok == n_tokens - 1 && layer >= FAITH_MIN_LAYER;
                    for k in 0..d {
                        let base = if planted { direction[k] } else { 0.0 };
                        states[off + k] = (base + noise.sample(&mut rng)) as f32;
                    }
                }
            }
            let trace = ActivationTrace::new(
                SYNTH_MODEL_ID,
                Granularity::ResidualStream,
                tokens.clone(),
                SYNTH_LAYERS,
                d,
                states,
            )?;
            Ok(PolarizedSample {
                record_id: format!("pol-{i:05}"),
                trace,
                faithful,
                class,
            })
        })
        .collect()
}

/// Knobs for one classification instance. Concepts refer to world
/// entities, which double as classification concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSpec {
    /// concepts planted in the input states
    pub present: Vec<String>,
    /// concepts the forward model depends on (gain `gain`)
    pub influential: Vec<String>,
    /// concepts the explanation invokes
    pub mentioned: Vec<String>,
    pub gain: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct ClassificationInstance {
    pub trace: ActivationTrace,
    pub record: ExplanationRecord,
    pub forward: SynthForward,
    pub circuit: Circuit,
    /// |mentioned ∩ influential| / |mentioned|, or None if nothing is mentioned
    pub expected_f: Option<f64>,
}

const CLASS_TOKENS: [&str; 6] = ["report", "on", "the", "topic", "today", "."];

pub fn classification_instance(
    world: &SynthWorld,
    spec: &ClassificationSpec,
    class_label: &str,
    seed: u64,
) -> Result<ClassificationInstance> {
    let d = world.d_model;
    let dir = |c: &str| world.direction(c).ok_or_else(|| FaithError::UnknownConcept(c.to_string()));
    let tokens: Vec<String> = CLASS_TOKENS.iter().map(|s| s.to_string()).collect();
    let last = tokens.len() - 1;
    let circuit = Circuit::window(Granularity::ResidualStream, last, FAITH_MIN_LAYER, SYNTH_LAYERS - 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal(spec.noise_sigma)?;
    let mut states = vec![0.0f64; tokens.len() * SYNTH_LAYERS * d];
    let mut planted: BTreeMap<(usize, usize), Vec<(String, f64)>> = BTreeMap::new();
    for c in &spec.present {
        let v = dir(c)?;
        for coord in circuit.coords() {
            let off = (coord.0 * SYNTH_LAYERS + coord.1) * d;
            for (s, x) in states[off..off + d].iter_mut().zip(v) {
                *s += x;
            }
            planted.entry(coord).or_default().push((c.clone(), 1.0));
        }
    }
    for s in &mut states {
        *s += noise.sample(&mut rng);
    }
    let trace = ActivationTrace::new(
        SYNTH_MODEL_ID,
        Granularity::ResidualStream,
        tokens,
        SYNTH_LAYERS,
        d,
        states.iter().map(|&v| v as f32).collect(),
    )?;

    let mut forward = SynthForward::new(0.3 + 0.05 * rng.random::<f64>(), circuit.clone());
    for c in world.entities.iter().filter(|c| spec.present.contains(c) || spec.influential.contains(c)) {
        let gain = if spec.influential.contains(c) { spec.gain } else { 0.0 };
        forward = forward.with_concept(c, gain, dir(c)?);
    }
    forward.planted = planted;

    let presence = world
        .entities
        .iter()
        .map(|c| (c.clone(), spec.present.contains(c)))
        .collect();
    let record = ExplanationRecord {
        id: format!("cls-{seed:06}"),
        input_text: CLASS_TOKENS.join(" "),
        prediction: class_label.to_string(),
        probability: None,
        self_nle: if spec.mentioned.is_empty() {
            "The text reads like this category.".to_string()
        } else {
            format!("The text mentions {}.", spec.mentioned.join(" and "))
        },
        extracted_concepts: vec![],
        gold: Some(GoldAnnotation {
            class_label: Some(class_label.to_string()),
            concept_presence: presence,
            ..Default::default()
        }),
        structured: Some(StructuredNle {
            bridge: None,
            concepts: spec.mentioned.clone(),
        }),
    };
    let expected_f = (!spec.mentioned.is_empty()).then(|| {
        let hits = spec.mentioned.iter().filter(|c| spec.influential.contains(c)).count();
        hits as f64 / spec.mentioned.len() as f64
    });
    Ok(ClassificationInstance {
        trace,
        record,
        forward,
        circuit,
        expected_f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlab::generate_world;

    #[test]
    fn concept_samples_shape() {
        let (p, n) = concept_samples(&[1.0, 0.0], 3, 2, 0.0, 1).unwrap();
        assert_eq!(p, vec![vec![1.0, 0.0]; 3]);
        assert_eq!(n, vec![vec![0.0, 0.0]; 2]);
    }

    #[test]
    fn polarized_is_balanced() {
        let s = polarized_samples(&[1.0, 0.0, 0.0], 10, 2, 0.0, 1).unwrap();
        assert_eq!(s.iter().filter(|x| x.faithful).count(), 5);
        let t = &s[0].trace;
        assert_eq!(t.state(3, FAITH_MIN_LAYER).unwrap(), &[1.0, 0.0, 0.0]);
        assert_eq!(t.state(3, FAITH_MIN_LAYER - 1).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn classification_expected_f() {
        let w = generate_world(8, 1, 16, 2).unwrap();
        let spec = ClassificationSpec {
            present: vec![w.entities[0].clone(), w.entities[1].clone()],
            influential: vec![w.entities[0].clone()],
            mentioned: vec![w.entities[0].clone(), w.entities[1].clone()],
            gain: 0.3,
            noise_sigma: 0.0,
        };
        let inst = classification_instance(&w, &spec, "sports", 3).unwrap();
        assert_eq!(inst.expected_f, Some(0.5));
        assert_eq!(inst.record.gold.as_ref().unwrap().concept_presence[&w.entities[1]], true);
        assert!(classification_instance(
            &w,
            &ClassificationSpec {
                present: vec!["nobody".into()],
                ..spec
            },
            "sports",
            3
        )
        .is_err());
    }
}
