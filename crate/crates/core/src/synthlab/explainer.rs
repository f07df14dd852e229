//! Analytic stand-ins for regenerating explanations under steering and
//! re-answering CAS variants.

use std::collections::BTreeMap;

use super::instance::{ScenarioSpec, FAITH_MIN_LAYER, PLANT};
use super::world::{SynthWorld, DECODE_THRESHOLD};
use crate::error::{FaithError, Result};
use crate::evalcas::{Variant, VariantOracle};
use crate::steering::{ExplanationOracle, Regenerated, SteerItem};
use crate::trace::{ActivationTrace, Circuit, ExplanationRecord};
use crate::vecops;

/// Explanation regeneration for synthetic records. The faithfulness
/// propensity is the mean projection of the last-token state on the faith
/// direction over layers ≥ 6. Below 0.5 the explanation is left alone.
/// Above it, the explanation is made to match the circuit: it names the
/// strongest entity the circuit decodes to, or if the circuit carries none,
/// the named bridge is written into the circuit.
pub struct SynthExplainer<'w> {
    pub world: &'w SynthWorld,
}

pub const PROPENSITY_THRESHOLD: f64 = 0.5;

impl SynthExplainer<'_> {
    pub fn propensity(&self, trace: &ActivationTrace) -> Result<f64> {
        let f = self
            .world
            .faith_direction
            .as_ref()
            .ok_or_else(|| FaithError::Precondition("world has no faith direction".into()))?;
        let last = trace.last_token();
        let layers: Vec<usize> = (FAITH_MIN_LAYER..trace.n_layers()).collect();
        if layers.is_empty() {
            return Err(FaithError::Precondition(format!("trace has no layers >= {FAITH_MIN_LAYER}")));
        }
        let mut acc = 0.0;
        for &l in &layers {
            acc += vecops::dot_f32(trace.state(last, l)?, f);
        }
        Ok(acc / layers.len() as f64)
    }

    /// Strongest decodable entity over the circuit.
    fn top_entity(&self, trace: &ActivationTrace, circuit: &Circuit) -> Result<Option<usize>> {
        let mut best: Option<(f64, usize)> = None;
        for (t, l) in circuit.coords() {
            let h = trace.state(t, l)?;
            for (i, d) in self.world.directions.iter().enumerate() {
                let s = vecops::dot_f32(h, d);
                if s >= DECODE_THRESHOLD && best.is_none_or(|(b, _)| s > b) {
                    best = Some((s, i));
                }
            }
        }
        Ok(best.map(|(_, i)| i))
    }

    fn decoded_in_circuit(&self, trace: &ActivationTrace, circuit: &Circuit, entity: usize) -> Result<bool> {
        let d = &self.world.directions[entity];
        for (t, l) in circuit.coords() {
            if vecops::dot_f32(trace.state(t, l)?, d) >= DECODE_THRESHOLD {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

fn bridge_nle(record: &ExplanationRecord, bridge: &str) -> Result<String> {
    let g = record
        .gold
        .as_ref()
        .filter(|g| g.has_chain())
        .ok_or_else(|| FaithError::Missing(format!("record {} has no gold chain", record.id)))?;
    let (o1, r1, r2) = (g.o1.as_deref().unwrap(), g.r1.as_deref().unwrap(), g.r2.as_deref().unwrap());
    Ok(format!(
        "The {r1} {o1} is {bridge}, and the {r2} {bridge} is {}.",
        record.prediction
    ))
}

impl ExplanationOracle for SynthExplainer<'_> {
    fn regenerate(&self, item: &SteerItem, steered: &ActivationTrace) -> Result<Regenerated> {
        let unchanged = || Regenerated {
            record: item.record.clone(),
            trace: steered.clone(),
        };
        if self.propensity(steered)? < PROPENSITY_THRESHOLD {
            return Ok(unchanged());
        }
        let named = item
            .record
            .structured
            .as_ref()
            .and_then(|s| s.bridge.as_deref())
            .map(|b| {
                self.world
                    .entity_index(b)
                    .ok_or_else(|| FaithError::UnknownConcept(b.to_string()))
            })
            .transpose()?;
        if let Some(b) = named {
            if self.decoded_in_circuit(steered, &item.circuit, b)? {
                return Ok(unchanged());
            }
        }
        if let Some(top) = self.top_entity(steered, &item.circuit)? {
            let name = self.world.entities[top].clone();
            let mut record = item.record.clone();
            record.self_nle = bridge_nle(&record, &name)?;
            record.structured.get_or_insert_with(Default::default).bridge = Some(name);
            return Ok(Regenerated {
                record,
                trace: steered.clone(),
            });
        }
        match named {
            Some(b) => {
                let dir = &self.world.directions[b];
                let trace = steered.with_edits(item.circuit.coords(), |_, h| {
                    for (x, v) in h.iter_mut().zip(dir) {
                        *x = (f64::from(*x) + PLANT * v) as f32;
                    }
                })?;
                Ok(Regenerated {
                    record: item.record.clone(),
                    trace,
                })
            }
            None => Ok(unchanged()),
        }
    }
}

/// Whether [`SynthExplainer`] can make this scenario faithful once its
/// propensity is raised. Everything except an already faithful record and
/// an absent explanation over an empty circuit qualifies.
pub fn flips_under_faith_steering(spec: &ScenarioSpec) -> bool {
    use super::instance::ExplainedBridge::Absent;
    !spec.faithful_by_design() && !(spec.explained_bridge == Absent && !spec.latent_bridge_present)
}

/// Answers CAS variants from the generating scenarios, keyed by record id.
/// A first-hop hint repairs a wrong answer only when the latent bridge was
/// missing; a second-hop hint only when it was present. A relation swap is
/// answered correctly only by a genuine bridge without a shortcut.
pub struct SynthVariantOracle {
    pub specs: BTreeMap<String, ScenarioSpec>,
}

impl VariantOracle for SynthVariantOracle {
    fn variant_correct(&self, record: &ExplanationRecord, variant: Variant) -> Result<bool> {
        let s = self
            .specs
            .get(&record.id)
            .ok_or_else(|| FaithError::Missing(format!("no scenario for record {}", record.id)))?;
        Ok(match variant {
            Variant::Hint1 => s.prediction_correct || !s.latent_bridge_present,
            Variant::Hint2 => s.prediction_correct || s.latent_bridge_present,
            Variant::RelSwap => s.prediction_correct && s.latent_bridge_present && !s.shortcut,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlab::{generate_instance, generate_world, ExplainedBridge};

    #[test]
    fn low_propensity_is_identity() {
        let w = generate_world(12, 4, 32, 1).unwrap();
        let inst = generate_instance(&w, &ScenarioSpec::new(false, true, ExplainedBridge::Wrong, false), 3).unwrap();
        let item = SteerItem {
            record: inst.record.clone(),
            circuit: inst.circuit().unwrap(),
            trace: inst.trace.clone(),
        };
        let ex = SynthExplainer { world: &w };
        assert!(ex.propensity(&inst.trace).unwrap().abs() < 1e-9);
        let out = ex.regenerate(&item, &inst.trace).unwrap();
        assert_eq!(out.record, inst.record);
    }

    #[test]
    fn variant_oracle_rules() {
        let o = SynthVariantOracle {
            specs: [("a".to_string(), ScenarioSpec::new(false, false, ExplainedBridge::Wrong, false))].into(),
        };
        let mut r = generate_instance(&generate_world(8, 3, 16, 0).unwrap(), &o.specs["a"], 0).unwrap().record;
        r.id = "a".into();
        assert!(o.variant_correct(&r, Variant::Hint1).unwrap());
        assert!(!o.variant_correct(&r, Variant::Hint2).unwrap());
        assert!(!o.variant_correct(&r, Variant::RelSwap).unwrap());
        r.id = "b".into();
        assert!(o.variant_correct(&r, Variant::Hint1).is_err());
    }
}
