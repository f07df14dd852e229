use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::world::SynthWorld;
use crate::error::{FaithError, Result};
use crate::faithmetrics::{classify_taxonomy, Category};
use crate::trace::{ActivationTrace, Circuit, ExplanationRecord, GoldAnnotation, Granularity, StructuredNle};

pub const SYNTH_LAYERS: usize = 16;
pub const SYNTH_MODEL_ID: &str = "synthlab";
/// First layer that carries the planted faithfulness signal.
pub const FAITH_MIN_LAYER: usize = 6;
pub const PLANT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExplainedBridge {
    Correct,
    Wrong,
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub prediction_correct: bool,
    pub latent_bridge_present: bool,
    pub explained_bridge: ExplainedBridge,
    pub shortcut: bool,
    #[serde(default)]
    pub noise_sigma: f64,
    /// `(token, layer_lo, layer_hi)`, inclusive.
    #[serde(default = "default_window")]
    pub circuit_window: (usize, usize, usize),
}

/// Last token of `o1` in the 9-token input, layers 5-11.
pub fn default_window() -> (usize, usize, usize) {
    (7, 5, 11)
}

impl ScenarioSpec {
    pub fn new(prediction_correct: bool, latent_bridge_present: bool, explained_bridge: ExplainedBridge, shortcut: bool) -> Self {
        ScenarioSpec {
            prediction_correct,
            latent_bridge_present,
            explained_bridge,
            shortcut,
            noise_sigma: 0.0,
            circuit_window: default_window(),
        }
    }

    /// All 2×2×3×2 knob combinations in a fixed order.
    pub fn all(noise_sigma: f64) -> Vec<ScenarioSpec> {
        let mut out = Vec::with_capacity(24);
        for pred in [false, true] {
            for present in [false, true] {
                for bridge in [ExplainedBridge::Correct, ExplainedBridge::Wrong, ExplainedBridge::Absent] {
                    for shortcut in [false, true] {
                        let mut s = ScenarioSpec::new(pred, present, bridge, shortcut);
                        s.noise_sigma = noise_sigma;
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let (_, lo, hi) = self.circuit_window;
        if lo > hi {
            return Err(FaithError::invalid(format!("circuit window layer_lo {lo} > layer_hi {hi}")));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(FaithError::invalid(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn circuit(&self) -> Result<Circuit> {
        let (t, lo, hi) = self.circuit_window;
        Circuit::window(Granularity::ResidualStream, t, lo, hi)
    }

    /// Whether the explained bridge is what the circuit actually carries.
    /// A wrong bridge is internally used only when the true bridge is absent
    /// and the answer does not come from a shortcut.
    pub fn faithful_by_design(&self) -> bool {
        match self.explained_bridge {
            ExplainedBridge::Correct => self.latent_bridge_present,
            ExplainedBridge::Wrong => !self.latent_bridge_present && !self.shortcut,
            ExplainedBridge::Absent => false,
        }
    }

    /// Whether a wrong bridge entity is planted in the circuit.
    fn plants_wrong_bridge(&self) -> bool {
        self.explained_bridge == ExplainedBridge::Wrong && self.faithful_by_design()
    }
}

pub fn expected_category(spec: &ScenarioSpec) -> Category {
    classify_taxonomy(
        spec.prediction_correct,
        spec.faithful_by_design(),
        spec.explained_bridge == ExplainedBridge::Correct,
        spec.latent_bridge_present,
    )
}

/// Indices into the world's entity list plus relation names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub o1: usize,
    pub r1: String,
    pub o2: usize,
    pub r2: String,
    pub o3: usize,
}

#[derive(Debug, Clone)]
pub struct SynthInstance {
    pub trace: ActivationTrace,
    pub record: ExplanationRecord,
    pub expected: Category,
    pub spec: ScenarioSpec,
    pub chain: Chain,
    /// Entity the explanation names as bridge, if any.
    pub explained: Option<usize>,
    /// Token positions of the input, prediction and explanation segments.
    pub input_len: usize,
}

impl SynthInstance {
    pub fn circuit(&self) -> Result<Circuit> {
        self.spec.circuit()
    }
}

/// Input sentence for a chain, e.g. "The rival of the mentor of Ada Varga is".
pub fn input_text(world: &SynthWorld, chain: &Chain) -> String {
    format!("The {} the {} {} is", chain.r2, chain.r1, world.entities[chain.o1])
}

fn pick_chain(world: &SynthWorld, rng: &mut ChaCha8Rng) -> Result<Chain> {
    let rels = world.relation_names();
    if rels.len() < 2 {
        return Err(FaithError::invalid("instances need at least 2 relations"));
    }
    let n = world.entities.len();
    for _ in 0..1000 {
        let o1 = rng.random_range(0..n);
        let i1 = rng.random_range(0..rels.len());
        let mut i2 = rng.random_range(0..rels.len() - 1);
        if i2 >= i1 {
            i2 += 1;
        }
        let (r1, r2) = (rels[i1], rels[i2]);
        let o2 = world.apply(r1, o1).expect("relation");
        let o3 = world.apply(r2, o2).expect("relation");
        if o1 != o2 && o2 != o3 && o1 != o3 {
            return Ok(Chain {
                o1,
                r1: r1.to_string(),
                o2,
                r2: r2.to_string(),
                o3,
            });
        }
    }
    Err(FaithError::invalid("world has no 2-hop chain with distinct entities"))
}

fn pick_other(n: usize, exclude: &[usize], rng: &mut ChaCha8Rng) -> usize {
    let pool: Vec<usize> = (0..n).filter(|i| !exclude.contains(i)).collect();
    pool[rng.random_range(0..pool.len())]
}

fn split_tokens(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split_whitespace().map(str::to_string)
}

pub fn generate_instance(world: &SynthWorld, spec: &ScenarioSpec, seed: u64) -> Result<SynthInstance> {
    spec.validate()?;
    if world.entities.len() < 5 {
        return Err(FaithError::invalid("instances need a world with at least 5 entities"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ world.rng_seed.rotate_left(32));
    let chain = pick_chain(world, &mut rng)?;
    let n = world.entities.len();
    let prediction = if spec.prediction_correct {
        chain.o3
    } else {
        pick_other(n, &[chain.o1, chain.o2, chain.o3], &mut rng)
    };
    let wrong_bridge = pick_other(n, &[chain.o1, chain.o2, chain.o3, prediction], &mut rng);
    let explained = match spec.explained_bridge {
        ExplainedBridge::Correct => Some(chain.o2),
        ExplainedBridge::Wrong => Some(wrong_bridge),
        ExplainedBridge::Absent => None,
    };

    let x = input_text(world, &chain);
    let pred_name = &world.entities[prediction];
    let o1_name = &world.entities[chain.o1];
    let nle = match explained {
        Some(b) => {
            let b = &world.entities[b];
            format!("The {} {o1_name} is {b}, and the {} {b} is {pred_name}.", chain.r1, chain.r2)
        }
        None => format!("I know that the {} the {} {o1_name} is {pred_name}.", chain.r2, chain.r1),
    };

    let tokens: Vec<String> = split_tokens(&x)
        .chain(split_tokens(pred_name))
        .chain(split_tokens(&nle))
        .collect();
    let input_len = x.split_whitespace().count();
    let n_tokens = tokens.len();
    let d = world.d_model;
    let (wt, lo, hi) = spec.circuit_window;
    if wt >= n_tokens || hi >= SYNTH_LAYERS {
        return Err(FaithError::OutOfBounds {
            token: wt,
            layer: hi,
            n_tokens,
            n_layers: SYNTH_LAYERS,
        });
    }

    let mut states = vec![0.0f64; n_tokens * SYNTH_LAYERS * d];
    let mut plant = |token: usize, layer: usize, dir: &[f64], coef: f64| {
        let off = (token * SYNTH_LAYERS + layer) * d;
        for (s, v) in states[off..off + d].iter_mut().zip(dir) {
            *s += coef * v;
        }
    };
    for layer in lo..=hi {
        if spec.latent_bridge_present {
            plant(wt, layer, &world.directions[chain.o2], PLANT);
        }
        if spec.plants_wrong_bridge() {
            plant(wt, layer, &world.directions[wrong_bridge], PLANT);
        }
        if spec.shortcut {
            // direct o1 -> o3 association at the answer position
            plant(input_len - 1, layer, &world.directions[chain.o3], PLANT);
        }
    }
    if spec.faithful_by_design() {
        if let Some(f) = &world.faith_direction {
            for layer in FAITH_MIN_LAYER..SYNTH_LAYERS {
                plant(n_tokens - 1, layer, f, PLANT);
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| FaithError::invalid(e.to_string()))?;
        for s in &mut states {
            *s += normal.sample(&mut rng);
        }
    }
    let trace = ActivationTrace::new(
        SYNTH_MODEL_ID,
        Granularity::ResidualStream,
        tokens,
        SYNTH_LAYERS,
        d,
        states.iter().map(|&v| v as f32).collect(),
    )?;

    let e = |i: usize| world.entities[i].as_str();
    let record = ExplanationRecord {
        id: format!("synth-{seed:06}"),
        input_text: x,
        prediction: pred_name.clone(),
        probability: None,
        self_nle: nle,
        extracted_concepts: vec![],
        gold: Some(GoldAnnotation::chain(e(chain.o1), &chain.r1, e(chain.o2), &chain.r2, e(chain.o3))),
        structured: Some(StructuredNle {
            bridge: explained.map(|b| world.entities[b].clone()),
            concepts: vec![],
        }),
    };
    Ok(SynthInstance {
        trace,
        record,
        expected: expected_category(spec),
        spec: *spec,
        chain,
        explained,
        input_len,
    })
}
