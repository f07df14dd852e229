//! Synthetic planted-concept lab: a closed world of entities with known
//! directions, 2-hop instances built from scenario knobs, an affine
//! forward model and analytic decoders and explainers.

mod explainer;
mod forward;
mod instance;
mod samples;
mod world;

pub use explainer::{flips_under_faith_steering, SynthExplainer, SynthVariantOracle, PROPENSITY_THRESHOLD};
pub use forward::{forward_probability, NoisyProbability, SynthForward};
pub use instance::{
    default_window, expected_category, generate_instance, input_text, Chain, ExplainedBridge, ScenarioSpec,
    SynthInstance, FAITH_MIN_LAYER, PLANT, SYNTH_LAYERS, SYNTH_MODEL_ID,
};
pub use samples::{
    classification_instance, concept_samples, polarized_samples, ClassificationInstance, ClassificationSpec,
    PolarizedSample,
};
pub use world::{decode_hidden, generate_world, SynthDecoder, SynthWorld, DECODE_THRESHOLD};
