use std::collections::BTreeMap;

use faithkit::faithmetrics::{faithfulness_score, FaithScore};
use faithkit::mechinterp::{
    erasure_sweep, fit_layer_cavs, fit_linear, tcav_attribution, Aggregator, Attribution, AttributionKind, ConceptVector,
};
use faithkit::synthlab::{concept_samples, decode_hidden, generate_world, NoisyProbability, SynthForward, SYNTH_LAYERS};
use faithkit::trace::{ActivationTrace, Circuit, Granularity};
use faithkit::vecops::cosine;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

// independent fit straight from the 2x2 normal equations
fn normal_equations(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    ((sy * sxx - sx * sxy) / det, (n * sxy - sx * sy) / det)
}

proptest! {
    #[test]
    fn ols_matches_normal_equations(
        xs in prop::collection::vec(-1.0f64..1.0, 3..20),
        noise in prop::collection::vec(-1.0f64..1.0, 20),
        b0 in -2.0f64..2.0,
        b1 in -2.0f64..2.0,
    ) {
        prop_assume!(xs.iter().any(|x| (x - xs[0]).abs() > 1e-3));
        let pts: Vec<(f64, f64)> = xs.iter().zip(&noise).map(|(x, e)| (*x, b0 + b1 * x + 0.1 * e)).collect();
        let r = fit_linear(&pts).unwrap();
        let (c0, c1) = normal_equations(&pts);
        prop_assert!((r.beta0 - c0).abs() <= 1e-10);
        prop_assert!((r.beta1 - c1).abs() <= 1e-10);
        prop_assert!((0.0..=1.0).contains(&r.p_value));
    }

    #[test]
    fn faithfulness_is_the_positive_score_fraction(scores in prop::collection::vec(prop_oneof![Just(0.0), Just(-0.0), -1.0f64..1.0], 0..30)) {
        let attrs: Vec<Attribution> = scores.iter().enumerate().map(|(i, &s)| Attribution {
            concept_id: format!("c{i}"),
            kind: AttributionKind::Importance,
            score: s,
            significant: s > 0.0,
        }).collect();
        let hits = scores.iter().filter(|&&s| s > 0.0).count();
        match faithfulness_score(&attrs) {
            FaithScore::Score(v) => prop_assert_eq!(v, hits as f64 / scores.len() as f64),
            FaithScore::NoConcepts => prop_assert!(scores.is_empty()),
        }
    }
}

#[test]
fn constant_x_is_rejected() {
    assert!(fit_linear(&[(0.5, 0.1), (0.5, 0.2), (0.5, 0.3)]).is_err());
    assert!(fit_linear(&[(0.0, 0.1), (1.0, 0.2)]).is_err());
}

fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn cav_for(dir: &[f64], layers: impl Iterator<Item = usize>) -> BTreeMap<usize, ConceptVector> {
    layers
        .map(|l| {
            (
                l,
                ConceptVector {
                    concept_id: "c".into(),
                    layer: l,
                    vector: dir.to_vec(),
                    bias: 0.5,
                    n_pos: 1,
                    n_neg: 1,
                    probe_f1: None,
                },
            )
        })
        .collect()
}

#[test]
fn erasure_slope_is_analytic() {
    let d = 8;
    let circuit = Circuit::window(Granularity::ResidualStream, 2, 4, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let gain: f64 = rng.random_range(-0.4..0.4);
        let base: f64 = rng.random_range(0.45..0.55);
        let fwd = SynthForward::new(base, circuit.clone()).with_concept("c", gain, &unit(d, 3));
        let trace = ActivationTrace::zeros("m", Granularity::ResidualStream, vec!["t".into(); 3], 8, d).unwrap();
        let sweep = erasure_sweep(&fwd, &trace, &circuit, &cav_for(&unit(d, 3), 4..=7), &faithkit::mechinterp::default_lambda_grid()).unwrap();
        let r = fit_linear(&sweep).unwrap();
        assert!((r.beta1 + gain).abs() <= 1e-9, "{} vs {}", r.beta1, -gain);
    }
}

#[test]
fn noisy_oracle_is_deterministic() {
    let circuit = Circuit::window(Granularity::ResidualStream, 0, 0, 1).unwrap();
    let fwd = SynthForward::new(0.5, circuit.clone()).with_concept("c", 0.1, &unit(4, 0));
    let trace = ActivationTrace::zeros("m", Granularity::ResidualStream, vec!["t".into()], 2, 4).unwrap();
    let noisy = NoisyProbability { inner: fwd, sigma: 0.01, seed: 3 };
    let cavs = cav_for(&unit(4, 0), 0..=1);
    let grid = faithkit::mechinterp::default_lambda_grid();
    let a = erasure_sweep(&noisy, &trace, &circuit, &cavs, &grid).unwrap();
    let b = erasure_sweep(&noisy, &trace, &circuit, &cavs, &grid).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tcav_sign_follows_gain() {
    let circuit = Circuit::window(Granularity::ResidualStream, 0, 0, 2).unwrap();
    for gain in [-0.3, 0.2] {
        let fwd = SynthForward::new(0.5, circuit.clone()).with_concept("c", gain, &unit(4, 1));
        let cav = &cav_for(&unit(4, 1), 0..1)[&0];
        let s = tcav_attribution(cav, &fwd.gradients(), &circuit, Aggregator::Mean).unwrap();
        assert!((s - gain).abs() < 1e-12);
    }
}

#[test]
fn cav_recovers_planted_direction() {
    let world = generate_world(12, 2, 32, 4).unwrap();
    let dir = &world.directions[5];
    let (pos, neg) = concept_samples(dir, 200, 200, 0.1, 11).unwrap();
    let states: Vec<Vec<Vec<f64>>> = pos.into_iter().chain(neg).map(|v| vec![v]).collect();
    let labels: Vec<bool> = (0..400).map(|i| i < 200).collect();
    let cav = &fit_layer_cavs("c", &states, &labels, 1).unwrap()[0];
    assert!(cosine(&cav.vector, dir) >= 0.95);
    assert!(cav.probe_f1.unwrap() >= 0.99);
}

#[test]
fn planted_entity_decodes() {
    let world = generate_world(24, 4, 64, 0).unwrap();
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut hits = 0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = (seed as usize) % world.entities.len();
        let h: Vec<f64> = world.directions[e].iter().map(|x| x + noise.sample(&mut rng)).collect();
        if decode_hidden(&world, &h).unwrap().contains(&world.entities[e]) {
            hits += 1;
        }
    }
    assert!(hits >= 990, "{hits}/1000");
    assert!(SYNTH_LAYERS > 6);
}
