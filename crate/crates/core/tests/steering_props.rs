use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use faithkit::steering::{steer_trace, SteeringPlan, TokenScope};
use faithkit::trace::{ActivationTrace, Granularity};

fn trace_and_plan() -> impl Strategy<Value = (ActivationTrace, BTreeMap<usize, Vec<f64>>)> {
    (1usize..4, 1usize..5, 1usize..6).prop_flat_map(|(t, l, d)| {
        (
            prop::collection::vec(-50.0f32..50.0, t * l * d),
            prop::collection::btree_map(0..l, prop::collection::vec(-3.0f64..3.0, d), 1..=l),
        )
            .prop_map(move |(states, vectors)| {
                let tr = ActivationTrace::new("m", Granularity::ResidualStream, vec!["x".into(); t], l, d, states).unwrap();
                (tr, vectors)
            })
    })
}

fn plan(vectors: &BTreeMap<usize, Vec<f64>>, lambda: f64) -> SteeringPlan {
    let layers: BTreeSet<usize> = vectors.keys().copied().collect();
    SteeringPlan::new(vectors.clone(), lambda, layers).unwrap()
}

proptest! {
    #[test]
    fn zero_lambda_is_identity((tr, v) in trace_and_plan()) {
        for scope in [TokenScope::LastToken, TokenScope::AllTokens] {
            prop_assert!(steer_trace(&tr, &plan(&v, 0.0), scope).unwrap().bit_eq(&tr));
        }
    }

    // each step rounds to f32 once; the intermediate is bounded by |h| + 3|a|
    #[test]
    fn additivity_within_rounding((tr, v) in trace_and_plan(), a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let p = plan(&v, a);
        let twice = steer_trace(&steer_trace(&tr, &p, TokenScope::AllTokens).unwrap(), &p.with_lambda(b), TokenScope::AllTokens).unwrap();
        let once = steer_trace(&tr, &p.with_lambda(a + b), TokenScope::AllTokens).unwrap();
        for ((x, y), h) in twice.states().iter().zip(once.states()).zip(tr.states()) {
            let bound = 2.0 * f32::EPSILON * (h.abs() + 6.0);
            prop_assert!((x - y).abs() <= bound, "{} vs {}", x, y);
        }
    }

    #[test]
    fn last_token_scope_leaves_earlier_tokens((tr, v) in trace_and_plan(), lam in -2.0f64..2.0) {
        let out = steer_trace(&tr, &plan(&v, lam), TokenScope::LastToken).unwrap();
        for t in 0..tr.n_tokens() - 1 {
            for l in 0..tr.n_layers() {
                prop_assert_eq!(tr.state(t, l).unwrap(), out.state(t, l).unwrap());
            }
        }
    }
}

#[test]
fn mismatched_width_is_rejected() {
    let tr = ActivationTrace::zeros("m", Granularity::ResidualStream, vec!["x".into(); 2], 3, 4).unwrap();
    let p = plan(&BTreeMap::from([(1, vec![1.0; 5])]), 1.0);
    assert!(steer_trace(&tr, &p, TokenScope::LastToken).is_err());
}
