//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints its own PASS/FAIL line; exits nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use faithkit::evalcas::{cas_records, compound_accuracy_score, CasRecord, Variant};
use faithkit::faithmetrics::{classify_taxonomy, faithfulness_score, Category, FaithScore, FaithfulnessReport};
use faithkit::linfaith::{faithfulness_vectors, majority_vote_f1, NleSequenceTrace};
use faithkit::mechinterp::{default_lambda_grid, erasure_sweep, fit_layer_cavs, fit_linear, Attribution, AttributionKind, ConceptVector};
use faithkit::pipeline::{synth_two_hop_corpus, RunConfig, TwoHopAuditor};
use faithkit::steering::{conversion_rate, steer_trace, steering_sweep, Auditor, SteerItem, SteeringPlan, Stratify, TokenScope};
use faithkit::synthlab::{
    concept_samples, flips_under_faith_steering, generate_world, polarized_samples, NoisyProbability, SynthDecoder,
    SynthExplainer, SynthForward, SynthVariantOracle, FAITH_MIN_LAYER,
};
use faithkit::concepts::DeterministicExtractor;
use faithkit::trace::{load_trace, save_trace, ActivationTrace, Circuit, Granularity, Task};
use faithkit::vecops::cosine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// pinned tolerances
const TAXONOMY_MAX_SECS: f64 = 5.0;
const CAV_MIN_COSINE: f64 = 0.95;
const CAV_MIN_F1: f64 = 0.99;
const CAV_MAX_SECS: f64 = 2.0;
const SLOPE_TOL: f64 = 1e-9;
const SLOPE_SIGMA: f64 = 0.01;
const SLOPE_ALPHA: f64 = 0.01;
const SLOPE_MIN_AGREEMENT: f64 = 0.95;
const OLS_TOL: f64 = 1e-10;
const DETECTION_MIN_F1: f64 = 0.99;
const CONFOUNDER_MIN_COSINE: f64 = 0.999;
const FLIP_MIN_RATE: f64 = 0.90;
const CAS_MAX_RANDOM_MEAN: f64 = 0.1;
const CAS_MAX_SECS: f64 = 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_faithkit")
}

fn smoke_config() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().expect("spawn faithkit")
}

fn taxonomy_oracle() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, r#"{"seed": 0, "synth_replicates": 1, "noise_sigma": 0.0}"#).unwrap();
    let t0 = Instant::now();
    let o = run_cli(&["run", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let secs = t0.elapsed().as_secs_f64();
    if !o.status.success() {
        return outcome(false, format!("run failed: {}", String::from_utf8_lossy(&o.stderr)));
    }
    let reports: BTreeMap<String, FaithfulnessReport> = fs::read_to_string(out.join("reports.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let r: FaithfulnessReport = serde_json::from_str(l).unwrap();
            (r.record_id.clone(), r)
        })
        .collect();
    let cfg = RunConfig::from_json(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    let (_, instances) = synth_two_hop_corpus(&cfg).unwrap();
    let matched = instances
        .iter()
        .filter(|i| reports.get(&i.record.id).and_then(|r| r.taxonomy) == Some(faithkit::synthlab::expected_category(&i.spec)))
        .count();
    outcome(
        matched == 24 && instances.len() == 24 && secs < TAXONOMY_MAX_SECS,
        format!("{matched}/{} scenarios match, {secs:.2}s", instances.len()),
    )
}

fn taxonomy_partition() -> Outcome {
    // membership rules written from the category definitions
    let rules: [(Category, fn(bool, bool, bool, bool) -> bool); 10] = [
        (Category::C1, |p, f, n, d| !p && !f && !n && !d),
        (Category::C2, |p, f, n, d| !p && !f && !n && d),
        (Category::C3, |p, f, n, _| !p && !f && n),
        (Category::C4, |p, f, n, _| !p && f && !n),
        (Category::C5, |p, f, n, _| !p && f && n),
        (Category::C6, |p, f, n, d| p && !f && !n && !d),
        (Category::C7, |p, f, n, d| p && !f && !n && d),
        (Category::C8, |p, f, n, _| p && !f && n),
        (Category::C9, |p, f, n, _| p && f && !n),
        (Category::C10, |p, f, n, _| p && f && n),
    ];
    let mut preimages: BTreeMap<Category, usize> = BTreeMap::new();
    let mut bad = 0;
    for bits in 0u8..16 {
        let (p, f, n, d) = (bits & 8 != 0, bits & 4 != 0, bits & 2 != 0, bits & 1 != 0);
        let got = classify_taxonomy(p, f, n, d);
        let holding: Vec<Category> = rules.iter().filter(|(_, r)| r(p, f, n, d)).map(|(c, _)| *c).collect();
        if holding != [got] {
            bad += 1;
        }
        *preimages.entry(got).or_default() += 1;
    }
    let total: usize = preimages.values().sum();
    outcome(
        bad == 0 && preimages.len() == 10 && total == 16,
        format!("16 tuples, {} categories hit, {bad} disagreements", preimages.len()),
    )
}

fn cav_recovery() -> Outcome {
    let t0 = Instant::now();
    let mut worst_cos = f64::INFINITY;
    let mut worst_f1 = f64::INFINITY;
    let mut passed = 0;
    for seed in 0..20u64 {
        let world = generate_world(16, 2, 64, seed).unwrap();
        let dir = &world.directions[(seed as usize) % 16];
        let (pos, neg) = concept_samples(dir, 200, 200, 0.1, 1000 + seed).unwrap();
        let states: Vec<Vec<Vec<f64>>> = pos.into_iter().chain(neg).map(|v| vec![v]).collect();
        let labels: Vec<bool> = (0..400).map(|i| i < 200).collect();
        let cav = fit_layer_cavs("c", &states, &labels, seed).unwrap().remove(0);
        let c = cosine(&cav.vector, dir);
        let f1 = cav.probe_f1.unwrap_or(0.0);
        worst_cos = worst_cos.min(c);
        worst_f1 = worst_f1.min(f1);
        if c >= CAV_MIN_COSINE && f1 >= CAV_MIN_F1 {
            passed += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        passed == 20 && secs < CAV_MAX_SECS,
        format!("{passed}/20 seeds, min cosine {worst_cos:.4}, min F1 {worst_f1:.4}, {secs:.2}s"),
    )
}

fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn slope_setup(gain: f64) -> (SynthForward, ActivationTrace, Circuit, BTreeMap<usize, ConceptVector>) {
    let d = 16;
    let circuit = Circuit::window(Granularity::ResidualStream, 3, 6, 9).unwrap();
    let fwd = SynthForward::new(0.5, circuit.clone()).with_concept("c", gain, &unit(d, 2));
    let trace = ActivationTrace::zeros("m", Granularity::ResidualStream, vec!["t".into(); 4], 12, d).unwrap();
    let cavs = (6..=9)
        .map(|l| {
            (
                l,
                ConceptVector {
                    concept_id: "c".into(),
                    layer: l,
                    vector: unit(d, 2),
                    bias: 0.5,
                    n_pos: 1,
                    n_neg: 1,
                    probe_f1: None,
                },
            )
        })
        .collect();
    (fwd, trace, circuit, cavs)
}

fn slope_recovery() -> Outcome {
    let grid = default_lambda_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let gain: f64 = rng.random_range(-0.4..0.4);
        let (fwd, trace, circuit, cavs) = slope_setup(gain);
        let r = fit_linear(&erasure_sweep(&fwd, &trace, &circuit, &cavs, &grid).unwrap()).unwrap();
        worst = worst.max((r.beta1 - (-gain)).abs());
    }
    let exact = worst <= SLOPE_TOL;

    let agreement = |gain: f64, expect_significant: bool| -> f64 {
        let (fwd, trace, circuit, cavs) = slope_setup(gain);
        let mut agree = 0;
        for seed in 0..100u64 {
            let noisy = NoisyProbability {
                inner: fwd.clone(),
                sigma: SLOPE_SIGMA,
                seed,
            };
            let r = fit_linear(&erasure_sweep(&noisy, &trace, &circuit, &cavs, &grid).unwrap()).unwrap();
            if (r.p_value <= SLOPE_ALPHA) == expect_significant {
                agree += 1;
            }
        }
        agree as f64 / 100.0
    };
    let cases = [(0.05, true), (-0.05, true), (0.1, true), (-0.2, true), (0.0, false)];
    let rates: Vec<(f64, f64)> = cases.iter().map(|&(g, s)| (g, agreement(g, s))).collect();
    let ok = rates.iter().all(|(_, r)| *r >= SLOPE_MIN_AGREEMENT);
    let shown: Vec<String> = rates.iter().map(|(g, r)| format!("slope {:+.2}: {:.0}%", 0.0 - g, r * 100.0)).collect();
    outcome(
        exact && ok,
        format!("max |db1| {worst:.1e}; agreement {}", shown.join(", ")),
    )
}

fn faithfulness_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let attrs: Vec<Attribution> = (0..n)
            .map(|i| {
                let score = match rng.random_range(0..4) {
                    0 => 0.0,
                    1 => -rng.random::<f64>(),
                    _ => rng.random::<f64>(),
                };
                Attribution {
                    concept_id: format!("c{i}"),
                    kind: AttributionKind::Importance,
                    score,
                    significant: score > 0.0,
                }
            })
            .collect();
        let mut count = 0;
        for a in &attrs {
            if a.score > 0.0 {
                count += 1;
            }
        }
        let brute = count as f64 / n as f64;
        if faithfulness_score(&attrs) != FaithScore::Score(brute) {
            bad += 1;
        }
    }
    let empty_ok = faithfulness_score(&[]) == FaithScore::NoConcepts;
    outcome(bad == 0 && empty_ok, format!("{} of 1000 lists exact", 1000 - bad))
}

fn ols_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(3..30);
        let b0: f64 = rng.random_range(-2.0..2.0);
        let b1: f64 = rng.random_range(-2.0..2.0);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                (x, b0 + b1 * x + rng.random_range(-0.2..0.2))
            })
            .collect();
        let nf = n as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let det = nf * sxx - sx * sx;
        let (c0, c1) = ((sy * sxx - sx * sxy) / det, (nf * sxy - sx * sy) / det);
        let r = fit_linear(&pts).unwrap();
        worst = worst.max((r.beta0 - c0).abs()).max((r.beta1 - c1).abs());
    }
    outcome(worst <= OLS_TOL, format!("max coefficient gap {worst:.1e} over 1000 sets"))
}

fn to_dataset(samples: &[faithkit::synthlab::PolarizedSample]) -> (Vec<NleSequenceTrace>, BTreeMap<String, String>) {
    let ds = samples
        .iter()
        .map(|s| NleSequenceTrace {
            record_id: s.record_id.clone(),
            trace: s.trace.clone(),
            label: s.faithful,
        })
        .collect();
    let classes = samples.iter().map(|s| (s.record_id.clone(), s.class.clone())).collect();
    (ds, classes)
}

fn linear_detection() -> Outcome {
    let world = generate_world(24, 2, 64, 3).unwrap();
    let f = world.faith_direction.clone().unwrap();
    let (train, _) = to_dataset(&polarized_samples(&f, 400, 4, 0.1, 21).unwrap());
    let (test, _) = to_dataset(&polarized_samples(&f, 400, 4, 0.1, 22).unwrap());
    let fvs = faithfulness_vectors("synth", &train, None, 0).unwrap();
    let f1 = majority_vote_f1(&fvs, &test, FAITH_MIN_LAYER).unwrap();

    // class-averaged vectors before and after a large per-class translation
    let samples = polarized_samples(&f, 400, 4, 0.1, 23).unwrap();
    let (plain, classes) = to_dataset(&samples);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let offsets: BTreeMap<String, Vec<f64>> = (0..4)
        .map(|c| (format!("class{c}"), (0..64).map(|_| rng.random_range(-3.0..3.0)).collect()))
        .collect();
    let shifted: Vec<NleSequenceTrace> = samples
        .iter()
        .map(|s| {
            let off = &offsets[&s.class];
            let last = s.trace.last_token();
            let trace = s
                .trace
                .with_edits((0..s.trace.n_layers()).map(|l| (last, l)), |_, h| {
                    for (x, o) in h.iter_mut().zip(off) {
                        *x = (f64::from(*x) + o) as f32;
                    }
                })
                .unwrap();
            NleSequenceTrace {
                record_id: s.record_id.clone(),
                trace,
                label: s.faithful,
            }
        })
        .collect();
    let a = faithfulness_vectors("synth", &plain, Some(&classes), 0).unwrap();
    let b = faithfulness_vectors("synth", &shifted, Some(&classes), 0).unwrap();
    let min_cos = (FAITH_MIN_LAYER..16)
        .map(|l| cosine(&a.vectors[&l], &b.vectors[&l]))
        .fold(f64::INFINITY, f64::min);
    outcome(
        f1 >= DETECTION_MIN_F1 && min_cos >= CONFOUNDER_MIN_COSINE,
        format!("majority-vote F1 {f1:.4}; min confounded cosine {min_cos:.6}"),
    )
}

fn random_trace(rng: &mut ChaCha8Rng, dyadic: bool) -> ActivationTrace {
    let (t, l, d) = (rng.random_range(1..5), rng.random_range(2..6), rng.random_range(1..9));
    let states = (0..t * l * d)
        .map(|_| {
            if dyadic {
                rng.random_range(-256i32..256) as f32 / 64.0
            } else {
                rng.random_range(-10.0f32..10.0)
            }
        })
        .collect();
    ActivationTrace::new("m", Granularity::ResidualStream, vec!["t".into(); t], l, d, states).unwrap()
}

fn plan_for(trace: &ActivationTrace, rng: &mut ChaCha8Rng, lambda: f64, dyadic: bool) -> SteeringPlan {
    let layers: BTreeSet<usize> = (0..trace.n_layers()).filter(|_| rng.random_bool(0.6)).chain([0]).collect();
    let vectors = layers
        .iter()
        .map(|&l| {
            let v = (0..trace.d_model())
                .map(|_| {
                    if dyadic {
                        rng.random_range(-32i32..32) as f64 / 16.0
                    } else {
                        rng.random_range(-2.0..2.0)
                    }
                })
                .collect();
            (l, v)
        })
        .collect();
    SteeringPlan::new(vectors, lambda, layers).unwrap()
}

fn steering_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut additive_bad = 0;
    let mut inverse_worst = 0.0f64;
    for _ in 0..200 {
        let t = random_trace(&mut rng, true);
        let p = plan_for(&t, &mut rng, 0.25, true);
        let scope = if rng.random_bool(0.5) { TokenScope::LastToken } else { TokenScope::AllTokens };
        let twice = steer_trace(&steer_trace(&t, &p, scope).unwrap(), &p.with_lambda(0.5), scope).unwrap();
        let once = steer_trace(&t, &p.with_lambda(0.75), scope).unwrap();
        if !twice.bit_eq(&once) {
            additive_bad += 1;
        }

        let t = random_trace(&mut rng, false);
        let lam = rng.random_range(-2.0..2.0);
        let p = plan_for(&t, &mut rng, lam, false);
        let back = steer_trace(&steer_trace(&t, &p, TokenScope::AllTokens).unwrap(), &p.with_lambda(-lam), TokenScope::AllTokens).unwrap();
        for (x, y) in t.states().iter().zip(back.states()) {
            // two f32 roundings of values bounded by |x| + |λv|
            let tol = 2.0 * f32::EPSILON as f64 * (x.abs() as f64 + 4.0 * lam.abs()).max(f32::MIN_POSITIVE as f64);
            inverse_worst = inverse_worst.max(((x - y).abs() as f64) / tol);
        }
    }

    // flip construction on the lab corpus (with state noise)
    let cfg = RunConfig::from_json(r#"{"seed": 1, "synth_replicates": 4, "noise_sigma": 0.05}"#).unwrap();
    let (world, instances) = synth_two_hop_corpus(&cfg).unwrap();
    let decoder = SynthDecoder { world: &world };
    let extractor = DeterministicExtractor { task: Task::TwoHop };
    let auditor = TwoHopAuditor {
        extractor: &extractor,
        decoder: &decoder,
    };
    let f = world.faith_direction.clone().unwrap();
    let layers: BTreeSet<usize> = (FAITH_MIN_LAYER..16).collect();
    let plan = SteeringPlan::new(layers.iter().map(|&l| (l, f.clone())).collect(), 1.0, layers.clone()).unwrap();
    let flippers: Vec<SteerItem> = instances
        .iter()
        .filter(|i| flips_under_faith_steering(&i.spec))
        .map(|i| SteerItem {
            record: i.record.clone(),
            trace: i.trace.clone(),
            circuit: i.circuit().unwrap(),
        })
        .collect();
    let explainer = SynthExplainer { world: &world };
    let sweep = steering_sweep(&flippers, &plan, &layers, TokenScope::LastToken, &explainer, &auditor).unwrap();
    let flip_rate = conversion_rate(&sweep.pairs, Stratify::All).unwrap().get("all").copied().unwrap_or(0.0);
    let all: Vec<SteerItem> = instances
        .iter()
        .map(|i| SteerItem {
            record: i.record.clone(),
            trace: i.trace.clone(),
            circuit: i.circuit().unwrap(),
        })
        .collect();
    let zero = steering_sweep(&all, &plan.with_lambda(0.0), &layers, TokenScope::LastToken, &explainer, &auditor).unwrap();
    let zero_rate = conversion_rate(&zero.pairs, Stratify::All).unwrap().get("all").copied().unwrap_or(0.0);
    let unchanged = zero.pairs.iter().all(|(b, a)| b == a);
    outcome(
        additive_bad == 0 && inverse_worst <= 1.0 && flip_rate >= FLIP_MIN_RATE && zero_rate == 0.0 && unchanged,
        format!(
            "additivity {}/200 bit-exact on dyadic grids; inverse error {inverse_worst:.2} of bound; flips {:.1}% of {}; lambda=0 converts {:.1}%",
            200 - additive_bad,
            flip_rate * 100.0,
            sweep.pairs.len(),
            zero_rate * 100.0
        ),
    )
}

fn cas_sanity() -> Outcome {
    let t0 = Instant::now();
    let cfg = RunConfig::from_json(r#"{"seed": 2, "synth_replicates": 20}"#).unwrap();
    let (world, instances) = synth_two_hop_corpus(&cfg).unwrap();
    let decoder = SynthDecoder { world: &world };
    let extractor = DeterministicExtractor { task: Task::TwoHop };
    let auditor = TwoHopAuditor {
        extractor: &extractor,
        decoder: &decoder,
    };
    let reports: Vec<FaithfulnessReport> = instances
        .iter()
        .map(|i| auditor.audit(&i.record, &i.trace, &i.circuit().unwrap()).unwrap())
        .collect();
    let oracle = SynthVariantOracle {
        specs: instances.iter().map(|i| (i.record.id.clone(), i.spec)).collect(),
    };
    let records = instances.iter().map(|i| (i.record.id.clone(), i.record.clone())).collect();
    let base = cas_records(&reports, &records, &oracle).unwrap();
    let h1 = compound_accuracy_score(&base, Variant::Hint1, true).unwrap().cas;
    let h2 = compound_accuracy_score(&base, Variant::Hint2, true).unwrap().cas;

    let mut sums = [0.0f64; 2];
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shuffled: Vec<CasRecord> = base
            .iter()
            .map(|r| CasRecord {
                faithful: rng.random_bool(0.5),
                ..r.clone()
            })
            .collect();
        for (k, v) in [Variant::Hint1, Variant::Hint2].into_iter().enumerate() {
            sums[k] += compound_accuracy_score(&shuffled, v, true).unwrap().cas;
        }
    }
    let means = [sums[0] / 100.0, sums[1] / 100.0];
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        h1 > 0.0 && h2 > 0.0 && means.iter().all(|m| m.abs() <= CAS_MAX_RANDOM_MEAN) && secs < CAS_MAX_SECS,
        format!(
            "CAS hint1 {h1:.3}, hint2 {h2:.3}; randomized means {:+.3}, {:+.3}; {secs:.2}s",
            means[0], means[1]
        ),
    )
}

fn format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ok = 0;
    for i in 0..100 {
        let (t, l, d) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..17));
        let states: Vec<f32> = (0..t * l * d)
            .map(|_| loop {
                let v = f32::from_bits(rng.random());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let g = [Granularity::ResidualStream, Granularity::MultiHeadAttention, Granularity::MultiLayerPerceptron][i % 3];
        let tokens = (0..t).map(|k| format!("tok{k}▁é")).collect();
        let trace = ActivationTrace::new(format!("model-{i}"), g, tokens, l, d, states).unwrap();
        let p = dir.path().join(format!("t{i}"));
        save_trace(&trace, &p).unwrap();
        let back = load_trace(&p).unwrap();
        if back.bit_eq(&trace) && back.tokens() == trace.tokens() && back.model_id() == trace.model_id() {
            ok += 1;
        }
    }
    outcome(ok == 100, format!("{ok}/100 traces bit-exact"))
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let mut trees = vec![];
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let o = run_cli(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        if !o.status.success() {
            return outcome(false, format!("run failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        trees.push(read_tree(&out));
    }
    let same = trees[0] == trees[1];
    outcome(
        same && trees[0].contains_key("reports.jsonl"),
        format!("{} output files, identical: {same}", trees[0].len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("taxonomy oracle equivalence", taxonomy_oracle),
        ("taxonomy partition", taxonomy_partition),
        ("CAV recovery", cav_recovery),
        ("slope recovery", slope_recovery),
        ("faithfulness formula", faithfulness_formula),
        ("OLS oracle equivalence", ols_oracle),
        ("linear detection", linear_detection),
        ("steering properties", steering_properties),
        ("CAS sanity", cas_sanity),
        ("format round-trip", format_round_trip),
        ("determinism", determinism),
    ];
    let t0 = Instant::now();
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let total = t0.elapsed();
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        total.as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
