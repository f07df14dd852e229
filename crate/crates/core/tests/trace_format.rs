use std::fs;

use faithkit::trace::{load_trace, save_trace, trace_paths, ActivationTrace, Granularity};
use faithkit::FaithError;
use proptest::prelude::*;

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |v| v.is_finite())
}

fn trace_strategy() -> impl Strategy<Value = ActivationTrace> {
    (1usize..6, 1usize..5, 1usize..9, prop::sample::select(vec![
        Granularity::ResidualStream,
        Granularity::MultiHeadAttention,
        Granularity::MultiLayerPerceptron,
    ]))
        .prop_flat_map(|(t, l, d, g)| {
            (
                prop::collection::vec("[a-zé▁ ]{0,6}", t),
                prop::collection::vec(finite_f32(), t * l * d),
                Just((l, d, g)),
            )
        })
        .prop_map(|(tokens, states, (l, d, g))| ActivationTrace::new("m/x-1", g, tokens, l, d, states).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn save_load_is_bit_exact(trace in trace_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t");
        save_trace(&trace, &p).unwrap();
        let back = load_trace(&p).unwrap();
        prop_assert!(back.bit_eq(&trace));
        prop_assert_eq!(back.tokens(), trace.tokens());
    }
}

fn small() -> ActivationTrace {
    ActivationTrace::new("m", Granularity::MultiLayerPerceptron, vec!["a".into(), "b".into()], 2, 3, (0..12).map(|i| i as f32 - 5.5).collect())
        .unwrap()
}

#[test]
fn truncated_blob_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t");
    save_trace(&small(), &p).unwrap();
    let (_, blob) = trace_paths(&p);
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_trace(&p), Err(FaithError::SizeMismatch(_))));
}

#[test]
fn nan_in_blob_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t");
    save_trace(&small(), &p).unwrap();
    let (_, blob) = trace_paths(&p);
    let mut bytes = fs::read(&blob).unwrap();
    bytes[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&blob, bytes).unwrap();
    assert!(matches!(load_trace(&p), Err(FaithError::NonFinite { index: 2 })));
}

#[test]
fn newer_format_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t");
    save_trace(&small(), &p).unwrap();
    let (manifest, _) = trace_paths(&p);
    let text = fs::read_to_string(&manifest).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
    fs::write(&manifest, text).unwrap();
    assert!(matches!(load_trace(&p), Err(FaithError::UnsupportedVersion { found: 99, .. })));
}

#[test]
fn unknown_granularity_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t");
    save_trace(&small(), &p).unwrap();
    let (manifest, _) = trace_paths(&p);
    let text = fs::read_to_string(&manifest).unwrap().replace("\"MLP\"", "\"CONV\"");
    fs::write(&manifest, text).unwrap();
    assert!(matches!(load_trace(&p), Err(FaithError::UnknownGranularity(_))));
}

// what the model adapter writes: a manifest next to a raw little-endian blob
#[test]
fn adapter_style_files_load() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = r#"{
  "format_version": 1,
  "model_id": "gpt2",
  "granularity": "RS",
  "n_tokens": 2,
  "n_layers": 1,
  "d_model": 2,
  "tokens": ["Hello", " world"],
  "dtype": "f32",
  "layout": "token-major",
  "blob": "rec-1.f32"
}"#;
    fs::write(dir.path().join("rec-1.manifest.json"), manifest).unwrap();
    let vals = [0.5f32, -1.0, 3.25, 1e-40];
    let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.path().join("rec-1.f32"), bytes).unwrap();
    let t = load_trace(&dir.path().join("rec-1")).unwrap();
    assert_eq!(t.model_id(), "gpt2");
    assert_eq!(t.state(1, 0).unwrap(), &[3.25, 1e-40]);
}
