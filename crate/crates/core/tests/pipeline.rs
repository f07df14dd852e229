use faithkit::pipeline::{render_summary, run_pipeline, RunConfig, SummaryFormat};

fn cfg(extra: &str) -> RunConfig {
    RunConfig::from_json(extra).unwrap()
}

#[test]
fn synth_two_hop_all_stages() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(&format!(
        r#"{{"seed": 3, "synth_replicates": 4, "linprobe": true, "steer": true, "cas": true, "out_dir": {:?}}}"#,
        dir.path()
    ));
    let b = run_pipeline(&c).unwrap();
    let t = b.taxonomy_check.as_ref().unwrap();
    assert_eq!((t.matches, t.n), (96, 96), "{:?}", t.mismatched);
    let lp = b.linprobe.as_ref().unwrap();
    eprintln!("linprobe {:?} mv {}", lp.eligible_layers, lp.majority_vote_f1);
    let st = b.steering.as_ref().unwrap();
    eprintln!("steering {:?} n {}", st.conversion, st.n_pairs);
    eprintln!("cas {:?}", b.cas);
    for f in ["reports.jsonl", "summary.md", "taxonomy.json", "linprobe.json", "steering.json", "cas.json", "run_manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(!dir.path().join("FAILED").exists());
    eprintln!("{}", render_summary(&b, SummaryFormat::Table).unwrap());
}

#[test]
fn synth_classification_runs() {
    let b = run_pipeline(&cfg(r#"{"task": "classification", "seed": 1, "synth_records": 12}"#)).unwrap();
    assert_eq!(b.reports.len(), 12);
    eprintln!("{}", render_summary(&b, SummaryFormat::Csv).unwrap());
}
