//! End-to-end audit runs driven by a flat JSON config, with a run manifest
//! and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::concepts::{ClassificationDataset, ConceptExtractor, ConceptSet, DeterministicExtractor, HttpJudge, JudgeExtractor, PrefilledExtractor};
use crate::error::{FaithError, Result};
use crate::evalcas::{cas_records, compound_accuracy_score, render_cas_table, CasResult, Variant};
use crate::faithmetrics::{
    render_summary_table, render_taxonomy_tables, summarize, taxonomy_histogram, two_hop_report, FaithfulnessReport,
};
use crate::linfaith::{
    build_polarized_dataset, faithfulness_vectors, majority_vote_f1, similarity_report, FaithVectorSet, SimilarityReport,
    SimilarityRow,
};
use crate::mechinterp::{
    decode_circuit, erasure_sweep, fit_layer_cavs, fit_linear, importance_attribution, select_layers, ConceptVector,
    HiddenStateDecoder, ProbabilityOracle,
};
use crate::steering::{
    conversion_rate, steering_sweep, transition_csv, transition_matrix, Auditor, SteerItem, SteeringPlan, Stratify,
    TokenScope,
};
use crate::store;
use crate::synthlab::{
    classification_instance, concept_samples, generate_instance, generate_world, ClassificationSpec, NoisyProbability,
    ScenarioSpec, SynthDecoder, SynthExplainer, SynthInstance, SynthVariantOracle, SynthWorld, FAITH_MIN_LAYER,
    SYNTH_LAYERS,
};
use crate::text;
use crate::trace::{load_records, load_trace, ActivationTrace, Circuit, Coord, ExplanationRecord, Granularity, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Synth,
    Files,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    #[default]
    Deterministic,
    Judge,
    Prefilled,
}

fn d_model_id() -> String {
    crate::synthlab::SYNTH_MODEL_ID.to_string()
}
fn d_layer_lo() -> usize {
    5
}
fn d_layer_hi() -> usize {
    11
}
fn d_lambdas() -> Vec<f64> {
    crate::mechinterp::default_lambda_grid()
}
fn d_alpha() -> f64 {
    crate::mechinterp::DEFAULT_ALPHA
}
fn d_threshold() -> f64 {
    crate::mechinterp::DEFAULT_LAYER_THRESHOLD
}
fn d_min_vote() -> usize {
    crate::linfaith::DEFAULT_MIN_LAYER
}
fn d_perms() -> usize {
    crate::linfaith::DEFAULT_PERMUTATIONS
}
fn d_one() -> usize {
    1
}
fn d_entities() -> usize {
    24
}
fn d_relations() -> usize {
    4
}
fn d_dim() -> usize {
    64
}
fn d_oracle_sigma() -> f64 {
    0.01
}
fn d_records() -> usize {
    24
}
fn d_true() -> bool {
    true
}
fn d_lambda() -> f64 {
    1.0
}

/// Flat run configuration. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default = "d_model_id")]
    pub model_id: String,
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub seed: u64,
    /// worker threads, 0 for one per core
    #[serde(default)]
    pub jobs: usize,
    #[serde(default)]
    pub extractor: ExtractorKind,
    #[serde(default)]
    pub dataset: ClassificationDataset,
    /// circuit token; None selects the last token of `o1`
    #[serde(default)]
    pub circuit_token: Option<usize>,
    #[serde(default = "d_layer_lo")]
    pub layer_lo: usize,
    #[serde(default = "d_layer_hi")]
    pub layer_hi: usize,
    #[serde(default = "d_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_threshold")]
    pub probe_threshold: f64,
    #[serde(default = "d_min_vote")]
    pub min_vote_layer: usize,
    #[serde(default = "d_perms")]
    pub n_perms: usize,
    #[serde(default = "d_one")]
    pub synth_replicates: usize,
    #[serde(default = "d_entities")]
    pub synth_entities: usize,
    #[serde(default = "d_relations")]
    pub synth_relations: usize,
    #[serde(default = "d_dim")]
    pub synth_d_model: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "d_oracle_sigma")]
    pub oracle_sigma: f64,
    #[serde(default = "d_records")]
    pub synth_records: usize,
    #[serde(default)]
    pub records: Option<PathBuf>,
    /// directory of `<record_id>.manifest.json` traces
    #[serde(default)]
    pub traces: Option<PathBuf>,
    /// JSONL of decoded circuit states
    #[serde(default)]
    pub decoded: Option<PathBuf>,
    /// imported vector stores compared against the faithfulness vectors
    #[serde(default)]
    pub vectors: Vec<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "d_true")]
    pub taxonomy: bool,
    #[serde(default)]
    pub linprobe: bool,
    #[serde(default)]
    pub steer: bool,
    #[serde(default)]
    pub cas: bool,
    #[serde(default = "d_lambda")]
    pub steer_lambda: f64,
}

fn default_task() -> Task {
    Task::TwoHop
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

fn bad(path: &str, msg: impl std::fmt::Display) -> FaithError {
    FaithError::invalid(format!("config.{path}: {msg}"))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| FaithError::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FaithError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(bad("lambdas", "empty grid"));
        }
        for (i, &l) in self.lambdas.iter().enumerate() {
            if !(0.0..=1.0).contains(&l) {
                return Err(bad(&format!("lambdas[{i}]"), format!("{l} outside [0, 1]")));
            }
        }
        let distinct: BTreeSet<u64> = self.lambdas.iter().map(|l| l.to_bits()).collect();
        if self.task == Task::Classification && (self.lambdas.len() < 3 || distinct.len() < 2) {
            return Err(bad("lambdas", "regression needs at least 3 points and 2 distinct values"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(bad("alpha", format!("{} outside (0, 1)", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.probe_threshold) {
            return Err(bad("probe_threshold", format!("{} outside [0, 1]", self.probe_threshold)));
        }
        if self.layer_lo > self.layer_hi {
            return Err(bad("layer_lo", format!("{} > layer_hi {}", self.layer_lo, self.layer_hi)));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(bad("noise_sigma", "must be finite and >= 0"));
        }
        if !self.oracle_sigma.is_finite() || self.oracle_sigma < 0.0 {
            return Err(bad("oracle_sigma", "must be finite and >= 0"));
        }
        if !self.steer_lambda.is_finite() {
            return Err(bad("steer_lambda", "must be finite"));
        }
        if self.linprobe && !self.vectors.is_empty() && self.n_perms < crate::linfaith::MIN_PERMUTATIONS {
            return Err(bad("n_perms", format!("must be >= {}", crate::linfaith::MIN_PERMUTATIONS)));
        }
        if self.source == Source::Synth {
            if self.layer_hi >= SYNTH_LAYERS {
                return Err(bad("layer_hi", format!("synthetic traces have {SYNTH_LAYERS} layers")));
            }
            if self.synth_replicates == 0 {
                return Err(bad("synth_replicates", "must be positive"));
            }
        }
        let mut paths: Vec<(String, &PathBuf)> = vec![];
        for (name, p) in [("records", &self.records), ("traces", &self.traces), ("decoded", &self.decoded)] {
            if let Some(p) = p {
                paths.push((name.to_string(), p));
            }
        }
        for (i, p) in self.vectors.iter().enumerate() {
            paths.push((format!("vectors[{i}]"), p));
        }
        for (name, p) in paths {
            if !p.exists() {
                return Err(bad(&name, format!("path {} does not exist", p.display())));
            }
        }
        if self.source == Source::Files {
            for (name, p) in [("records", &self.records), ("traces", &self.traces), ("decoded", &self.decoded)] {
                if p.is_none() {
                    return Err(bad(name, "required when source is files"));
                }
            }
            if self.task == Task::Classification {
                return Err(bad("source", "file-based runs support the two_hop task only"));
            }
            if self.steer || self.cas {
                return Err(bad("source", "steer and cas stages need the synthetic lab"));
            }
        }
        if self.task == Task::Classification && (self.linprobe || self.steer || self.cas) {
            return Err(bad("task", "linprobe, steer and cas stages apply to two_hop runs"));
        }
        if self.steer && !self.linprobe {
            return Err(bad("steer", "needs the linprobe stage for its vectors"));
        }
        Ok(())
    }

    /// Hash of the settings that determine results; `out_dir` is left out
    /// so the same run written to two places hashes the same.
    pub fn sha256(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(&self.portable()).expect("config serializes")))
    }

    fn portable(&self) -> RunConfig {
        RunConfig {
            out_dir: None,
            ..self.clone()
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Extraction, decoding and scoring of one 2-hop record.
pub struct TwoHopAuditor<'a> {
    pub extractor: &'a dyn ConceptExtractor,
    pub decoder: &'a dyn HiddenStateDecoder,
}

impl Auditor for TwoHopAuditor<'_> {
    fn audit(&self, record: &ExplanationRecord, trace: &ActivationTrace, circuit: &Circuit) -> Result<FaithfulnessReport> {
        let concepts = self.extractor.extract(record)?;
        let decoded = decode_circuit(trace, circuit, self.decoder)?;
        two_hop_report(record, concepts.first().map(String::as_str), &decoded, circuit)
    }
}

/// Decoded strings read from file, looked up by record.
pub struct PrecomputedDecodes {
    pub by_record: BTreeMap<String, BTreeMap<Coord, Vec<String>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedLine {
    pub record_id: String,
    pub token: usize,
    pub layer: usize,
    pub strings: Vec<String>,
}

impl PrecomputedDecodes {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FaithError::io(path, e))?;
        let mut by_record: BTreeMap<String, BTreeMap<Coord, Vec<String>>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let d: DecodedLine = serde_json::from_str(line).map_err(|e| FaithError::Schema {
                line: i + 1,
                message: e.to_string(),
            })?;
            by_record
                .entry(d.record_id)
                .or_default()
                .entry((d.token, d.layer))
                .or_default()
                .extend(d.strings);
        }
        Ok(PrecomputedDecodes { by_record })
    }
}

/// Index of the last token of `o1` in the trace's tokens, matched on the
/// first occurrence of its word sequence.
pub fn last_o1_token(tokens: &[String], o1: &str) -> Option<usize> {
    let want: Vec<String> = o1.split_whitespace().map(text::normalize).collect();
    if want.is_empty() {
        return None;
    }
    let have: Vec<String> = tokens.iter().map(|t| text::normalize(t.trim_start_matches('▁'))).collect();
    (0..have.len().saturating_sub(want.len() - 1))
        .find(|&i| have[i..i + want.len()] == want[..])
        .map(|i| i + want.len() - 1)
}

/// The set of synthetic 2-hop instances a config describes: every scenario
/// `synth_replicates` times.
pub fn synth_two_hop_corpus(cfg: &RunConfig) -> Result<(SynthWorld, Vec<SynthInstance>)> {
    let world = generate_world(cfg.synth_entities, cfg.synth_relations, cfg.synth_d_model, cfg.seed)?;
    let token = cfg.circuit_token.unwrap_or(crate::synthlab::default_window().0);
    let mut specs = vec![];
    for rep in 0..cfg.synth_replicates {
        for mut s in ScenarioSpec::all(cfg.noise_sigma) {
            s.circuit_window = (token, cfg.layer_lo, cfg.layer_hi);
            specs.push((rep, s));
        }
    }
    let instances = specs
        .par_iter()
        .enumerate()
        .map(|(i, (_, s))| generate_instance(&world, s, cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok((world, instances))
}

fn make_extractor<'j>(
    cfg: &RunConfig,
    judge: Option<&'j HttpJudge>,
    concept_set: Option<ConceptSet>,
) -> Result<Box<dyn ConceptExtractor + 'j>> {
    Ok(match cfg.extractor {
        ExtractorKind::Deterministic => Box::new(DeterministicExtractor { task: cfg.task }),
        ExtractorKind::Prefilled => Box::new(PrefilledExtractor),
        ExtractorKind::Judge => Box::new(JudgeExtractor {
            judge: judge.ok_or_else(|| FaithError::Precondition("judge extractor needs a judge client".into()))?,
            task: cfg.task,
            concept_set,
            dataset: cfg.dataset,
        }),
    })
}

/// Owns the output directory and remembers a digest of every file.
struct OutDir {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl OutDir {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| FaithError::io(root, e))?;
        let failed = root.join("FAILED");
        if failed.exists() {
            fs::remove_file(&failed).map_err(|e| FaithError::io(&failed, e))?;
        }
        Ok(OutDir {
            root: root.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| FaithError::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| FaithError::io(&path, e))?;
        self.written.insert(name.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, values: &[T]) -> Result<()> {
        let mut s = String::new();
        for v in values {
            s.push_str(&serde_json::to_string(v)?);
            s.push('\n');
        }
        self.write(name, s.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyCheck {
    pub n: usize,
    pub matches: usize,
    pub mismatched: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinprobeSummary {
    pub n_records: usize,
    pub n_faithful: usize,
    pub f1_by_layer: BTreeMap<usize, f64>,
    pub eligible_layers: BTreeSet<usize>,
    pub majority_vote_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub similarity: Option<SimilarityReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringSummary {
    pub lambda: f64,
    pub layers: BTreeSet<usize>,
    pub n_pairs: usize,
    pub skipped: Vec<(String, String)>,
    pub conversion: BTreeMap<String, f64>,
}

/// Everything a run produced, in memory.
#[derive(Debug, Clone, Default)]
pub struct ReportBundle {
    pub model_id: String,
    pub reports: Vec<FaithfulnessReport>,
    pub taxonomy_check: Option<TaxonomyCheck>,
    pub linprobe: Option<LinprobeSummary>,
    pub steering: Option<SteeringSummary>,
    pub cas: Vec<CasResult>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryFormat {
    #[default]
    Table,
    Json,
    Csv,
}

impl std::str::FromStr for SummaryFormat {
    type Err = FaithError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "table" => Ok(SummaryFormat::Table),
            "json" => Ok(SummaryFormat::Json),
            "csv" => Ok(SummaryFormat::Csv),
            _ => Err(FaithError::invalid(format!("unknown format {s:?}"))),
        }
    }
}

fn rate(x: Option<f64>) -> serde_json::Value {
    x.map_or(serde_json::Value::Null, |v| serde_json::json!(v))
}

/// Accuracy-stratified rates and category histograms.
pub fn render_summary(bundle: &ReportBundle, format: SummaryFormat) -> Result<String> {
    if bundle.reports.is_empty() {
        return Err(FaithError::Missing("report bundle has no reports".into()));
    }
    let row = summarize(&bundle.reports);
    let has_taxonomy = bundle.reports.iter().any(|r| r.taxonomy.is_some());
    let hist = taxonomy_histogram(&bundle.reports);
    Ok(match format {
        SummaryFormat::Table => {
            let mut out = render_summary_table(&bundle.model_id, &row);
            if has_taxonomy {
                out.push('\n');
                out.push_str(&render_taxonomy_tables(&bundle.model_id, &hist));
            }
            out
        }
        SummaryFormat::Json => {
            let strat = |s: &crate::faithmetrics::Stratified| {
                let (a, i) = s.rates();
                serde_json::json!({"accurate": rate(a), "inaccurate": rate(i)})
            };
            let mut v = serde_json::json!({
                "model_id": bundle.model_id,
                "n": row.n,
                "task_accuracy": rate((row.n > 0).then(|| row.n_correct as f64 / row.n as f64)),
                "self_nle_correct": strat(&row.self_nle_correct),
                "latent_hop1_correct": strat(&row.latent_hop1_correct),
                "faithful": strat(&row.faithful),
            });
            if has_taxonomy {
                let h: BTreeMap<String, usize> = hist.iter().map(|(c, n)| (c.to_string(), *n)).collect();
                v["taxonomy"] = serde_json::to_value(h)?;
            }
            let mut s = serde_json::to_string_pretty(&v)?;
            s.push('\n');
            s
        }
        SummaryFormat::Csv => {
            let mut out = String::from("model,measure,accurate,inaccurate\n");
            let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
            for (name, s) in [
                ("self_nle_correct", &row.self_nle_correct),
                ("latent_hop1_correct", &row.latent_hop1_correct),
                ("faithful", &row.faithful),
            ] {
                let (a, i) = s.rates();
                let _ = writeln!(out, "{},{name},{},{}", bundle.model_id, f(a), f(i));
            }
            if has_taxonomy {
                out.push_str("model,category,count\n");
                for (c, n) in &hist {
                    let _ = writeln!(out, "{},{c},{n}", bundle.model_id);
                }
            }
            out
        }
    })
}

#[derive(Serialize)]
struct RunManifest<'a> {
    faithkit_version: &'static str,
    config_sha256: String,
    seed: u64,
    config: RunConfig,
    outputs: &'a BTreeMap<String, String>,
}

/// Runs every enabled stage. On failure a `FAILED` marker holding the error
/// is left next to whatever was already written.
pub fn run_pipeline(cfg: &RunConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let mut out = match &cfg.out_dir {
        Some(d) => Some(OutDir::new(d)?),
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| FaithError::invalid(format!("thread pool: {e}")))?;
    let result = pool.install(|| run_stages(cfg, out.as_mut()));
    match (&result, out.as_mut()) {
        (Err(e), Some(o)) => {
            let _ = fs::write(o.root.join("FAILED"), format!("{e}\n"));
        }
        (Ok(_), Some(o)) => {
            let outputs = o.written.clone();
            o.json(
                "run_manifest.json",
                &RunManifest {
                    faithkit_version: env!("CARGO_PKG_VERSION"),
                    config_sha256: cfg.sha256(),
                    seed: cfg.seed,
                    config: cfg.portable(),
                    outputs: &outputs,
                },
            )?;
        }
        _ => {}
    }
    result.map(|mut b| {
        b.out_dir = cfg.out_dir.clone();
        b
    })
}

fn run_stages(cfg: &RunConfig, mut out: Option<&mut OutDir>) -> Result<ReportBundle> {
    let judge = match cfg.extractor {
        ExtractorKind::Judge => Some(HttpJudge::from_env()?),
        _ => None,
    };
    let mut bundle = ReportBundle {
        model_id: cfg.model_id.clone(),
        ..Default::default()
    };
    match (cfg.task, cfg.source) {
        (Task::Classification, _) => {
            bundle.reports = run_classification(cfg, judge.as_ref())?;
            if let Some(o) = out.as_deref_mut() {
                o.jsonl("reports.jsonl", &bundle.reports)?;
            }
        }
        (Task::TwoHop, Source::Files) => {
            let records = load_records(cfg.records.as_ref().unwrap(), Task::TwoHop)?;
            let decodes = PrecomputedDecodes::load(cfg.decoded.as_ref().unwrap())?;
            let extractor = make_extractor(cfg, judge.as_ref(), None)?;
            let traces_dir = cfg.traces.as_ref().unwrap();
            let audited: Vec<(FaithfulnessReport, ActivationTrace)> = records
                .par_iter()
                .map(|r| {
                    let trace = load_trace(&traces_dir.join(&r.id))?;
                    let circuit = file_circuit(cfg, r, &trace)?;
                    let decoded = decodes
                        .by_record
                        .get(&r.id)
                        .ok_or_else(|| FaithError::Missing(format!("no decoded states for record {}", r.id)))?;
                    let concepts = extractor.extract(r)?;
                    Ok((two_hop_report(r, concepts.first().map(String::as_str), decoded, &circuit)?, trace))
                })
                .collect::<Result<_>>()?;
            let traces: BTreeMap<String, ActivationTrace> =
                audited.iter().map(|(r, t)| (r.record_id.clone(), t.clone())).collect();
            bundle.reports = audited.into_iter().map(|(r, _)| r).collect();
            if let Some(o) = out.as_deref_mut() {
                o.jsonl("reports.jsonl", &bundle.reports)?;
            }
            if cfg.linprobe {
                let (summary, fvs) = linprobe_stage(cfg, &bundle.reports, &traces)?;
                if let Some(o) = out.as_deref_mut() {
                    store::save_faith_vectors(&o.root.join("vectors"), &fvs)?;
                    o.json("linprobe.json", &summary)?;
                }
                bundle.linprobe = Some(summary);
            }
        }
        (Task::TwoHop, Source::Synth) => run_synth_two_hop(cfg, judge.as_ref(), &mut bundle, out.as_deref_mut())?,
    }
    if let Some(o) = out {
        if cfg.taxonomy && cfg.task == Task::TwoHop {
            let hist = taxonomy_histogram(&bundle.reports);
            let h: BTreeMap<String, usize> = hist.iter().map(|(c, n)| (c.to_string(), *n)).collect();
            o.json("taxonomy.json", &h)?;
            o.write("taxonomy.md", render_taxonomy_tables(&cfg.model_id, &hist).as_bytes())?;
        }
        o.write("summary.md", render_summary(&bundle, SummaryFormat::Table)?.as_bytes())?;
        o.write("summary.json", render_summary(&bundle, SummaryFormat::Json)?.as_bytes())?;
    }
    Ok(bundle)
}

fn file_circuit(cfg: &RunConfig, r: &ExplanationRecord, trace: &ActivationTrace) -> Result<Circuit> {
    let token = match cfg.circuit_token {
        Some(t) => t,
        None => {
            let o1 = r
                .gold
                .as_ref()
                .and_then(|g| g.o1.as_deref())
                .ok_or_else(|| FaithError::Missing(format!("record {} has no gold o1", r.id)))?;
            last_o1_token(trace.tokens(), o1)
                .ok_or_else(|| FaithError::Missing(format!("o1 {o1:?} not found in tokens of record {}", r.id)))?
        }
    };
    Circuit::window(trace.granularity(), token, cfg.layer_lo, cfg.layer_hi)
}

fn linprobe_stage(
    cfg: &RunConfig,
    reports: &[FaithfulnessReport],
    traces: &BTreeMap<String, ActivationTrace>,
) -> Result<(LinprobeSummary, FaithVectorSet)> {
    let dataset = build_polarized_dataset(reports, traces)?;
    let fvs = faithfulness_vectors(cfg.task.to_string().as_str(), &dataset, None, cfg.seed)?;
    let eligible = fvs.eligible_layers(cfg.probe_threshold);
    let mv = majority_vote_f1(&fvs, &dataset, cfg.min_vote_layer)?;
    let similarity = if cfg.vectors.is_empty() {
        None
    } else {
        let cols = cfg
            .vectors
            .iter()
            .map(|p| store::load_layer_vectors(p).map(|s| (s.name, s.vectors)))
            .collect::<Result<Vec<_>>>()?;
        let rows = [SimilarityRow {
            fvs: &fvs,
            dataset: &dataset,
            class_labels: None,
        }];
        Some(similarity_report(&rows, &cols, cfg.probe_threshold, cfg.n_perms, cfg.seed)?)
    };
    Ok((
        LinprobeSummary {
            n_records: dataset.len(),
            n_faithful: dataset.iter().filter(|s| s.label).count(),
            f1_by_layer: fvs.f1_by_layer.clone(),
            eligible_layers: eligible,
            majority_vote_f1: mv,
            similarity,
        },
        fvs,
    ))
}

/// Steering plan over the eligible layers at or beyond the vote threshold.
pub fn faith_plan(fvs: &FaithVectorSet, threshold: f64, min_layer: usize, lambda: f64) -> Result<(SteeringPlan, BTreeSet<usize>)> {
    let eligible = fvs.eligible_layers(threshold);
    let layers: BTreeSet<usize> = eligible.iter().copied().filter(|&l| l >= min_layer).collect();
    if layers.is_empty() {
        return Err(FaithError::Precondition(format!(
            "no faithfulness probe layer >= {min_layer} has F1 above {threshold}"
        )));
    }
    let vectors = layers.iter().map(|l| (*l, fvs.vectors[l].clone())).collect();
    Ok((SteeringPlan::new(vectors, lambda, layers)?, eligible))
}

fn run_synth_two_hop(
    cfg: &RunConfig,
    judge: Option<&HttpJudge>,
    bundle: &mut ReportBundle,
    mut out: Option<&mut OutDir>,
) -> Result<()> {
    let (world, instances) = synth_two_hop_corpus(cfg)?;
    let extractor = make_extractor(cfg, judge, None)?;
    let decoder = SynthDecoder { world: &world };
    let auditor = TwoHopAuditor {
        extractor: extractor.as_ref(),
        decoder: &decoder,
    };
    let items: Vec<SteerItem> = instances
        .iter()
        .map(|i| {
            Ok(SteerItem {
                record: i.record.clone(),
                trace: i.trace.clone(),
                circuit: i.circuit()?,
            })
        })
        .collect::<Result<_>>()?;
    bundle.reports = items
        .par_iter()
        .map(|it| auditor.audit(&it.record, &it.trace, &it.circuit))
        .collect::<Result<_>>()?;
    let mismatched: Vec<String> = bundle
        .reports
        .iter()
        .zip(&instances)
        .filter(|(r, i)| r.taxonomy != Some(i.expected))
        .map(|(r, _)| r.record_id.clone())
        .collect();
    bundle.taxonomy_check = Some(TaxonomyCheck {
        n: instances.len(),
        matches: instances.len() - mismatched.len(),
        mismatched,
    });
    if let Some(o) = out.as_deref_mut() {
        let records: Vec<&ExplanationRecord> = instances.iter().map(|i| &i.record).collect();
        o.jsonl("records.jsonl", &records)?;
        o.jsonl("reports.jsonl", &bundle.reports)?;
        o.json("taxonomy_check.json", bundle.taxonomy_check.as_ref().unwrap())?;
    }

    let mut fvs = None;
    if cfg.linprobe {
        let traces: BTreeMap<String, ActivationTrace> =
            instances.iter().map(|i| (i.record.id.clone(), i.trace.clone())).collect();
        let (summary, v) = linprobe_stage(cfg, &bundle.reports, &traces)?;
        if let Some(o) = out.as_deref_mut() {
            store::save_faith_vectors(&o.root.join("vectors"), &v)?;
            o.json("linprobe.json", &summary)?;
        }
        bundle.linprobe = Some(summary);
        fvs = Some(v);
    }

    if cfg.steer {
        let fvs = fvs.as_ref().expect("validated: steer needs linprobe");
        let (plan, eligible) = faith_plan(fvs, cfg.probe_threshold, cfg.min_vote_layer, cfg.steer_lambda)?;
        let explainer = SynthExplainer { world: &world };
        let sweep = steering_sweep(&items, &plan, &eligible, TokenScope::LastToken, &explainer, &auditor)?;
        let conversion = if sweep.pairs.is_empty() {
            BTreeMap::new()
        } else {
            conversion_rate(&sweep.pairs, Stratify::PredictionAccuracy)?
        };
        let m = transition_matrix(&sweep.pairs)?;
        let summary = SteeringSummary {
            lambda: plan.lambda,
            layers: plan.layers.clone(),
            n_pairs: sweep.pairs.len(),
            skipped: sweep.skipped.clone(),
            conversion,
        };
        if let Some(o) = out.as_deref_mut() {
            let pairs: Vec<serde_json::Value> = sweep
                .pairs
                .iter()
                .map(|(b, a)| serde_json::json!({"before": b, "after": a}))
                .collect();
            o.jsonl("steering_pairs.jsonl", &pairs)?;
            o.write("transitions.csv", transition_csv(&m).as_bytes())?;
            o.json("steering.json", &summary)?;
        }
        bundle.steering = Some(summary);
    }

    if cfg.cas {
        let oracle = SynthVariantOracle {
            specs: instances.iter().map(|i| (i.record.id.clone(), i.spec)).collect(),
        };
        let records: BTreeMap<String, ExplanationRecord> =
            instances.iter().map(|i| (i.record.id.clone(), i.record.clone())).collect();
        let cr = cas_records(&bundle.reports, &records, &oracle)?;
        bundle.cas = Variant::ALL
            .iter()
            .map(|&v| compound_accuracy_score(&cr, v, true))
            .collect::<Result<_>>()?;
        if let Some(o) = out.as_deref_mut() {
            o.json("cas.json", &bundle.cas)?;
            let rows: Vec<(String, String, CasResult)> = bundle
                .cas
                .iter()
                .map(|r| (cfg.model_id.clone(), "probing".to_string(), *r))
                .collect();
            o.write("cas.md", render_cas_table(&rows).as_bytes())?;
        }
    }
    Ok(())
}

/// Number of samples per side used for synthetic CAVs.
pub const SYNTH_CAV_SAMPLES: usize = 200;

/// Per-layer CAVs for a concept direction over layers `layers`, fitted on
/// synthetic samples.
pub fn synth_layer_cavs(concept: &str, direction: &[f64], sigma: f64, seed: u64) -> Result<Vec<ConceptVector>> {
    let mut per_layer = Vec::with_capacity(SYNTH_LAYERS);
    for layer in 0..SYNTH_LAYERS {
        per_layer.push(concept_samples(
            direction,
            SYNTH_CAV_SAMPLES,
            SYNTH_CAV_SAMPLES,
            sigma,
            seed.wrapping_add(layer as u64),
        )?);
    }
    let n = 2 * SYNTH_CAV_SAMPLES;
    let mut states = vec![Vec::with_capacity(SYNTH_LAYERS); n];
    let labels: Vec<bool> = (0..n).map(|i| i < SYNTH_CAV_SAMPLES).collect();
    for (pos, neg) in per_layer {
        for (i, v) in pos.into_iter().chain(neg).enumerate() {
            states[i].push(v);
        }
    }
    fit_layer_cavs(concept, &states, &labels, seed)
}

fn run_classification(cfg: &RunConfig, judge: Option<&HttpJudge>) -> Result<Vec<FaithfulnessReport>> {
    let world = generate_world(cfg.synth_entities, 1, cfg.synth_d_model, cfg.seed)?;
    let n_concepts = world.entities.len().min(8);
    let concepts: Vec<String> = world.entities[..n_concepts].to_vec();
    let set = ConceptSet::from_ids(Task::Classification, &concepts)?;
    let extractor = make_extractor(cfg, judge, Some(set))?;
    let classes = ["class0", "class1", "class2", "class3"];

    // layer selection on held-out probe F1, restricted to the readout layers
    let cavs: BTreeMap<String, BTreeMap<usize, ConceptVector>> = concepts
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let dir = world.direction(c).expect("concept is an entity");
            let fitted = synth_layer_cavs(c, dir, 0.1, cfg.seed.wrapping_add(1000 * k as u64))?;
            let keep: BTreeSet<usize> = select_layers(&fitted, cfg.probe_threshold).into_iter().collect();
            Ok((
                c.clone(),
                fitted
                    .into_iter()
                    .filter(|v| keep.contains(&v.layer) && v.layer >= FAITH_MIN_LAYER)
                    .map(|v| (v.layer, v))
                    .collect(),
            ))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut jobs = vec![];
    for i in 0..cfg.synth_records {
        let mut pool = concepts.clone();
        pool.shuffle(&mut rng);
        let k = rng.random_range(2..=3);
        let present: Vec<String> = pool[..k].to_vec();
        let influential: Vec<String> = present.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
        let mut mentioned: Vec<String> = present.iter().filter(|_| rng.random_bool(0.6)).cloned().collect();
        if mentioned.is_empty() {
            mentioned.push(present[0].clone());
        }
        let gold = classes[i % classes.len()];
        let predicted = if rng.random_bool(0.75) { gold } else { classes[(i + 1) % classes.len()] };
        let spec = ClassificationSpec {
            present,
            influential,
            mentioned,
            gain: 0.3,
            noise_sigma: cfg.noise_sigma,
        };
        jobs.push((spec, gold, predicted, cfg.seed.wrapping_mul(7919).wrapping_add(i as u64)));
    }
    jobs.par_iter()
        .map(|(spec, gold, predicted, seed)| {
            let inst = classification_instance(&world, spec, gold, *seed)?;
            let mut record = inst.record.clone();
            record.prediction = predicted.to_string();
            let extracted = extractor.extract(&record)?;
            let oracle = NoisyProbability {
                inner: inst.forward.clone(),
                sigma: cfg.oracle_sigma,
                seed: *seed,
            };
            let mut attrs = Vec::with_capacity(extracted.len());
            for c in &extracted {
                let by_layer = cavs.get(c).ok_or_else(|| FaithError::UnknownConcept(c.clone()))?;
                let circuit = Circuit::new(
                    Granularity::ResidualStream,
                    by_layer.keys().map(|&l| (inst.trace.last_token(), l)),
                )?;
                attrs.push(concept_importance(&oracle, &inst.trace, &circuit, by_layer, &cfg.lambdas, cfg.alpha, c)?);
            }
            let mut report = FaithfulnessReport::from_attributions(&record.id, attrs);
            report.prediction_correct = record.prediction_correct();
            Ok(report)
        })
        .collect()
}

/// Erasure sweep, regression and t-test gate for one concept.
pub fn concept_importance(
    oracle: &dyn ProbabilityOracle,
    trace: &ActivationTrace,
    circuit: &Circuit,
    cav_by_layer: &BTreeMap<usize, ConceptVector>,
    lambdas: &[f64],
    alpha: f64,
    concept: &str,
) -> Result<crate::mechinterp::Attribution> {
    let sweep = erasure_sweep(oracle, trace, circuit, cav_by_layer, lambdas)?;
    let reg = fit_linear(&sweep)?;
    Ok(importance_attribution(concept, &reg, alpha))
}

/// Reports from a JSONL file.
pub fn load_reports(path: &Path) -> Result<Vec<FaithfulnessReport>> {
    let text = fs::read_to_string(path).map_err(|e| FaithError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| FaithError::Schema {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for v in values {
        serde_json::to_writer(&mut buf, v)?;
        buf.push(b'\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| FaithError::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| FaithError::io(path, e))
}

/// Traces named after their record ids inside `dir`.
pub fn load_trace_dir<'a>(dir: &Path, ids: impl IntoIterator<Item = &'a str>) -> Result<BTreeMap<String, ActivationTrace>> {
    let ids: Vec<&str> = ids.into_iter().collect();
    ids.par_iter()
        .map(|id| load_trace(&dir.join(id)).map(|t| (id.to_string(), t)))
        .collect()
}

/// Input of `simulate`: world knobs plus the scenarios to instantiate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_entities")]
    pub entities: usize,
    #[serde(default = "d_relations")]
    pub relations: usize,
    #[serde(default = "d_dim")]
    pub d_model: usize,
    #[serde(default = "d_one")]
    pub replicates: usize,
    /// defaults to every knob combination
    #[serde(default = "all_scenarios")]
    pub scenarios: Vec<ScenarioSpec>,
}

fn all_scenarios() -> Vec<ScenarioSpec> {
    ScenarioSpec::all(0.0)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SimulateInput {
    Full(SimulateSpec),
    One(ScenarioSpec),
    Many(Vec<ScenarioSpec>),
}

impl SimulateSpec {
    /// Accepts the full form, a single scenario, or a list of scenarios.
    pub fn from_json(text: &str) -> Result<Self> {
        let base = || SimulateSpec {
            seed: 0,
            entities: d_entities(),
            relations: d_relations(),
            d_model: d_dim(),
            replicates: 1,
            scenarios: vec![],
        };
        let spec = match serde_json::from_str::<SimulateInput>(text)
            .map_err(|_| FaithError::invalid("simulate spec: expected a spec object, a scenario or a list of scenarios"))?
        {
            SimulateInput::Full(s) => s,
            SimulateInput::One(s) => SimulateSpec { scenarios: vec![s], ..base() },
            SimulateInput::Many(v) => SimulateSpec { scenarios: v, ..base() },
        };
        if spec.scenarios.is_empty() || spec.replicates == 0 {
            return Err(FaithError::invalid("simulate spec: nothing to generate"));
        }
        for (i, s) in spec.scenarios.iter().enumerate() {
            s.validate().map_err(|e| FaithError::invalid(format!("scenarios[{i}]: {e}")))?;
            if s.circuit_window.2 >= SYNTH_LAYERS {
                return Err(FaithError::invalid(format!("scenarios[{i}]: synthetic traces have {SYNTH_LAYERS} layers")));
            }
        }
        Ok(spec)
    }
}

/// One line of `scenarios.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLine {
    pub record_id: String,
    pub spec: ScenarioSpec,
    pub expected: crate::faithmetrics::Category,
}

/// Generates the instances and writes `records.jsonl`, `traces/`,
/// `decoded.jsonl` (analytic decodes over each circuit), `scenarios.jsonl`
/// and `world.json` under `out`.
pub fn simulate(spec: &SimulateSpec, out: &Path) -> Result<Vec<SynthInstance>> {
    let world = generate_world(spec.entities, spec.relations, spec.d_model, spec.seed)?;
    let jobs: Vec<&ScenarioSpec> = (0..spec.replicates).flat_map(|_| spec.scenarios.iter()).collect();
    let instances = jobs
        .par_iter()
        .enumerate()
        .map(|(i, s)| generate_instance(&world, s, spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let traces = out.join("traces");
    fs::create_dir_all(&traces).map_err(|e| FaithError::io(&traces, e))?;
    let decoder = SynthDecoder { world: &world };
    let decoded: Vec<Vec<DecodedLine>> = instances
        .par_iter()
        .map(|inst| {
            crate::trace::save_trace(&inst.trace, &traces.join(&inst.record.id))?;
            let d = decode_circuit(&inst.trace, &inst.circuit()?, &decoder)?;
            Ok(d.into_iter()
                .map(|((token, layer), strings)| DecodedLine {
                    record_id: inst.record.id.clone(),
                    token,
                    layer,
                    strings,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let decoded: Vec<DecodedLine> = decoded.into_iter().flatten().collect();
    let records: Vec<ExplanationRecord> = instances.iter().map(|i| i.record.clone()).collect();
    crate::trace::write_records(&out.join("records.jsonl"), &records)?;
    write_jsonl(&out.join("decoded.jsonl"), &decoded)?;
    let lines: Vec<ScenarioLine> = instances
        .iter()
        .map(|i| ScenarioLine {
            record_id: i.record.id.clone(),
            spec: i.spec,
            expected: i.expected,
        })
        .collect();
    write_jsonl(&out.join("scenarios.jsonl"), &lines)?;
    let wpath = out.join("world.json");
    fs::write(&wpath, serde_json::to_string(&world)? + "\n").map_err(|e| FaithError::io(&wpath, e))?;
    Ok(instances)
}
