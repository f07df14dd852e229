use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use faithkit::concepts::{extract_batch, extraction_agreement, ConceptExtractor, DeterministicExtractor, HttpJudge, JudgeExtractor, JUDGE_TOKEN_ENV};
use faithkit::evalcas::{cas_records, compound_accuracy_score, render_cas_table, Variant, VariantOracle};
use faithkit::faithmetrics::{render_taxonomy_tables, taxonomy_histogram, two_hop_report, FaithfulnessReport};
use faithkit::linfaith::{build_polarized_dataset, faithfulness_vectors, format_cell, majority_vote_f1, similarity_report, transfer_eval, SimilarityRow};
use faithkit::mechinterp::{fit_layer_cavs, probe_attribution, select_layers};
use faithkit::pipeline::{
    faith_plan, last_o1_token, load_reports, load_trace_dir, render_summary, run_pipeline, simulate, synth_layer_cavs,
    synth_two_hop_corpus, write_jsonl, PrecomputedDecodes, ReportBundle, RunConfig, SimulateSpec, SummaryFormat, TwoHopAuditor,
};
use faithkit::steering::{conversion_rate, steering_sweep, transition_csv, transition_matrix, Auditor, SteerItem, SteeringPlan, Stratify, TokenScope};
use faithkit::store::{self, StoreKind};
use faithkit::synthlab::{generate_world, SynthDecoder, SynthExplainer, SynthVariantOracle};
use faithkit::trace::{ingest_records, load_records, write_records, Circuit, ExplanationRecord, IngestFilters, Task};
use faithkit::{FaithError, Result};

#[derive(Parser)]
#[command(name = "faithkit", version, about = "Audit and intervene on the faithfulness of self-explanations")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Global {
    /// flat JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory (stdout when omitted, where that makes sense)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads, 0 for one per core
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

impl From<Format> for SummaryFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => SummaryFormat::Table,
            Format::Json => SummaryFormat::Json,
            Format::Csv => SummaryFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    TwoHop,
    Classification,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::TwoHop => Task::TwoHop,
            TaskArg::Classification => Task::Classification,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Faith,
    Halluc,
    Decep,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Last,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Hint1,
    Hint2,
    Relswap,
}

impl From<Metric> for Variant {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Hint1 => Variant::Hint1,
            Metric::Hint2 => Variant::Hint2,
            Metric::Relswap => Variant::RelSwap,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic traces and records from scenario knobs
    Simulate {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Validate and filter a record file
    Ingest {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::TwoHop)]
        task: TaskArg,
        #[arg(long)]
        max_answer_occurrences: Option<usize>,
        #[arg(long)]
        relation_blocklist: Vec<String>,
        /// check that every record has a loadable trace here
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Fit concept vectors per layer
    Cav {
        /// JSONL of {record_id, concept, label}; synthetic concepts when omitted
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        traces: Option<PathBuf>,
        /// token and layers to fit at; last token and all layers by default
        #[arg(long)]
        circuit: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Probing attribution over a circuit
    Probe {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::TwoHop)]
        task: TaskArg,
        /// decoded circuit states (JSONL); required for two_hop
        #[arg(long)]
        decoded: Option<PathBuf>,
        /// CAV store; required for classification
        #[arg(long)]
        cavs: Option<PathBuf>,
        #[arg(long)]
        circuit: Option<String>,
    },
    /// Erasure-based importance on the synthetic classification lab
    Erase {
        #[arg(long)]
        circuit: Option<String>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Faithfulness reports and accuracy-stratified summaries
    Faithfulness {
        #[arg(long)]
        reports: Option<PathBuf>,
        #[arg(long)]
        summary: bool,
        /// URL of a second judge; prints extraction agreement with the first
        #[arg(long)]
        second_judge: Option<String>,
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Category histograms for 2-hop reports
    Taxonomy {
        #[arg(long)]
        reports: Option<PathBuf>,
        #[arg(long)]
        summary: bool,
    },
    /// Fit faithfulness vectors on polarized reports
    Linprobe {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        /// JSON object record_id → class label, for class-averaged vectors
        #[arg(long)]
        class_labels: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        min_layer: Option<usize>,
    },
    /// Cosine similarity of faithfulness vectors against other vector sets
    Similarity {
        #[arg(long)]
        faith: PathBuf,
        #[arg(long, required = true)]
        against: Vec<PathBuf>,
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        class_labels: Option<PathBuf>,
        #[arg(long)]
        perms: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Majority-vote F1 of a vector set on another corpus
    Transfer {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        min_layer: Option<usize>,
    },
    /// Steer the synthetic corpus and re-audit
    Steer {
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        lambda: f64,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Scope::Last)]
        scope: Scope,
    },
    /// Compound accuracy score
    Cas {
        #[arg(long, value_enum)]
        metric: Vec<Metric>,
        /// JSONL of {record_id, variant, correct}; synthetic lab when omitted
        #[arg(long)]
        variants: Option<PathBuf>,
        #[arg(long)]
        reports: Option<PathBuf>,
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        no_smoothing: bool,
    },
    /// Full pipeline from the config
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn emit(g: &Global, name: &str, text: &str) -> Result<()> {
    match &g.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| FaithError::Io {
                path: dir.clone(),
                source: e,
            })?;
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| FaithError::Io { path: p, source: e })
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| FaithError::Io {
                path: "<stdout>".into(),
                source: e,
            })
        }
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn jsonl<T: Serialize>(values: &[T]) -> Result<String> {
    let mut s = String::new();
    for v in values {
        s.push_str(&serde_json::to_string(v)?);
        s.push('\n');
    }
    Ok(s)
}

fn need_out(g: &Global, cmd: &str) -> Result<PathBuf> {
    g.out
        .clone()
        .ok_or_else(|| FaithError::InvalidArgument(format!("{cmd} writes a directory; pass --out")))
}

fn guard_inputs(out: &Path, inputs: &[&Path]) -> Result<()> {
    for i in inputs {
        if out == *i {
            return Err(FaithError::InvalidArgument(format!("--out {} would overwrite an input", out.display())));
        }
    }
    Ok(())
}

fn pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| FaithError::InvalidArgument(format!("thread pool: {e}")))?
        .install(f)
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = cli.global;
    let cfg = config(&g)?;
    let jobs = cfg.jobs;
    pool(jobs, move || match cli.cmd {
        Cmd::Simulate { spec } => {
            let out = need_out(&g, "simulate")?;
            let text = fs::read_to_string(&spec).map_err(|e| FaithError::Io { path: spec.clone(), source: e })?;
            let mut spec = SimulateSpec::from_json(&text)?;
            if let Some(s) = g.seed {
                spec.seed = s;
            }
            let n = simulate(&spec, &out)?.len();
            eprintln!("wrote {n} records to {}", out.display());
            Ok(())
        }
        Cmd::Ingest {
            records,
            task,
            max_answer_occurrences,
            relation_blocklist,
            traces,
        } => {
            let filters = IngestFilters {
                max_answer_occurrences,
                relation_blocklist,
            };
            let task = Task::from(task);
            let all = load_records(&records, task)?.len();
            let kept = ingest_records(&records, task, &filters)?;
            if let Some(dir) = &traces {
                load_trace_dir(dir, kept.iter().map(|r| r.id.as_str()))?;
            }
            let summary = serde_json::json!({"records": all, "kept": kept.len(), "traces_checked": traces.is_some()});
            if let Some(out) = &g.out {
                let path = out.join("records.jsonl");
                guard_inputs(&path, &[&records])?;
                fs::create_dir_all(out).map_err(|e| FaithError::Io {
                    path: out.clone(),
                    source: e,
                })?;
                write_records(&path, &kept)?;
            }
            eprint!("{}", json(&summary)?);
            Ok(())
        }
        Cmd::Cav {
            labels,
            traces,
            circuit,
            threshold,
        } => cmd_cav(&g, &cfg, labels, traces, circuit, threshold.unwrap_or(cfg.probe_threshold)),
        Cmd::Probe {
            records,
            traces,
            task,
            decoded,
            cavs,
            circuit,
        } => cmd_probe(&g, &cfg, &records, &traces, task.into(), decoded, cavs, circuit),
        Cmd::Erase { circuit, lambdas, alpha } => {
            let mut cfg = cfg.clone();
            cfg.task = Task::Classification;
            cfg.out_dir = None;
            if let Some(l) = lambdas {
                cfg.lambdas = l;
            }
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(c) = circuit {
                let layers = Circuit::parse(&c)?.layers();
                cfg.layer_lo = *layers.first().unwrap();
                cfg.layer_hi = *layers.last().unwrap();
            }
            cfg.validate()?;
            let bundle = run_pipeline(&cfg)?;
            emit(&g, "reports.jsonl", &jsonl(&bundle.reports)?)
        }
        Cmd::Faithfulness {
            reports,
            summary,
            second_judge,
            records,
        } => {
            if let Some(url) = second_judge {
                return cmd_second_judge(&g, &cfg, &url, records);
            }
            let bundle = match reports {
                Some(p) => ReportBundle {
                    model_id: cfg.model_id.clone(),
                    reports: load_reports(&p)?,
                    ..Default::default()
                },
                None => {
                    let mut c = cfg.clone();
                    c.out_dir = None;
                    run_pipeline(&c)?
                }
            };
            if summary {
                emit(&g, "summary.txt", &render_summary(&bundle, g.format.into())?)
            } else {
                emit(&g, "reports.jsonl", &jsonl(&bundle.reports)?)
            }
        }
        Cmd::Taxonomy { reports, summary } => {
            let reports = match reports {
                Some(p) => load_reports(&p)?,
                None => {
                    let mut c = cfg.clone();
                    c.out_dir = None;
                    c.task = Task::TwoHop;
                    run_pipeline(&c)?.reports
                }
            };
            let hist = taxonomy_histogram(&reports);
            if reports.iter().all(|r| r.taxonomy.is_none()) {
                return Err(FaithError::Precondition("no report carries a taxonomy category".into()));
            }
            if !summary {
                return emit(&g, "reports.jsonl", &jsonl(&reports)?);
            }
            let text = match g.format {
                Format::Table => render_taxonomy_tables(&cfg.model_id, &hist),
                Format::Json => json(&hist.iter().map(|(c, n)| (c.to_string(), *n)).collect::<BTreeMap<_, _>>())?,
                Format::Csv => {
                    let mut s = String::from("model,category,count\n");
                    for (c, n) in &hist {
                        s.push_str(&format!("{},{c},{n}\n", cfg.model_id));
                    }
                    s
                }
            };
            emit(&g, "taxonomy.txt", &text)
        }
        Cmd::Linprobe {
            reports,
            traces,
            class_labels,
            threshold,
            min_layer,
        } => {
            let out = need_out(&g, "linprobe")?;
            let (dataset, classes) = polarized(&reports, &traces, class_labels.as_deref())?;
            let fvs = faithfulness_vectors(&cfg.task.to_string(), &dataset, classes.as_ref(), cfg.seed)?;
            let threshold = threshold.unwrap_or(cfg.probe_threshold);
            let mv = majority_vote_f1(&fvs, &dataset, min_layer.unwrap_or(cfg.min_vote_layer))?;
            store::save_faith_vectors(&out.join("vectors"), &fvs)?;
            let summary = serde_json::json!({
                "n_records": dataset.len(),
                "f1_by_layer": fvs.f1_by_layer,
                "eligible_layers": fvs.eligible_layers(threshold),
                "majority_vote_f1": mv,
            });
            emit(&g, "linprobe.json", &json(&summary)?)
        }
        Cmd::Similarity {
            faith,
            against,
            reports,
            traces,
            class_labels,
            perms,
            threshold,
        } => {
            let fvs = store::load_faith_vectors(&faith)?;
            let (dataset, classes) = polarized(&reports, &traces, class_labels.as_deref())?;
            let cols = against
                .iter()
                .map(|p| store::load_layer_vectors(p).map(|s| (s.name, s.vectors)))
                .collect::<Result<Vec<_>>>()?;
            let rows = [SimilarityRow {
                fvs: &fvs,
                dataset: &dataset,
                class_labels: classes.as_ref(),
            }];
            let rep = similarity_report(
                &rows,
                &cols,
                threshold.unwrap_or(cfg.probe_threshold),
                perms.unwrap_or(cfg.n_perms),
                cfg.seed,
            )?;
            let text = match g.format {
                Format::Json => json(&rep)?,
                _ => {
                    let mut s = format!("{:<16}", "");
                    for c in &rep.cols {
                        s.push_str(&format!(" | {c:>16}"));
                    }
                    s.push('\n');
                    for (r, line) in rep.rows.iter().zip(&rep.cells) {
                        s.push_str(&format!("{r:<16}"));
                        for c in line {
                            s.push_str(&format!(" | {:>16}", format_cell(c)));
                        }
                        s.push('\n');
                    }
                    s
                }
            };
            emit(&g, "similarity.txt", &text)
        }
        Cmd::Transfer {
            source,
            reports,
            traces,
            min_layer,
        } => {
            let fvs = store::load_faith_vectors(&source)?;
            let (dataset, _) = polarized(&reports, &traces, None)?;
            let f1 = transfer_eval(&fvs, &dataset, min_layer.unwrap_or(cfg.min_vote_layer))?;
            emit(&g, "transfer.json", &json(&serde_json::json!({"source": fvs.task, "n_records": dataset.len(), "f1": f1}))?)
        }
        Cmd::Steer {
            vectors,
            lambda,
            mode,
            scope,
        } => cmd_steer(&g, &cfg, &vectors, lambda, mode, scope),
        Cmd::Cas {
            metric,
            variants,
            reports,
            records,
            no_smoothing,
        } => cmd_cas(&g, &cfg, metric, variants, reports, records, !no_smoothing),
        Cmd::Run => {
            let mut cfg = cfg.clone();
            if let Some(o) = &g.out {
                cfg.out_dir = Some(o.clone());
            }
            let bundle = run_pipeline(&cfg)?;
            if cfg.out_dir.is_none() {
                print!("{}", render_summary(&bundle, g.format.into())?);
            }
            Ok(())
        }
    })
}

fn polarized(
    reports: &Path,
    traces: &Path,
    class_labels: Option<&Path>,
) -> Result<(Vec<faithkit::linfaith::NleSequenceTrace>, Option<BTreeMap<String, String>>)> {
    let reports = load_reports(reports)?;
    let ids = reports.iter().filter(|r| r.polarized_label().is_some()).map(|r| r.record_id.as_str());
    let traces = load_trace_dir(traces, ids)?;
    let dataset = build_polarized_dataset(&reports, &traces)?;
    let classes = class_labels
        .map(|p| -> Result<BTreeMap<String, String>> {
            let t = fs::read_to_string(p).map_err(|e| FaithError::Io { path: p.into(), source: e })?;
            Ok(serde_json::from_str(&t)?)
        })
        .transpose()?;
    Ok((dataset, classes))
}

#[derive(Deserialize)]
struct LabelLine {
    record_id: String,
    concept: String,
    label: bool,
}

fn cmd_cav(
    g: &Global,
    cfg: &RunConfig,
    labels: Option<PathBuf>,
    traces: Option<PathBuf>,
    circuit: Option<String>,
    threshold: f64,
) -> Result<()> {
    let out = need_out(g, "cav")?;
    let circuit = circuit.map(|c| Circuit::parse(&c)).transpose()?;
    let cavs = match labels {
        None => {
            let world = generate_world(cfg.synth_entities, 1, cfg.synth_d_model, cfg.seed)?;
            let mut all = vec![];
            for (k, c) in world.entities.iter().take(8).enumerate() {
                let dir = world.direction(c).expect("entity direction");
                all.extend(synth_layer_cavs(c, dir, 0.1, cfg.seed.wrapping_add(1000 * k as u64))?);
            }
            all
        }
        Some(path) => {
            let traces = traces.ok_or_else(|| FaithError::InvalidArgument("--labels needs --traces".into()))?;
            let text = fs::read_to_string(&path).map_err(|e| FaithError::Io { path: path.clone(), source: e })?;
            let mut by_concept: BTreeMap<String, Vec<(String, bool)>> = BTreeMap::new();
            for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let l: LabelLine = serde_json::from_str(l).map_err(|e| FaithError::Schema {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                by_concept.entry(l.concept).or_default().push((l.record_id, l.label));
            }
            let ids: BTreeSet<&str> = by_concept.values().flatten().map(|(id, _)| id.as_str()).collect();
            let loaded = load_trace_dir(&traces, ids)?;
            let mut all = vec![];
            for (concept, rows) in &by_concept {
                let mut states = vec![];
                let mut lab = vec![];
                for (id, l) in rows {
                    let t = &loaded[id];
                    let token = match &circuit {
                        Some(c) => c.coords().next().map(|x| x.0).unwrap_or_else(|| t.last_token()),
                        None => t.last_token(),
                    };
                    let per_layer = (0..t.n_layers())
                        .map(|layer| t.state(token, layer).map(faithkit::vecops::to_f64))
                        .collect::<Result<Vec<_>>>()?;
                    states.push(per_layer);
                    lab.push(*l);
                }
                all.extend(fit_layer_cavs(concept, &states, &lab, cfg.seed)?);
            }
            all
        }
    };
    let cavs: Vec<_> = match &circuit {
        Some(c) => {
            let layers = c.layers();
            cavs.into_iter().filter(|v| layers.contains(&v.layer)).collect()
        }
        None => cavs,
    };
    store::save_cavs(&out, "cavs", &cavs)?;
    let mut summary: BTreeMap<&str, serde_json::Value> = BTreeMap::new();
    for (concept, group) in store::cavs_by_concept(cavs.clone()) {
        let v: Vec<_> = group.into_values().collect();
        summary.insert(
            cavs.iter().find(|c| c.concept_id == concept).map(|c| c.concept_id.as_str()).unwrap(),
            serde_json::json!({
                "f1_by_layer": v.iter().map(|c| (c.layer, c.probe_f1)).collect::<BTreeMap<_, _>>(),
                "selected_layers": select_layers(&v, threshold),
            }),
        );
    }
    eprint!("{}", json(&summary)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_probe(
    g: &Global,
    cfg: &RunConfig,
    records: &Path,
    traces: &Path,
    task: Task,
    decoded: Option<PathBuf>,
    cavs: Option<PathBuf>,
    circuit: Option<String>,
) -> Result<()> {
    use rayon::prelude::*;
    let records = load_records(records, task)?;
    let loaded = load_trace_dir(traces, records.iter().map(|r| r.id.as_str()))?;
    let fixed = circuit.map(|c| Circuit::parse(&c)).transpose()?;
    let extractor = DeterministicExtractor { task };
    let reports: Vec<FaithfulnessReport> = match task {
        Task::TwoHop => {
            let decoded = decoded.ok_or_else(|| FaithError::InvalidArgument("two_hop probing needs --decoded".into()))?;
            let decodes = PrecomputedDecodes::load(&decoded)?;
            records
                .par_iter()
                .map(|r| {
                    let trace = &loaded[&r.id];
                    let circuit = match &fixed {
                        Some(c) => c.clone(),
                        None => {
                            let o1 = r.gold.as_ref().and_then(|g| g.o1.as_deref()).unwrap_or_default();
                            let t = last_o1_token(trace.tokens(), o1)
                                .ok_or_else(|| FaithError::Missing(format!("o1 not found in record {}", r.id)))?;
                            Circuit::window(trace.granularity(), t, cfg.layer_lo, cfg.layer_hi)?
                        }
                    };
                    let d = decodes
                        .by_record
                        .get(&r.id)
                        .ok_or_else(|| FaithError::Missing(format!("no decoded states for record {}", r.id)))?;
                    let concepts = extractor.extract(r)?;
                    two_hop_report(r, concepts.first().map(String::as_str), d, &circuit)
                })
                .collect::<Result<_>>()?
        }
        Task::Classification => {
            let cavs = cavs.ok_or_else(|| FaithError::InvalidArgument("classification probing needs --cavs".into()))?;
            let by_concept = store::cavs_by_concept(store::load_cavs(&cavs)?);
            records
                .par_iter()
                .map(|r| {
                    let trace = &loaded[&r.id];
                    let mut attrs = vec![];
                    for c in extractor.extract(r)? {
                        let cav = by_concept.get(&c).ok_or_else(|| FaithError::UnknownConcept(c.clone()))?;
                        let circuit = match &fixed {
                            Some(x) => x.clone(),
                            None => Circuit::new(trace.granularity(), cav.keys().map(|&l| (trace.last_token(), l)))?,
                        };
                        attrs.push(probe_attribution(trace, &circuit, cav)?);
                    }
                    let mut rep = FaithfulnessReport::from_attributions(&r.id, attrs);
                    rep.prediction_correct = r.prediction_correct();
                    Ok(rep)
                })
                .collect::<Result<_>>()?
        }
    };
    emit(g, "reports.jsonl", &jsonl(&reports)?)
}

fn cmd_second_judge(g: &Global, cfg: &RunConfig, url: &str, records: Option<PathBuf>) -> Result<()> {
    let records = records.ok_or_else(|| FaithError::InvalidArgument("--second-judge needs --records".into()))?;
    let records = load_records(&records, cfg.task)?;
    let first = HttpJudge::from_env()?;
    let second = HttpJudge::new(url, std::env::var(JUDGE_TOKEN_ENV).ok(), Duration::from_secs(60));
    let ex = |j| JudgeExtractor {
        judge: j,
        task: cfg.task,
        concept_set: None,
        dataset: cfg.dataset,
    };
    let a = extract_batch(&records, &ex(&first), 8)?;
    let b = extract_batch(&records, &ex(&second), 8)?;
    let agreement = extraction_agreement(&a, &b)?;
    emit(g, "agreement.json", &json(&serde_json::json!({"n": records.len(), "agreement": agreement}))?)
}

fn cmd_steer(g: &Global, cfg: &RunConfig, vectors: &Path, lambda: f64, mode: Mode, scope: Scope) -> Result<()> {
    let (manifest, _) = store::read_store(vectors)?;
    let set = store::load_layer_vectors(vectors)?;
    let eligible: BTreeSet<usize> = match manifest.kind {
        StoreKind::Faithfulness | StoreKind::Cav => manifest
            .entries
            .iter()
            .filter(|e| e.probe_f1.is_some_and(|f| f > cfg.probe_threshold) && e.layer >= cfg.min_vote_layer)
            .map(|e| e.layer)
            .collect(),
        StoreKind::Imported => set.vectors.keys().copied().filter(|&l| l >= cfg.min_vote_layer).collect(),
    };
    if matches!(mode, Mode::Faith) && manifest.kind != StoreKind::Faithfulness {
        return Err(FaithError::InvalidArgument("--mode faith needs a faithfulness vector store".into()));
    }
    if eligible.is_empty() {
        return Err(FaithError::Precondition("no eligible steering layer in the store".into()));
    }
    let plan = match manifest.kind {
        StoreKind::Faithfulness => faith_plan(&store::load_faith_vectors(vectors)?, cfg.probe_threshold, cfg.min_vote_layer, lambda)?.0,
        _ => SteeringPlan::new(
            eligible.iter().map(|l| (*l, set.vectors[l].clone())).collect(),
            lambda,
            eligible.clone(),
        )?,
    };
    let mut c = cfg.clone();
    c.task = Task::TwoHop;
    let (world, instances) = synth_two_hop_corpus(&c)?;
    let extractor = DeterministicExtractor { task: Task::TwoHop };
    let decoder = SynthDecoder { world: &world };
    let auditor = TwoHopAuditor {
        extractor: &extractor,
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
    let scope = match scope {
        Scope::Last => TokenScope::LastToken,
        Scope::All => TokenScope::AllTokens,
    };
    let sweep = steering_sweep(&items, &plan, &eligible, scope, &SynthExplainer { world: &world }, &auditor)?;
    let m = transition_matrix(&sweep.pairs)?;
    let conversion = if sweep.pairs.is_empty() {
        BTreeMap::new()
    } else {
        conversion_rate(&sweep.pairs, Stratify::PredictionAccuracy)?
    };
    let mode_name = match mode {
        Mode::Faith => "faith",
        Mode::Halluc => "halluc",
        Mode::Decep => "decep",
    };
    let summary = serde_json::json!({
        "mode": mode_name,
        "lambda": lambda,
        "layers": plan.layers,
        "n_pairs": sweep.pairs.len(),
        "skipped": sweep.skipped,
        "conversion": conversion,
    });
    if let Some(out) = &g.out {
        let pairs: Vec<serde_json::Value> = sweep
            .pairs
            .iter()
            .map(|(b, a)| serde_json::json!({"before": b, "after": a}))
            .collect();
        write_jsonl(&out.join("steering_pairs.jsonl"), &pairs)?;
        fs::write(out.join("transitions.csv"), transition_csv(&m)).map_err(|e| FaithError::Io {
            path: out.join("transitions.csv"),
            source: e,
        })?;
    }
    emit(g, "steering.json", &json(&summary)?)
}

#[derive(Deserialize)]
struct VariantLine {
    record_id: String,
    variant: Variant,
    correct: bool,
}

/// Variant outcomes read from a file.
struct TableOracle(BTreeMap<(String, Variant), bool>);

impl VariantOracle for TableOracle {
    fn variant_correct(&self, record: &ExplanationRecord, variant: Variant) -> Result<bool> {
        self.0
            .get(&(record.id.clone(), variant))
            .copied()
            .ok_or_else(|| FaithError::Missing(format!("no {variant} outcome for record {}", record.id)))
    }
}

fn cmd_cas(
    g: &Global,
    cfg: &RunConfig,
    metrics: Vec<Metric>,
    variants: Option<PathBuf>,
    reports: Option<PathBuf>,
    records: Option<PathBuf>,
    smoothing: bool,
) -> Result<()> {
    let wanted: Vec<Variant> = if metrics.is_empty() {
        Variant::ALL.to_vec()
    } else {
        metrics.into_iter().map(Variant::from).collect()
    };
    let cas = match variants {
        Some(vp) => {
            let (Some(rp), Some(recp)) = (reports, records) else {
                return Err(FaithError::InvalidArgument("--variants needs --reports and --records".into()));
            };
            let reports = load_reports(&rp)?;
            let records: BTreeMap<String, ExplanationRecord> =
                load_records(&recp, Task::TwoHop)?.into_iter().map(|r| (r.id.clone(), r)).collect();
            let text = fs::read_to_string(&vp).map_err(|e| FaithError::Io { path: vp.clone(), source: e })?;
            let mut table = BTreeMap::new();
            for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let v: VariantLine = serde_json::from_str(l).map_err(|e| FaithError::Schema {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                table.insert((v.record_id, v.variant), v.correct);
            }
            cas_records(&reports, &records, &TableOracle(table))?
        }
        None => {
            let mut c = cfg.clone();
            c.task = Task::TwoHop;
            c.out_dir = None;
            let (world, instances) = synth_two_hop_corpus(&c)?;
            let extractor = DeterministicExtractor { task: Task::TwoHop };
            let decoder = SynthDecoder { world: &world };
            let auditor = TwoHopAuditor {
                extractor: &extractor,
                decoder: &decoder,
            };
            let reports = instances
                .iter()
                .map(|i| auditor.audit(&i.record, &i.trace, &i.circuit()?))
                .collect::<Result<Vec<_>>>()?;
            let oracle = SynthVariantOracle {
                specs: instances.iter().map(|i| (i.record.id.clone(), i.spec)).collect(),
            };
            let records = instances.iter().map(|i| (i.record.id.clone(), i.record.clone())).collect();
            cas_records(&reports, &records, &oracle)?
        }
    };
    let rows = wanted
        .iter()
        .map(|&v| compound_accuracy_score(&cas, v, smoothing).map(|r| (cfg.model_id.clone(), "probing".to_string(), r)))
        .collect::<Result<Vec<_>>>()?;
    match g.format {
        Format::Json => emit(g, "cas.json", &json(&rows.iter().map(|(_, _, r)| r).collect::<Vec<_>>())?),
        _ => emit(g, "cas.md", &render_cas_table(&rows)),
    }
}
