use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use detvlm::detector::{HttpDetector, ScriptedDetector};
use detvlm::eval::{evaluate, report, Coverage, GroundTruth, ReportFormat, Target};
use detvlm::index::{index_to_file, IndexConfig};
use detvlm::ontology::{load_manifest, load_ontology, ComponentOntology};
use detvlm::pipeline::{Pipeline, PipelineConfig};
use detvlm::prompt::PromptTemplates;
use detvlm::query::{evaluate_query, parse_query};
use detvlm::simbench::{run_simulation, synthetic_ontology, ErrorModel};
use detvlm::store::{load_results, LoadMode};
use detvlm::vlm::{HttpVlm, ScriptedVlm};
use detvlm::{Detector, Error, Vlm};

#[derive(Parser)]
#[command(name = "detvlm", version, about = "Detector + VLM component retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index a manifest of images into a records file.
    Index(IndexArgs),
    /// Print ids of images whose records satisfy a query.
    Query(QueryArgs),
    /// Score a records file against ground truth.
    Eval(EvalArgs),
    /// Run the synthetic error-model benchmark.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ontology: PathBuf,
    /// TOML: pipeline keys plus optional [detector] and [vlm] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "detector_url")]
    detector_mock: Option<PathBuf>,
    #[arg(long)]
    detector_url: Option<String>,
    #[arg(long, conflicts_with = "vlm_url")]
    vlm_mock: Option<PathBuf>,
    #[arg(long)]
    vlm_url: Option<String>,
    /// JSON map of prompt kind to template.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// JSON Lines log of every backend call.
    #[arg(long)]
    run_log: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    ontology: PathBuf,
    #[arg(long = "where")]
    query: String,
    /// Skip malformed records lines instead of failing.
    #[arg(long)]
    lenient: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Table,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Table => ReportFormat::Table,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    report: FormatArg,
    /// Score a state task as binary: `component=label`. Repeatable.
    #[arg(long = "positive", value_name = "COMPONENT=LABEL")]
    positives: Vec<String>,
    /// Exclude images without ground truth, and skip malformed records lines.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1.0)]
    det_recall: f64,
    #[arg(long, default_value_t = 0.0)]
    det_fp: f64,
    #[arg(long, default_value_t = 1.0)]
    vlm_sens: f64,
    #[arg(long, default_value_t = 1.0)]
    vlm_spec: f64,
    #[arg(long, default_value_t = 0.0)]
    ambiguity: f64,
    #[arg(long, default_value_t = 0.5)]
    prevalence: f64,
    #[arg(long, default_value_t = 40_000)]
    images: usize,
    #[arg(long, default_value_t = 5)]
    components: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, value_enum, default_value = "table")]
    report: FormatArg,
}

fn open(path: &Path) -> Result<BufReader<File>, Error> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_ontology(path: &Path) -> Result<ComponentOntology, Error> {
    Ok(load_ontology(open(path)?)?)
}

fn mode(lenient: bool) -> LoadMode {
    if lenient {
        LoadMode::Lenient
    } else {
        LoadMode::Strict
    }
}

fn index(args: IndexArgs) -> Result<(), Error> {
    let ontology = read_ontology(&args.ontology)?;
    let images = load_manifest(open(&args.manifest)?)?;
    let mut config = match &args.config {
        Some(p) => IndexConfig::from_toml_str(&std::fs::read_to_string(p)?)?,
        None => IndexConfig::default(),
    };
    if let Some(w) = args.workers {
        config.pipeline.worker_count = w;
    }
    let detector: Box<dyn Detector> = match (&args.detector_mock, &args.detector_url) {
        (Some(p), _) => Box::new(ScriptedDetector::from_jsonl(open(p)?)?),
        (None, Some(u)) => Box::new(HttpDetector::new(config.detector_config(u)?)),
        (None, None) => return Err(Error::Config("index needs --detector-mock or --detector-url".into())),
    };
    let vlm: Box<dyn Vlm> = match (&args.vlm_mock, &args.vlm_url) {
        (Some(p), _) => Box::new(ScriptedVlm::from_jsonl(open(p)?)?),
        (None, Some(u)) => Box::new(HttpVlm::new(config.vlm_config(u)?)),
        (None, None) => return Err(Error::Config("index needs --vlm-mock or --vlm-url".into())),
    };
    let mut pipeline = Pipeline::new(ontology, config.pipeline, detector, vlm)?;
    if let Some(t) = &args.templates {
        pipeline = pipeline.with_templates(PromptTemplates::from_reader(open(t)?)?);
    }
    let summary = index_to_file(&pipeline, &images, &args.out, args.run_log.as_deref())?;
    log::info!(
        "indexed {} images ({} failed, {} VLM calls)",
        summary.images,
        summary.failed,
        summary.vlm_calls
    );
    if summary.images > 0 && summary.failed == summary.images {
        return Err(Error::Backend(format!(
            "all {} images failed at the detector; records written to {}",
            summary.images,
            args.out.display()
        )));
    }
    Ok(())
}

fn query(args: QueryArgs) -> Result<(), Error> {
    let ontology = read_ontology(&args.ontology)?;
    let spec = parse_query(&args.query).map_err(detvlm::query::QueryError::from)?;
    spec.validate(&ontology)?;
    let loaded = load_results(&args.records, mode(args.lenient))?;
    if loaded.skipped > 0 {
        eprintln!("skipped {} malformed records line(s)", loaded.skipped);
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for id in evaluate_query(&spec, &ontology, &loaded.results)? {
        writeln!(out, "{id}")?;
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Error> {
    let loaded = load_results(&args.records, mode(args.lenient))?;
    let truth = GroundTruth::from_jsonl(open(&args.truth)?)?;
    let labelled: std::collections::HashSet<&str> =
        truth.entries().flat_map(|e| e.present.keys().map(String::as_str)).collect();
    let mut targets: Vec<Target> = loaded
        .results
        .iter()
        .find(|r| !r.is_failed())
        .map(|r| {
            r.records
                .iter()
                .filter(|rec| labelled.contains(rec.component.as_str()))
                .map(|rec| Target::Existence(rec.component.clone()))
                .collect()
        })
        .unwrap_or_default();
    for p in &args.positives {
        let (component, label) = p
            .split_once('=')
            .filter(|(c, l)| !c.is_empty() && !l.is_empty())
            .ok_or_else(|| Error::Config(format!("--positive expects component=label, got {p:?}")))?;
        targets.push(Target::State {
            component: component.into(),
            positive: label.into(),
        });
    }
    if targets.is_empty() {
        return Err(Error::Config("no scorable targets: records and truth share no components".into()));
    }
    let coverage = if args.lenient { Coverage::Lenient } else { Coverage::Strict };
    let rows = evaluate(&loaded.results, &truth, &targets, coverage)?;
    let excluded = rows.iter().map(|r| r.excluded).max().unwrap_or(0);
    if excluded > 0 {
        eprintln!("excluded up to {excluded} image(s) per target (failed or without ground truth)");
    }
    print!("{}", report(&rows, args.report.into()));
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), Error> {
    let model = ErrorModel {
        det_recall: args.det_recall,
        det_fp_rate: args.det_fp,
        vlm_sensitivity: args.vlm_sens,
        vlm_specificity: args.vlm_spec,
        vlm_ambiguity: args.ambiguity,
        prevalence: args.prevalence,
        seed: args.seed,
    };
    if args.components == 0 {
        return Err(Error::Config("--components must be positive".into()));
    }
    let config = PipelineConfig {
        worker_count: args.workers,
        ..PipelineConfig::default()
    };
    let report = run_simulation(&model, args.images, &synthetic_ontology(args.components), &config)?;
    print!("{}", report.render(args.report.into()));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Index(a) => index(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::Simulate(a) => simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
