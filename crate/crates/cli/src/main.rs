use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tracing_subscriber::EnvFilter;

use ponzilens::detect::{
    BackendKind, Backoff, DetectionReport, Detector, FrozenClock, LlmConfig, Mode, Pricing, RetryPolicy, Templates,
    API_KEY_ENV,
};
use ponzilens::eval::{self, BatchOptions, DatasetManifest};
use ponzilens::hypergraph::BuildOptions;
use ponzilens::ingest::{fetch_verified_source, FetchConfig};
use ponzilens::pipeline::{load_unit, AnalysisOptions, IngestOptions, StaticAnalysis};
use ponzilens::render::RenderOptions;
use ponzilens::slice::SliceOptions;

const EXIT_POSITIVE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_PIPELINE: u8 = 3;

/// Taint-guided slicing and LLM-based Ponzi detection for Solidity contracts.
///
/// Exit codes: 0 success, 1 Ponzi verdict under `detect --gate`, 2 usage
/// error, 3 pipeline error.
#[derive(Parser)]
#[command(name = "ponzilens", version)]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Slice a contract and write its taint graph as DOT.
    Analyze {
        /// `.sol` source or `.ast.json` compiler output.
        path: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
        /// Output directory.
        #[arg(long, default_value = "ponzilens-out")]
        out: PathBuf,
        /// Also write each selected function, the header and the combined
        /// slice under `<out>/<name>.slices/`.
        #[arg(long)]
        slices: bool,
    },
    /// Run the two-stage prompt protocol and print the verdict.
    Detect {
        path: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
        #[command(flatten)]
        llm: LlmArgs,
        /// Output directory for the report.
        #[arg(long, default_value = "ponzilens-out")]
        out: PathBuf,
        /// Exit with status 1 when the verdict is Ponzi.
        #[arg(long)]
        gate: bool,
    },
    /// Detect every entry of a labelled manifest, resuming from `<out>/reports.jsonl`.
    Batch {
        /// CSV or JSONL manifest with `id,path_or_address,label`.
        manifest: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
        #[command(flatten)]
        llm: LlmArgs,
        #[arg(long, default_value = "ponzilens-out")]
        out: PathBuf,
    },
    /// Print the taint graph of a contract as DOT.
    Graph {
        path: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
        /// Write `<out>/<name>.taint.dot` instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute detection rates from a reports file.
    Metrics {
        /// Line-delimited reports, as written by `batch`.
        reports: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Download verified source from a block explorer.
    Fetch {
        address: String,
        #[arg(long, default_value = "ponzilens-out")]
        out: PathBuf,
        /// Explorer API base URL.
        #[arg(long, default_value = "https://api.etherscan.io/api")]
        api_url: String,
        /// Explorer requests per second.
        #[arg(long, default_value_t = 5.0)]
        rate_limit: f64,
    },
}

#[derive(Args, Clone, Copy)]
struct AnalysisArgs {
    /// Leave constructors out of the slice unless they touch tainted data themselves.
    #[arg(long)]
    no_constructors: bool,
    /// Propagate taint from branch and loop conditions into the variables they guard.
    #[arg(long)]
    implicit_flow: bool,
    /// Cluster DOT nodes by function.
    #[arg(long)]
    cluster: bool,
}

impl AnalysisArgs {
    fn options(self) -> AnalysisOptions {
        AnalysisOptions {
            build: BuildOptions { implicit_flow: self.implicit_flow },
            slice: SliceOptions { include_constructors: !self.no_constructors },
            render: RenderOptions { cluster: self.cluster },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Openai,
    Local,
    Mock,
}

#[derive(Args)]
struct LlmArgs {
    /// Chat backend. `openai` reads the key from PONZILENS_API_KEY.
    #[arg(long, value_enum, default_value = "openai")]
    backend: BackendArg,
    /// Base URL of the chat-completion API [default: OpenAI for `openai`, http://localhost:8000/v1 for `local`].
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the backend [default: gpt-3.5-turbo for `openai`, `local` for `local`, `mock` for `mock`].
    #[arg(long)]
    model: Option<String>,
    /// Prompt inputs: `full` (slice and taint graph), `no-taint` (slice only) or `raw` (whole source).
    #[arg(long, default_value = "full")]
    mode: Mode,
    /// Runs per contract; the verdict is their majority.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1024)]
    max_output_tokens: u32,
    /// Directory of prompt templates overriding the built-in ones.
    #[arg(long)]
    template_dir: Option<PathBuf>,
    /// Contracts detected in parallel.
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Price per 1000 input tokens.
    #[arg(long, default_value_t = 0.0005)]
    price_in: f64,
    /// Price per 1000 output tokens.
    #[arg(long, default_value_t = 0.0015)]
    price_out: f64,
    /// Attempts per request before giving up.
    #[arg(long, default_value_t = 3)]
    retries: u32,
    /// Reject prompts estimated above this many tokens [default: no limit].
    #[arg(long)]
    context_window: Option<u64>,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
}

impl LlmArgs {
    fn config(&self) -> LlmConfig {
        let (backend, endpoint, model) = match self.backend {
            BackendArg::Openai => (BackendKind::OpenaiCompatible, "https://api.openai.com/v1", "gpt-3.5-turbo"),
            BackendArg::Local => (BackendKind::LocalServer, "http://localhost:8000/v1", "local"),
            BackendArg::Mock => (BackendKind::Mock, "", "mock"),
        };
        LlmConfig {
            backend,
            endpoint: self.endpoint.clone().unwrap_or_else(|| endpoint.to_string()),
            model: self.model.clone().unwrap_or_else(|| model.to_string()),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            pricing: Pricing::new(self.price_in, self.price_out),
            retry: RetryPolicy {
                max_attempts: self.retries,
                backoff: Backoff::Exponential { base: Duration::from_secs(1), max: Duration::from_secs(30) },
            },
            concurrency_limit: self.concurrency,
            context_window: self.context_window,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.trim().is_empty()),
            timeout: Duration::from_secs(self.timeout),
        }
    }

    fn detector(&self, analysis: AnalysisArgs) -> Result<Detector, Failure> {
        let cfg = self.config();
        cfg.validate().map_err(|e| Failure::usage(anyhow!(e)))?;
        if self.repeats == 0 {
            return Err(Failure::usage(anyhow!("--repeats must be at least 1")));
        }
        let mock = cfg.backend == BackendKind::Mock;
        let mut detector = Detector::new(cfg).map_err(|e| Failure::pipeline(e.into()))?;
        if mock {
            detector = detector.with_clock(Arc::new(FrozenClock));
        }
        if let Some(dir) = &self.template_dir {
            let templates = Templates::from_dir(dir).map_err(|e| Failure::usage(e.into()))?;
            detector = detector.with_templates(templates);
        }
        detector.analysis = analysis.options();
        Ok(detector)
    }
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: anyhow::Error) -> Self {
        Failure { code: EXIT_USAGE, error }
    }

    fn pipeline(error: anyhow::Error) -> Self {
        Failure { code: EXIT_PIPELINE, error }
    }
}

/// File stem without the `.ast` of `.ast.json` fixtures.
fn unit_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "contract".into());
    stem.strip_suffix(".ast").map(str::to_string).unwrap_or(stem)
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(anyhow!("cannot read {}: no such file", path.display())))
    }
}

fn analyse(path: &Path, args: AnalysisArgs) -> Result<StaticAnalysis, Failure> {
    require_file(path)?;
    let unit = load_unit(&unit_name(path), &path.display().to_string(), &IngestOptions::default())
        .map_err(|e| Failure::pipeline(e.into()))?;
    StaticAnalysis::run(unit, args.options()).map_err(|e| Failure::pipeline(e.into()))
}

fn print_json(v: &Value) {
    use std::io::Write;
    // A closed pipe (`| head`) is not an error worth a panic.
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn rate(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |r| format!("{r:.4}"))
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Analyze { path, analysis, out, slices } => {
            let a = analyse(&path, analysis)?;
            let name = unit_name(&path);
            let dot_path = a.dot.write_to(&out, &name).map_err(|e| Failure::pipeline(e.into()))?;
            if slices {
                a.slice.emit(&out.join(format!("{name}.slices"))).map_err(|e| Failure::pipeline(e.into()))?;
            }
            if cli.json {
                let mut summary = a.summary();
                summary["dot_path"] = json!(dot_path.display().to_string());
                print_json(&summary);
            } else {
                println!("functions: {}", a.slice.stats.functions_total);
                println!("selected: {}", a.slice.stats.selected);
                for f in &a.slice.selected {
                    println!("  {f}");
                }
                println!("slice bytes: {} of {}", a.slice.stats.bytes, a.unit.source_text.len());
                let vars = a.tainted_state_vars();
                println!(
                    "tainted state variables: {}",
                    if vars.is_empty() { "(none)".into() } else { vars.join(", ") }
                );
                println!("dot: {}", dot_path.display());
            }
            Ok(0)
        }
        Command::Graph { path, analysis, out } => {
            let a = analyse(&path, analysis)?;
            match out {
                Some(dir) => {
                    let p = a.dot.write_to(&dir, &unit_name(&path)).map_err(|e| Failure::pipeline(e.into()))?;
                    if cli.json {
                        print_json(
                            &json!({"path": p.display().to_string(), "nodes": a.dot.node_count, "edges": a.dot.edge_count}),
                        );
                    } else {
                        println!("{}", p.display());
                    }
                }
                None if cli.json => {
                    print_json(&json!({"dot": a.dot.text, "nodes": a.dot.node_count, "edges": a.dot.edge_count}))
                }
                None => print!("{}", a.dot.text),
            }
            Ok(0)
        }
        Command::Detect { path, analysis, llm, out, gate } => {
            require_file(&path)?;
            let detector = llm.detector(analysis)?;
            let name = unit_name(&path);
            let report = detector.detect_source(
                &name,
                &path.display().to_string(),
                &IngestOptions::default(),
                llm.mode,
                llm.repeats,
            );
            let report_path = write_report(&out, &name, &report)?;
            if cli.json {
                let mut v = serde_json::to_value(&report).map_err(|e| Failure::pipeline(e.into()))?;
                v["report_path"] = json!(report_path.display().to_string());
                print_json(&v);
            }
            if let Some(e) = &report.error {
                return Err(Failure::pipeline(anyhow!("{e}")));
            }
            let Some(verdict) = report.final_verdict else {
                return Err(Failure::pipeline(anyhow!("no run produced a parseable verdict")));
            };
            if !cli.json {
                println!("{verdict}");
                println!("report: {}", report_path.display());
            }
            Ok(if gate && verdict { EXIT_POSITIVE } else { 0 })
        }
        Command::Batch { manifest, analysis, llm, out } => {
            require_file(&manifest)?;
            let m = DatasetManifest::load(&manifest).map_err(|e| Failure::usage(e.into()))?;
            let detector = llm.detector(analysis)?;
            let opts = BatchOptions::new(llm.mode, llm.repeats, &out);
            let outcome = eval::run_batch(&m, &detector, &opts).map_err(|e| Failure::pipeline(e.into()))?;
            let summary = eval::write_summaries(&out, &m, &outcome.reports).map_err(|e| Failure::pipeline(e.into()))?;
            let failed = outcome.reports.iter().filter(|r| r.error.is_some()).count();
            if cli.json {
                print_json(&json!({
                    "out_dir": out.display().to_string(),
                    "reports": outcome.reports.len(),
                    "resumed": outcome.resumed,
                    "failed": failed,
                    "complete": outcome.complete,
                    "metrics": summary["metrics"],
                    "overhead": summary["overhead"],
                }));
            } else {
                println!("reports: {} ({} resumed, {} failed)", outcome.reports.len(), outcome.resumed, failed);
                print_rates(&summary["metrics"]["per_contract"]);
                println!("written to {}", out.display());
            }
            Ok(0)
        }
        Command::Metrics { reports, manifest } => {
            require_file(&reports)?;
            require_file(&manifest)?;
            let m = DatasetManifest::load(&manifest).map_err(|e| Failure::usage(e.into()))?;
            let all: Vec<DetectionReport> =
                eval::read_journal(&reports).map_err(|e| Failure::usage(e.into()))?.into_values().collect();
            let per_contract = eval::compute_metrics::<f64>(&m, &all).map_err(|e| Failure::usage(e.into()))?;
            let per_run = eval::compute_run_metrics::<f64>(&m, &all).map_err(|e| Failure::usage(e.into()))?;
            let v = json!({"per_contract": per_contract, "per_run": per_run});
            if cli.json {
                print_json(&v);
            } else {
                print_rates(&v["per_contract"]);
            }
            Ok(0)
        }
        Command::Fetch { address, out, api_url, rate_limit } => {
            let cfg = FetchConfig { api_base_url: api_url, rate_limit, ..FetchConfig::default() }.with_env_overrides();
            cfg.validate().map_err(|e| Failure::usage(e.into()))?;
            let unit = fetch_verified_source(&address, &cfg).map_err(|e| Failure::pipeline(e.into()))?;
            fs::create_dir_all(&out).map_err(|e| Failure::pipeline(e.into()))?;
            let path = out.join(format!("{}.sol", address.to_ascii_lowercase()));
            fs::write(&path, &unit.source_text).map_err(|e| Failure::pipeline(e.into()))?;
            if cli.json {
                print_json(&json!({
                    "address": address,
                    "path": path.display().to_string(),
                    "compiler_version": unit.compiler_version,
                    "bytes": unit.source_text.len(),
                }));
            } else {
                println!("{}", path.display());
            }
            Ok(0)
        }
    }
}

fn print_rates(m: &Value) {
    let get = |k: &str| m[k].as_f64();
    println!(
        "TP {} TN {} FP {} FN {} unparseable {} errored {}",
        m["tp"], m["tn"], m["fp"], m["fn"], m["unparseable"], m["errored"]
    );
    println!(
        "TPR {} TNR {} FNR {} FPR {} BAC {}",
        rate(get("tpr")),
        rate(get("tnr")),
        rate(get("fnr")),
        rate(get("fpr")),
        rate(get("bac"))
    );
}

fn write_report(out: &Path, name: &str, report: &DetectionReport) -> Result<PathBuf, Failure> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display())).map_err(Failure::pipeline)?;
    let path = out.join(format!("{name}.report.json"));
    let line = serde_json::to_string(report).map_err(|e| Failure::pipeline(e.into()))?;
    fs::write(&path, line + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::pipeline)?;
    Ok(path)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
