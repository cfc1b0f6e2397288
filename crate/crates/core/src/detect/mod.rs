//! Two-stage chat-model detection: an analysis prompt over the code slice
//! (and optionally the taint graph), then a verdict prompt over that
//! analysis and a Ponzi definition.

mod backend;
mod mock;
mod prompt;
mod verdict;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::info;

pub use backend::{complete, AttemptError, BackendError, ChatBackend, Completion, OpenAiCompatible};
pub use mock::{respond as mock_respond, MockBackend, PATTERN_ABSENT, PATTERN_FOUND};
pub use prompt::{
    build_analysis_prompt, build_detection_prompt, estimate_tokens, substitute, PromptBundle, PromptError, PromptParts,
    Stage, Templates,
};
pub use verdict::{parse_verdict, UnparseableVerdict};

use crate::ingest::SourceUnit;
use crate::pipeline::{load_unit, AnalysisOptions, IngestOptions, Phase, PipelineError, StaticAnalysis};
use crate::scalar::Scalar;

pub const API_KEY_ENV: &str = "PONZILENS_API_KEY";
pub const DEFAULT_REPEATS: usize = 5;

/// Which inputs the analysis prompt carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Slice plus taint graph.
    Full,
    /// Slice only.
    NoTaint,
    /// Whole source, no graph.
    Raw,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::NoTaint => "no_taint",
            Mode::Raw => "raw",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Mode::Full),
            "no-taint" | "no_taint" => Ok(Mode::NoTaint),
            "raw" => Ok(Mode::Raw),
            other => Err(format!("unknown mode `{other}` (expected full, no-taint or raw)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    OpenaiCompatible,
    LocalServer,
    Mock,
}

/// Price per 1000 input and output tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pricing<T> {
    pub input_per_1k: T,
    pub output_per_1k: T,
}

impl<T: Scalar> Pricing<T> {
    pub fn new(input_per_1k: T, output_per_1k: T) -> Self {
        Pricing { input_per_1k, output_per_1k }
    }

    pub fn cost(&self, input_tokens: u64, output_tokens: u64) -> T {
        (T::from_count(input_tokens) * self.input_per_1k + T::from_count(output_tokens) * self.output_per_1k)
            / T::from_count(1000)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Backoff {
    Fixed(Duration),
    Exponential { base: Duration, max: Duration },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff: Backoff,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff: Backoff::Exponential { base: Duration::from_secs(1), max: Duration::from_secs(30) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub backend: BackendKind,
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub pricing: Pricing<f64>,
    pub retry: RetryPolicy,
    pub concurrency_limit: usize,
    /// Prompt size limit in estimated tokens; `None` leaves it to the server.
    pub context_window: Option<u64>,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            backend: BackendKind::OpenaiCompatible,
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            pricing: Pricing::new(0.0005, 0.0015),
            retry: RetryPolicy::default(),
            concurrency_limit: 4,
            context_window: None,
            api_key: None,
            timeout: Duration::from_secs(120),
        }
    }
}

impl LlmConfig {
    pub fn mock() -> Self {
        LlmConfig {
            backend: BackendKind::Mock,
            endpoint: String::new(),
            model: "mock".into(),
            retry: RetryPolicy { max_attempts: 1, backoff: Backoff::Fixed(Duration::ZERO) },
            ..LlmConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.concurrency_limit == 0 {
            return Err("concurrency limit must be at least 1".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} is outside 0..=2", self.temperature));
        }
        if self.retry.max_attempts == 0 {
            return Err("retry attempts must be at least 1".into());
        }
        if self.backend != BackendKind::Mock && self.endpoint.trim().is_empty() {
            return Err("an endpoint URL is required".into());
        }
        if self.backend == BackendKind::OpenaiCompatible && self.api_key.as_deref().is_none_or(|k| k.trim().is_empty())
        {
            return Err(format!("no API key: set {API_KEY_ENV}"));
        }
        Ok(())
    }

    /// The backend this configuration selects.
    pub fn make_backend(&self) -> Result<Arc<dyn ChatBackend>, BackendError> {
        Ok(match self.backend {
            BackendKind::Mock => Arc::new(MockBackend),
            BackendKind::OpenaiCompatible | BackendKind::LocalServer => {
                Arc::new(OpenAiCompatible::new(self.api_key.clone(), self.timeout)?)
            }
        })
    }
}

/// Source of wall-clock measurements for run records.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

/// Monotonic time since the clock was created.
#[derive(Debug)]
pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// A clock that never advances, so reports are reproducible byte for byte.
#[derive(Debug, Default, Clone, Copy)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now(&self) -> Duration {
        Duration::ZERO
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub index: usize,
    /// `None` when the reply had no verdict token or the run failed.
    pub verdict: Option<bool>,
    pub error: Option<String>,
    pub analysis_text: String,
    pub detection_text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_seconds: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub contract_id: String,
    pub mode: Mode,
    pub model: String,
    pub template_version: String,
    pub runs: Vec<RunRecord>,
    /// Majority of parseable run verdicts, ties counted as positive.
    pub final_verdict: Option<bool>,
    pub positive_runs: usize,
    pub error: Option<PipelineError>,
    pub note: Option<String>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_seconds: f64,
    pub cost: f64,
}

impl DetectionReport {
    fn empty(contract_id: &str, mode: Mode, cfg: &LlmConfig, templates: &Templates) -> Self {
        DetectionReport {
            contract_id: contract_id.to_string(),
            mode,
            model: cfg.model.clone(),
            template_version: templates.version.clone(),
            runs: Vec::new(),
            final_verdict: None,
            positive_runs: 0,
            error: None,
            note: None,
            input_tokens: 0,
            output_tokens: 0,
            wall_seconds: 0.0,
            cost: 0.0,
        }
    }

    pub fn failed(contract_id: &str, mode: Mode, cfg: &LlmConfig, templates: &Templates, error: PipelineError) -> Self {
        DetectionReport { error: Some(error), ..Self::empty(contract_id, mode, cfg, templates) }
    }

    fn finish(&mut self) {
        let verdicts: Vec<bool> = self.runs.iter().filter_map(|r| r.verdict).collect();
        self.positive_runs = verdicts.iter().filter(|v| **v).count();
        self.final_verdict = majority(&verdicts);
        self.input_tokens = self.runs.iter().map(|r| r.input_tokens).sum();
        self.output_tokens = self.runs.iter().map(|r| r.output_tokens).sum();
        self.wall_seconds = self.runs.iter().map(|r| r.wall_seconds).sum();
        self.cost = self.runs.iter().map(|r| r.cost).sum();
    }
}

/// Majority vote; an even split counts as positive. `None` without votes.
pub fn majority(verdicts: &[bool]) -> Option<bool> {
    if verdicts.is_empty() {
        return None;
    }
    let yes = verdicts.iter().filter(|v| **v).count();
    Some(2 * yes >= verdicts.len())
}

/// Runs the static pipeline and the two prompts `repeats` times per unit.
pub struct Detector {
    pub cfg: LlmConfig,
    pub templates: Templates,
    pub analysis: AnalysisOptions,
    backend: Arc<dyn ChatBackend>,
    clock: Arc<dyn Clock>,
}

impl Detector {
    pub fn new(cfg: LlmConfig) -> Result<Self, BackendError> {
        let backend = cfg.make_backend()?;
        Ok(Self::with_backend(cfg, backend))
    }

    pub fn with_backend(cfg: LlmConfig, backend: Arc<dyn ChatBackend>) -> Self {
        Detector {
            cfg,
            templates: Templates::default(),
            analysis: AnalysisOptions::default(),
            backend,
            clock: Arc::new(SystemClock::default()),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_templates(mut self, templates: Templates) -> Self {
        self.templates = templates;
        self
    }

    /// Loads `path_or_address` and detects it; load failures become an
    /// ingest-phase error report with no runs.
    pub fn detect_source(
        &self,
        id: &str,
        path_or_address: &str,
        ingest: &IngestOptions,
        mode: Mode,
        repeats: usize,
    ) -> DetectionReport {
        match load_unit(id, path_or_address, ingest) {
            Ok(unit) => self.detect_unit(unit, mode, repeats),
            Err(e) => DetectionReport::failed(id, mode, &self.cfg, &self.templates, e),
        }
    }

    pub fn detect_unit(&self, unit: SourceUnit, mode: Mode, repeats: usize) -> DetectionReport {
        let id = unit.id.clone();
        match StaticAnalysis::run(unit, self.analysis) {
            Ok(analysis) => self.detect_analysis(&analysis, mode, repeats),
            Err(e) => DetectionReport::failed(&id, mode, &self.cfg, &self.templates, e),
        }
    }

    pub fn detect_analysis(&self, analysis: &StaticAnalysis, mode: Mode, repeats: usize) -> DetectionReport {
        let mut report = DetectionReport::empty(&analysis.unit.id, mode, &self.cfg, &self.templates);
        if mode != Mode::Raw && analysis.slice.is_empty() {
            // Nothing reads msg.sender or msg.value, so no participant funds
            // can be routed; the backend is not consulted.
            report.note = Some("no function touches tainted data; backend not called".into());
            report.runs = (0..repeats)
                .map(|index| RunRecord {
                    index,
                    verdict: Some(false),
                    error: None,
                    analysis_text: String::new(),
                    detection_text: String::new(),
                    input_tokens: 0,
                    output_tokens: 0,
                    wall_seconds: 0.0,
                    cost: 0.0,
                })
                .collect();
            report.finish();
            return report;
        }
        let prompt = match build_analysis_prompt(
            &self.templates,
            &analysis.slice,
            Some(&analysis.dot),
            mode,
            &analysis.unit.source_text,
        ) {
            Ok(p) => p,
            Err(e) => {
                report.error = Some(PipelineError::new(Phase::Prompt, e));
                return report;
            }
        };
        for index in 0..repeats {
            match self.run_once(index, &prompt.rendered) {
                Ok(run) => report.runs.push(run),
                Err(e) => {
                    report.error = Some(e);
                    break;
                }
            }
        }
        report.finish();
        info!(contract = %report.contract_id, verdict = ?report.final_verdict, runs = report.runs.len(), "detection finished");
        report
    }

    fn run_once(&self, index: usize, analysis_prompt: &str) -> Result<RunRecord, PipelineError> {
        let backend_err = |e: BackendError| PipelineError::new(Phase::Backend, e);
        let started = self.clock.now();
        let analysis = complete(self.backend.as_ref(), analysis_prompt, &self.cfg).map_err(backend_err)?;
        let detection_prompt =
            build_detection_prompt(&self.templates, &analysis.text, &self.templates.ponzi_definition)
                .map_err(|e| PipelineError::new(Phase::Prompt, e))?;
        let detection = complete(self.backend.as_ref(), &detection_prompt.rendered, &self.cfg).map_err(backend_err)?;
        let wall = self.clock.now().saturating_sub(started);
        let (input_tokens, output_tokens) =
            (analysis.input_tokens + detection.input_tokens, analysis.output_tokens + detection.output_tokens);
        let verdict = parse_verdict(&detection.text);
        Ok(RunRecord {
            index,
            verdict: verdict.as_ref().ok().copied(),
            error: verdict.err().map(|e| e.to_string()),
            analysis_text: analysis.text,
            detection_text: detection.text,
            input_tokens,
            output_tokens,
            wall_seconds: wall.as_secs_f64(),
            cost: self.cfg.pricing.cost(input_tokens, output_tokens),
        })
    }
}

/// Detects a single unit with a backend built from `cfg`.
pub fn detect_contract(unit: SourceUnit, cfg: &LlmConfig, mode: Mode, repeats: usize) -> DetectionReport {
    match Detector::new(cfg.clone()) {
        Ok(detector) => detector.detect_unit(unit, mode, repeats),
        Err(e) => {
            DetectionReport::failed(&unit.id, mode, cfg, &Templates::default(), PipelineError::new(Phase::Backend, e))
        }
    }
}
