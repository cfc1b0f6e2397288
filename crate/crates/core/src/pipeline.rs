//! The static half of the pipeline: load, lower, build, propagate, slice
//! and render, with errors attributed to the phase that raised them.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::hypergraph::{BuildOptions, HypernodeGraph};
use crate::ingest::{compile_source, fetch_verified_source, CompilerRegistry, FetchConfig, SourceUnit};
use crate::model::{lower, ContractModel};
use crate::render::{to_dot, DotDocument, RenderOptions};
use crate::slice::{slice_contracts, SliceBundle, SliceOptions};
use crate::taint::{default_sources, tainted_state_vars, tpa, TaintSubgraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Ingest,
    Model,
    Graph,
    Taint,
    Slice,
    Render,
    Prompt,
    Backend,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[error("{phase}: {message}")]
pub struct PipelineError {
    pub phase: Phase,
    pub message: String,
}

impl PipelineError {
    pub fn new(phase: Phase, err: impl fmt::Display) -> Self {
        PipelineError { phase, message: err.to_string() }
    }
}

/// Where compilers and explorer credentials come from.
#[derive(Debug, Default)]
pub struct IngestOptions {
    /// Discovered from `PONZILENS_SOLC_DIR` and `PATH` on first use if unset.
    pub registry: Option<CompilerRegistry>,
    pub fetch: Option<FetchConfig>,
}

impl IngestOptions {
    fn registry(&self) -> &CompilerRegistry {
        static DISCOVERED: OnceLock<CompilerRegistry> = OnceLock::new();
        self.registry.as_ref().unwrap_or_else(|| DISCOVERED.get_or_init(CompilerRegistry::discover))
    }
}

fn looks_like_address(s: &str) -> bool {
    s.len() == 42 && s.starts_with("0x") && !Path::new(s).exists()
}

/// Loads a `.ast.json` document, compiles a `.sol` file, or fetches and
/// compiles a verified contract by address.
pub fn load_unit(id: &str, path_or_address: &str, opts: &IngestOptions) -> Result<SourceUnit, PipelineError> {
    let ingest = |e| PipelineError::new(Phase::Ingest, e);
    let unit = if looks_like_address(path_or_address) {
        let cfg = opts.fetch.clone().unwrap_or_default().with_env_overrides();
        let mut unit = fetch_verified_source(path_or_address, &cfg).map_err(ingest)?;
        unit.id = id.to_string();
        unit
    } else {
        SourceUnit::from_path(id, Path::new(path_or_address)).map_err(ingest)?
    };
    if unit.ast_json.is_some() {
        return Ok(unit);
    }
    compile_source(&unit, opts.registry()).map_err(ingest)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AnalysisOptions {
    pub build: BuildOptions,
    pub slice: SliceOptions,
    pub render: RenderOptions,
}

/// Everything the static phases produce for one unit.
#[derive(Debug, Clone)]
pub struct StaticAnalysis {
    pub unit: SourceUnit,
    pub models: Vec<ContractModel>,
    pub graph: HypernodeGraph,
    pub taint: TaintSubgraph,
    pub slice: SliceBundle,
    pub dot: DotDocument,
}

impl StaticAnalysis {
    pub fn run(unit: SourceUnit, opts: AnalysisOptions) -> Result<Self, PipelineError> {
        let models = lower(&unit).map_err(|e| PipelineError::new(Phase::Model, e))?;
        let graph = HypernodeGraph::build(&models, &unit.source_text, opts.build);
        let taint = tpa(&graph, &default_sources(&graph));
        let slice = slice_contracts(&taint, &graph, &models, opts.slice);
        let dot = to_dot(&taint, &graph, opts.render);
        Ok(StaticAnalysis { unit, models, graph, taint, slice, dot })
    }

    /// Dotted names of tainted state variables.
    pub fn tainted_state_vars(&self) -> Vec<String> {
        tainted_state_vars(&self.taint, &self.graph).iter().map(ToString::to_string).collect()
    }

    pub fn summary(&self) -> Value {
        json!({
            "id": self.unit.id,
            "contracts": self.models.iter().map(|c| &c.name).collect::<Vec<_>>(),
            "functions_total": self.slice.stats.functions_total,
            "selected": self.slice.selected,
            "selected_count": self.slice.stats.selected,
            "slice_bytes": self.slice.stats.bytes,
            "source_bytes": self.unit.source_text.len(),
            "skipped_no_span": self.slice.stats.skipped_no_span,
            "tainted_state_vars": self.tainted_state_vars(),
            "taint_rounds": self.taint.rounds,
            "dot_nodes": self.dot.node_count,
            "dot_edges": self.dot.edge_count,
            "unresolved_callees": self.graph.unresolved().len(),
        })
    }
}
