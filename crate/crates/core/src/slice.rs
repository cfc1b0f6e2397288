//! Function-level slicing: keep the functions that read or write tainted
//! data and concatenate their source text.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use indexmap::IndexMap;
use regex::Regex;
use serde::Serialize;

use crate::hypergraph::{Endpoint, HypernodeGraph, NodeId};
use crate::model::{ContractModel, FunctionModel, Scope, Span, VarRef};
use crate::taint::{tainted_state_vars, TaintSubgraph};

pub const SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy)]
pub struct SliceOptions {
    /// Keep every constructor of a contract that has a tainted state variable.
    pub include_constructors: bool,
}

impl Default for SliceOptions {
    fn default() -> Self {
        SliceOptions { include_constructors: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SliceStats {
    pub functions_total: usize,
    pub selected: usize,
    pub bytes: usize,
    /// Qualifying functions without source text (synthesised constructors).
    pub skipped_no_span: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SliceBundle {
    /// `Contract.function` ids in source order, one per distinct source text.
    pub selected: Vec<String>,
    /// Qualifying ids whose text is already covered by a selected id
    /// (inherited copies), mapped to that id.
    pub aliases: BTreeMap<String, String>,
    /// Declarations the selected functions refer to; kept apart from
    /// `combined_text` and prepended when prompting.
    pub header: String,
    pub combined_text: String,
    pub per_function: IndexMap<String, String>,
    pub stats: SliceStats,
}

impl SliceBundle {
    pub fn is_empty(&self) -> bool {
        self.combined_text.is_empty()
    }

    /// Header followed by the combined slice, as it goes into a prompt.
    pub fn prompt_code(&self) -> String {
        match (self.header.is_empty(), self.combined_text.is_empty()) {
            (_, true) => String::new(),
            (true, false) => self.combined_text.clone(),
            (false, false) => format!("{}{SEPARATOR}{}", self.header, self.combined_text),
        }
    }

    /// Writes `<id>.sol` per function plus `header.sol` and `combined.sol`.
    pub fn emit(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (id, text) in &self.per_function {
            let file = id.replace(['(', ')', ',', '@'], "_");
            fs::write(dir.join(format!("{file}.sol")), text)?;
        }
        fs::write(dir.join("header.sol"), &self.header)?;
        fs::write(dir.join("combined.sol"), &self.combined_text)
    }
}

pub fn qualified(contract: &str, function: &str) -> String {
    format!("{contract}.{function}")
}

fn node_id(contract: &ContractModel, f: &FunctionModel, v: &VarRef) -> NodeId {
    match v.scope {
        Scope::State => NodeId::new([contract.name.as_str(), v.name.as_str()]),
        _ => NodeId::new([contract.name.as_str(), f.name.as_str(), v.name.as_str()]),
    }
}

/// Whether any variable `f` reads or writes is tainted.
pub fn touches_taint(t: &TaintSubgraph, h: &HypernodeGraph, contract: &ContractModel, f: &FunctionModel) -> bool {
    f.referenced_vars()
        .into_iter()
        .filter_map(|v| h.find_node(&node_id(contract, f, v)))
        .any(|n| t.is_tainted(Endpoint::Node(n)))
}

/// Qualified ids of every function touching tainted data, in model order,
/// plus constructors of contracts with tainted state when enabled.
pub fn select_functions(
    t: &TaintSubgraph,
    h: &HypernodeGraph,
    models: &[ContractModel],
    opts: SliceOptions,
) -> Vec<String> {
    let tainted_state = tainted_state_vars(t, h);
    let mut out = Vec::new();
    for c in models {
        let state_tainted = tainted_state.iter().any(|id| id.0.first() == Some(&c.name));
        for f in &c.functions {
            if touches_taint(t, h, c, f) || (opts.include_constructors && state_tainted && f.is_constructor()) {
                out.push(qualified(&c.name, &f.name));
            }
        }
    }
    out
}

/// Builds the bundle for `ids`, deduplicating by id and by source span and
/// ordering by source position.
pub fn combine_slices(ids: &[String], h: &HypernodeGraph) -> SliceBundle {
    let mut bundle = SliceBundle::default();
    let mut seen_ids = BTreeSet::new();
    let mut spans: Vec<(Span, String)> = Vec::new();
    let mut by_span: BTreeMap<Span, String> = BTreeMap::new();
    for id in ids {
        if !seen_ids.insert(id.as_str()) {
            continue;
        }
        let graph = id.split_once('.').and_then(|(c, f)| h.find_graph(&[c, f]));
        let span = graph.and_then(|g| h.span_of(Endpoint::Graph(g))).filter(|s| s.text(h.source_text()).is_some());
        match span {
            None => bundle.stats.skipped_no_span.push(id.clone()),
            Some(span) => match by_span.get(&span) {
                Some(kept) => {
                    bundle.aliases.insert(id.clone(), kept.clone());
                }
                None => {
                    by_span.insert(span, id.clone());
                    spans.push((span, id.clone()));
                }
            },
        }
    }
    spans.sort_by_key(|(span, _)| span.offset);
    for (span, id) in spans {
        let text = span.text(h.source_text()).unwrap_or_default().to_string();
        bundle.selected.push(id.clone());
        bundle.per_function.insert(id, text);
    }
    bundle.combined_text = bundle.per_function.values().map(String::as_str).collect::<Vec<_>>().join(SEPARATOR);
    bundle.stats.selected = bundle.selected.len();
    bundle.stats.bytes = bundle.combined_text.len();
    bundle
}

/// Selection, combination and declaration header in one step.
pub fn slice_contracts(
    t: &TaintSubgraph,
    h: &HypernodeGraph,
    models: &[ContractModel],
    opts: SliceOptions,
) -> SliceBundle {
    let ids = select_functions(t, h, models, opts);
    let mut bundle = combine_slices(&ids, h);
    bundle.stats.functions_total = models.iter().map(|c| c.functions.len()).sum();
    bundle.header = header(&bundle, h.source_text(), models);
    bundle
}

/// State variables referenced by selected functions, and the structs,
/// events and modifiers whose names appear in the selected text.
fn header(bundle: &SliceBundle, source: &str, models: &[ContractModel]) -> String {
    let selected: BTreeSet<&str> = bundle.selected.iter().chain(bundle.aliases.keys()).map(String::as_str).collect();
    let mut seen: BTreeSet<Span> = BTreeSet::new();
    let mut blocks = Vec::new();
    for c in models {
        let functions: Vec<&FunctionModel> =
            c.functions.iter().filter(|f| selected.contains(qualified(&c.name, &f.name).as_str())).collect();
        if functions.is_empty() {
            continue;
        }
        let text: String =
            functions.iter().filter_map(|f| f.source_span.and_then(|s| s.text(source))).collect::<Vec<_>>().join("\n");
        let mentioned = |name: &str| {
            Regex::new(&format!(r"\b{}\b", regex::escape(name))).map(|re| re.is_match(&text)).unwrap_or(false)
        };
        let used_state: BTreeSet<&str> = functions
            .iter()
            .flat_map(|f| f.referenced_vars())
            .filter(|v| v.scope == Scope::State)
            .map(|v| v.name.as_str())
            .collect();

        let mut lines = Vec::new();
        let mut take = |span: Option<Span>, terminate: bool| {
            let Some(span) = span else { return };
            if !seen.insert(span) {
                return;
            }
            if let Some(t) = span.text(source) {
                let mut line = t.to_string();
                if terminate && !line.trim_end().ends_with(';') {
                    line.push(';');
                }
                lines.push(line);
            }
        };
        let state_types: Vec<&str> = c
            .state_vars
            .iter()
            .filter(|v| used_state.contains(v.name.as_str()))
            .map(|v| v.type_name.as_str())
            .collect();
        let typed = |name: &str| {
            state_types.iter().any(|t| t.split(|ch: char| !ch.is_alphanumeric() && ch != '_').any(|w| w == name))
        };
        for s in c.structs.iter().filter(|s| mentioned(&s.name) || typed(&s.name)) {
            take(s.span, false);
        }
        for v in c.state_vars.iter().filter(|v| used_state.contains(v.name.as_str())) {
            take(v.span, true);
        }
        for e in c.events.iter().filter(|e| mentioned(&e.name)) {
            take(e.span, true);
        }
        for m in c.modifiers.iter().filter(|m| mentioned(&m.name)) {
            take(m.span, false);
        }
        if !lines.is_empty() {
            blocks.push(format!("// {} declarations\n{}", c.name, lines.join("\n")));
        }
    }
    blocks.join(SEPARATOR)
}
