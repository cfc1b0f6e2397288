//! Getting Solidity source and its compiler AST into a [`SourceUnit`].
//!
//! Units come from `.sol` files (compiled with a host `solc`), from
//! pre-generated `.ast.json` documents, or from a block explorer's
//! verified-source endpoint.

mod compiler;
mod explorer;

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub use compiler::{
    compile_source, is_supported, known_releases, CompilerBinary, CompilerPolicy, CompilerRegistry, VersionRequirement,
    MAX_SUPPORTED, MIN_SUPPORTED,
};
pub use explorer::{
    fetch_verified_source, flatten_sources, validate_address, ExplorerClient, FetchConfig, RateLimiter,
    ETHERSCAN_KEY_ENV,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("no installed compiler satisfies `{0}`")]
    CompilerNotFound(String),
    #[error("compilation failed:\n{0}")]
    CompileError(String),
    #[error("pragma `{0}` is outside the supported range 0.4.11 - 0.8.23")]
    UnsupportedVersion(String),
    #[error("malformed AST: {0}")]
    MalformedAst(String),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid address `{0}`: expected 40 hex characters")]
    InvalidAddress(String),
    #[error("invalid fetch configuration: {0}")]
    InvalidConfig(String),
    #[error("contract {0} has no verified source")]
    NotVerified(String),
    #[error("explorer rate limit hit{}", .retry_after.map(|s| format!(" (retry after {s:.1}s)")).unwrap_or_default())]
    RateLimited { retry_after: Option<f64> },
    #[error("network error: {0}")]
    Network(String),
    #[error("explorer rejected the API key: {0}")]
    Auth(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One Solidity compilation unit: source text, its pragma and (once
/// compiled or loaded) the compiler's JSON AST.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SourceUnit {
    pub id: String,
    pub path_or_address: String,
    pub source_text: String,
    pub pragma_version: Option<String>,
    /// False when the pragma admits no release in 0.4.11 - 0.8.23.
    pub supported: bool,
    pub compiler_version: Option<String>,
    /// Normalised AST document: `{"sources": {name: {"id": n, "ast": {...}}}}`.
    pub ast_json: Option<Value>,
    /// AST source index -> byte offset of that file inside `source_text`.
    #[serde(default)]
    pub file_offsets: BTreeMap<i64, usize>,
}

impl SourceUnit {
    pub fn from_source(
        id: impl Into<String>,
        path_or_address: impl Into<String>,
        source_text: impl Into<String>,
    ) -> Self {
        let source_text = source_text.into();
        let pragma_version = extract_pragma(&source_text);
        let supported = pragma_version.as_deref().is_none_or(is_supported);
        SourceUnit {
            id: id.into(),
            path_or_address: path_or_address.into(),
            source_text,
            pragma_version,
            supported,
            compiler_version: None,
            ast_json: None,
            file_offsets: BTreeMap::new(),
        }
    }

    /// Reads a `.sol` file or a `.ast.json` fixture, picking the loader by
    /// extension.
    pub fn from_path(id: impl Into<String>, path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
        let id = id.into();
        let display = path.display().to_string();
        if display.ends_with(".json") {
            let mut unit = load_ast(&text)?;
            unit.id = id;
            unit.path_or_address = display;
            Ok(unit)
        } else {
            Ok(SourceUnit::from_source(id, display, text))
        }
    }

    /// Source file name used when handing the unit to a compiler.
    pub fn file_name(&self) -> String {
        Path::new(&self.path_or_address)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".sol"))
            .unwrap_or_else(|| "input.sol".to_string())
    }

    /// `(name, source index, AST root)` for every file in the AST document.
    pub fn ast_sources(&self) -> Vec<(String, i64, &Value)> {
        let Some(sources) = self.ast_json.as_ref().and_then(|d| d.get("sources")).and_then(Value::as_object) else {
            return Vec::new();
        };
        sources
            .iter()
            .filter_map(|(name, entry)| {
                let ast = entry.get("ast")?;
                let id = entry.get("id").and_then(Value::as_i64).unwrap_or(0);
                Some((name.clone(), id, ast))
            })
            .collect()
    }

    /// Maps a compiler `src` triple to a byte range of `source_text`.
    pub fn resolve_src(&self, start: usize, length: usize, file: i64) -> Option<(usize, usize)> {
        let base = match self.file_offsets.get(&file) {
            Some(base) => *base,
            None if self.file_offsets.is_empty() && file == 0 => 0,
            None => return None,
        };
        let offset = base + start;
        (offset + length <= self.source_text.len()).then_some((offset, length))
    }

    /// Number of `contract` / `library` / `interface` definitions in the AST.
    pub fn contract_count(&self) -> usize {
        self.ast_sources()
            .iter()
            .filter_map(|(_, _, ast)| ast.get("nodes").and_then(Value::as_array))
            .flatten()
            .filter(|n| n.get("nodeType").and_then(Value::as_str) == Some("ContractDefinition"))
            .count()
    }
}

pub fn extract_pragma(source: &str) -> Option<String> {
    let re = Regex::new(r"pragma\s+solidity\s+([^;]+);").expect("static regex");
    re.captures(source).map(|c| c[1].trim().to_string())
}

/// Parses an AST document into a [`SourceUnit`].
///
/// Accepted shapes: the compiler's standard-JSON output (optionally with a
/// `content` string next to each source's `ast`, as the checked-in fixtures
/// carry), or a bare `SourceUnit` AST node.
pub fn load_ast(document: &str) -> Result<SourceUnit, IngestError> {
    let doc: Value = serde_json::from_str(document)?;
    let compiler_version = doc.get("compiler").and_then(Value::as_str).map(str::to_string);

    let mut entries: Vec<(String, i64, Value, Option<String>)> = Vec::new();
    if let Some(sources) = doc.get("sources").and_then(Value::as_object) {
        for (name, entry) in sources {
            let ast = entry
                .get("ast")
                .or_else(|| entry.get("legacyAST"))
                .ok_or_else(|| IngestError::MalformedAst(format!("source `{name}` has no `ast`")))?;
            let id = entry.get("id").and_then(Value::as_i64).unwrap_or(entries.len() as i64);
            let content = entry.get("content").and_then(Value::as_str).map(str::to_string);
            entries.push((name.clone(), id, ast.clone(), content));
        }
    } else if doc.get("nodeType").and_then(Value::as_str) == Some("SourceUnit") {
        let name = doc.get("absolutePath").and_then(Value::as_str).unwrap_or("input.sol").to_string();
        entries.push((name, 0, doc.clone(), None));
    }
    if entries.is_empty() {
        return Err(IngestError::MalformedAst("document contains no SourceUnit".into()));
    }
    for (name, _, ast, _) in &entries {
        if ast.get("nodeType").and_then(Value::as_str) != Some("SourceUnit") {
            return Err(IngestError::MalformedAst(format!("`{name}` root is not a SourceUnit node")));
        }
        if !ast.get("nodes").is_some_and(Value::is_array) {
            return Err(IngestError::MalformedAst(format!("`{name}` SourceUnit has no `nodes` list")));
        }
    }
    entries.sort_by_key(|e| e.1);

    let mut source_text = String::new();
    let mut file_offsets = BTreeMap::new();
    let mut normalised = Map::new();
    for (name, id, ast, content) in entries {
        if let Some(content) = content {
            file_offsets.insert(id, source_text.len());
            source_text.push_str(&content);
        }
        normalised.insert(name, json!({ "id": id, "ast": ast }));
    }
    let first_name = normalised.keys().next().cloned().unwrap_or_default();
    let pragma_version = extract_pragma(&source_text).or_else(|| pragma_from_ast(&normalised));
    let supported = pragma_version.as_deref().is_none_or(is_supported);
    Ok(SourceUnit {
        id: first_name.trim_end_matches(".sol").to_string(),
        path_or_address: first_name,
        source_text,
        pragma_version,
        supported,
        compiler_version,
        ast_json: Some(json!({ "sources": normalised })),
        file_offsets,
    })
}

fn pragma_from_ast(sources: &Map<String, Value>) -> Option<String> {
    sources.values().find_map(|entry| {
        let nodes = entry.get("ast")?.get("nodes")?.as_array()?;
        nodes.iter().find_map(|n| {
            if n.get("nodeType")?.as_str()? != "PragmaDirective" {
                return None;
            }
            let literals: Vec<&str> = n.get("literals")?.as_array()?.iter().filter_map(Value::as_str).collect();
            (literals.first() == Some(&"solidity")).then(|| join_pragma_literals(&literals[1..]))
        })
    })
}

// The compiler splits `>=0.4.22 <0.9.0` into tokens; re-insert the spaces
// between comparators.
fn join_pragma_literals(tokens: &[&str]) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        let is_op = tok.chars().all(|c| matches!(c, '^' | '~' | '>' | '<' | '=' | '|'));
        if i > 0
            && (is_op
                || tok.starts_with(|c: char| c.is_ascii_digit()) && !out.ends_with(['^', '~', '>', '<', '=', '.']))
        {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(name: &str) -> String {
        std::fs::read_to_string(format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
    }

    #[test]
    fn empty_document_is_malformed() {
        assert!(matches!(load_ast("{}"), Err(IngestError::MalformedAst(_))));
        assert!(matches!(load_ast("{not json"), Err(IngestError::Json(_))));
        assert!(matches!(
            load_ast(r#"{"sources":{"a.sol":{"ast":{"nodeType":"Block"}}}}"#),
            Err(IngestError::MalformedAst(_))
        ));
    }

    #[test]
    fn loads_doubler_fixture_with_source_text() {
        let unit = load_ast(&fixture("doubler_ponzi.ast.json")).unwrap();
        assert_eq!(unit.contract_count(), 1);
        assert!(unit.source_text.contains("function enter()"));
        assert_eq!(unit.pragma_version.as_deref(), Some("^0.4.11"));
        assert!(unit.supported);
        assert_eq!(unit.compiler_version.as_deref(), Some("0.4.26"));
    }

    #[test]
    fn bare_source_unit_node_is_accepted() {
        let doc: Value = serde_json::from_str(&fixture("view_only.ast.json")).unwrap();
        let bare = doc["sources"]["view_only.sol"]["ast"].to_string();
        let unit = load_ast(&bare).unwrap();
        assert_eq!(unit.contract_count(), 1);
        assert!(unit.source_text.is_empty());
        assert_eq!(unit.pragma_version.as_deref(), Some("^0.8.0"));
    }

    #[test]
    fn pragma_tokens_rejoin() {
        assert_eq!(join_pragma_literals(&["^", "0.4", ".11"]), "^0.4.11");
        assert_eq!(join_pragma_literals(&[">=", "0.4", ".22", "<", "0.9", ".0"]), ">=0.4.22 <0.9.0");
        assert_eq!(join_pragma_literals(&["0.8", ".23"]), "0.8.23");
    }

    #[test]
    fn unsupported_pragma_is_flagged() {
        let unit = SourceUnit::from_source("x", "x.sol", "pragma solidity ^0.3.6;\ncontract A {}");
        assert!(!unit.supported);
        let unit = SourceUnit::from_source("y", "y.sol", "pragma solidity >=0.4.22 <0.9.0;\ncontract A {}");
        assert!(unit.supported);
    }
}
