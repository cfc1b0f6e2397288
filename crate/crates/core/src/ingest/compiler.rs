use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use semver::{Version, VersionReq};
use serde_json::{json, Value};

use super::{IngestError, SourceUnit};

pub const MIN_SUPPORTED: Version = Version::new(0, 4, 11);
pub const MAX_SUPPORTED: Version = Version::new(0, 8, 23);

/// Every solc release between 0.4.11 and 0.8.23.
pub fn known_releases() -> Vec<Version> {
    let series: [(u64, u64, u64); 5] = [(4, 11, 26), (5, 0, 17), (6, 0, 12), (7, 0, 6), (8, 0, 23)];
    series.iter().flat_map(|&(minor, lo, hi)| (lo..=hi).map(move |patch| Version::new(0, minor, patch))).collect()
}

/// A Solidity version pragma, e.g. `^0.4.11` or `>=0.4.22 <0.9.0 || 0.8.0`.
#[derive(Debug, Clone)]
pub struct VersionRequirement {
    raw: String,
    alternatives: Vec<VersionReq>,
    /// The first full `x.y.z` named in the pragma.
    named: Option<Version>,
}

impl VersionRequirement {
    pub fn parse(raw: &str) -> Option<Self> {
        let mut alternatives = Vec::new();
        let mut named = None;
        for alt in raw.split("||") {
            let mut comparators = Vec::new();
            let mut pending_op = String::new();
            for tok in alt.split_whitespace() {
                if tok.chars().all(|c| matches!(c, '^' | '~' | '>' | '<' | '=')) {
                    pending_op.push_str(tok);
                    continue;
                }
                let tok = format!("{pending_op}{tok}");
                pending_op.clear();
                let version_part = tok.trim_start_matches(['^', '~', '>', '<', '=']);
                let op = &tok[..tok.len() - version_part.len()];
                if named.is_none() {
                    named = Version::parse(version_part).ok();
                }
                // A bare version is an exact pin in Solidity, a caret in semver.
                let op = if op.is_empty() && version_part != "*" { "=" } else { op };
                comparators.push(format!("{op}{version_part}"));
            }
            if comparators.is_empty() {
                continue;
            }
            alternatives.push(VersionReq::parse(&comparators.join(", ")).ok()?);
        }
        (!alternatives.is_empty()).then(|| VersionRequirement { raw: raw.trim().to_string(), alternatives, named })
    }

    pub fn matches(&self, v: &Version) -> bool {
        self.alternatives.iter().any(|req| req.matches(v))
    }

    pub fn named_version(&self) -> Option<&Version> {
        self.named.as_ref()
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }
}

/// Whether some release in the supported window satisfies `pragma`.
pub fn is_supported(pragma: &str) -> bool {
    match VersionRequirement::parse(pragma) {
        Some(req) => known_releases().iter().any(|v| req.matches(v)),
        None => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompilerBinary {
    pub version: Version,
    pub path: PathBuf,
}

/// How to pick a compiler for a unit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum CompilerPolicy {
    /// The version named in the pragma if installed, else the highest
    /// installed version the pragma admits.
    #[default]
    FromPragma,
    Pinned(Version),
}

/// Installed compilers, usually discovered from `$PONZILENS_SOLC_DIR`.
#[derive(Debug, Clone, Default)]
pub struct CompilerRegistry {
    compilers: Vec<CompilerBinary>,
    pub policy: CompilerPolicy,
}

pub const SOLC_DIR_ENV: &str = "PONZILENS_SOLC_DIR";

impl CompilerRegistry {
    pub fn new(mut compilers: Vec<CompilerBinary>) -> Self {
        compilers.sort_by(|a, b| a.version.cmp(&b.version));
        compilers.dedup_by(|a, b| a.version == b.version);
        CompilerRegistry { compilers, policy: CompilerPolicy::default() }
    }

    pub fn compilers(&self) -> &[CompilerBinary] {
        &self.compilers
    }

    /// Compilers from `$PONZILENS_SOLC_DIR` plus any `solc` on `PATH`.
    pub fn discover() -> Self {
        let mut found = Vec::new();
        if let Some(dir) = std::env::var_os(SOLC_DIR_ENV) {
            found.extend(Self::scan_dir(Path::new(&dir)).compilers);
        }
        if let Some(paths) = std::env::var_os("PATH") {
            for dir in std::env::split_paths(&paths) {
                let candidate = dir.join("solc");
                if candidate.is_file() {
                    if let Some(version) = query_version(&candidate) {
                        found.push(CompilerBinary { version, path: candidate });
                    }
                }
            }
        }
        Self::new(found)
    }

    /// Finds executables named `solc-<version>` or `solc-v<version>`, either
    /// directly in `dir` or one level down (the solc-select layout).
    pub fn scan_dir(dir: &Path) -> Self {
        let mut found = Vec::new();
        let Ok(entries) = std::fs::read_dir(dir) else {
            return Self::default();
        };
        for entry in entries.flatten() {
            let path = entry.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(version) = version_from_name(name) else { continue };
            let binary = if path.is_dir() { path.join(name) } else { path.clone() };
            if binary.is_file() {
                found.push(CompilerBinary { version, path: binary });
            }
        }
        Self::new(found)
    }

    pub fn resolve(&self, pragma: Option<&str>) -> Result<&CompilerBinary, IngestError> {
        let in_window = |c: &&CompilerBinary| c.version >= MIN_SUPPORTED && c.version <= MAX_SUPPORTED;
        if let CompilerPolicy::Pinned(v) = &self.policy {
            return self
                .compilers
                .iter()
                .find(|c| &c.version == v)
                .ok_or_else(|| IngestError::CompilerNotFound(format!("={v}")));
        }
        let Some(raw) = pragma else {
            return self
                .compilers
                .iter()
                .rev()
                .find(in_window)
                .ok_or_else(|| IngestError::CompilerNotFound("any".into()));
        };
        let req = VersionRequirement::parse(raw).ok_or_else(|| IngestError::UnsupportedVersion(raw.to_string()))?;
        if !known_releases().iter().any(|v| req.matches(v)) {
            return Err(IngestError::UnsupportedVersion(raw.to_string()));
        }
        if let Some(named) = req.named_version() {
            if let Some(exact) =
                self.compilers.iter().filter(in_window).find(|c| &c.version == named && req.matches(named))
            {
                return Ok(exact);
            }
        }
        self.compilers
            .iter()
            .rev()
            .filter(in_window)
            .find(|c| req.matches(&c.version))
            .ok_or_else(|| IngestError::CompilerNotFound(raw.to_string()))
    }
}

fn version_from_name(name: &str) -> Option<Version> {
    let rest = name.strip_prefix("solc-")?;
    let rest = rest.strip_prefix('v').unwrap_or(rest);
    let rest = rest.split('+').next()?;
    Version::parse(rest.trim_end_matches(".exe")).ok()
}

fn query_version(binary: &Path) -> Option<Version> {
    let out = Command::new(binary).arg("--version").output().ok()?;
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().find(|l| l.starts_with("Version:"))?;
    let v = line.trim_start_matches("Version:").trim();
    Version::parse(v.split(['+', '-']).next()?).ok()
}

/// Compiles `unit` with a matching installed compiler and fills in its AST.
pub fn compile_source(unit: &SourceUnit, registry: &CompilerRegistry) -> Result<SourceUnit, IngestError> {
    if unit.source_text.trim().is_empty() {
        return Err(IngestError::CompileError("source file is empty".into()));
    }
    if !unit.supported {
        return Err(IngestError::UnsupportedVersion(unit.pragma_version.clone().unwrap_or_default()));
    }
    let compiler = registry.resolve(unit.pragma_version.as_deref())?;
    let file = unit.file_name();
    let request = json!({
        "language": "Solidity",
        "sources": { &file: { "content": unit.source_text } },
        "settings": { "outputSelection": { "*": { "": ["ast"] } } }
    });

    let mut child = Command::new(&compiler.path)
        .arg("--standard-json")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| IngestError::CompilerNotFound(format!("{} ({e})", compiler.path.display())))?;
    child
        .stdin
        .take()
        .expect("piped stdin")
        .write_all(request.to_string().as_bytes())
        .map_err(|source| IngestError::Io { path: compiler.path.display().to_string(), source })?;
    let output = child
        .wait_with_output()
        .map_err(|source| IngestError::Io { path: compiler.path.display().to_string(), source })?;
    if !output.status.success() {
        return Err(IngestError::CompileError(String::from_utf8_lossy(&output.stderr).into_owned()));
    }

    let result: Value = serde_json::from_slice(&output.stdout)
        .map_err(|e| IngestError::CompileError(format!("compiler produced invalid JSON: {e}")))?;
    let errors: Vec<String> = result
        .get("errors")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .filter(|e| e.get("severity").and_then(Value::as_str) == Some("error"))
        .map(|e| {
            e.get("formattedMessage")
                .or_else(|| e.get("message"))
                .and_then(Value::as_str)
                .unwrap_or("unknown error")
                .to_string()
        })
        .collect();
    if !errors.is_empty() {
        return Err(IngestError::CompileError(errors.join("\n")));
    }
    let entry = result
        .get("sources")
        .and_then(|s| s.get(&file))
        .ok_or_else(|| IngestError::CompileError("compiler output has no AST for the input".into()))?;
    let id = entry.get("id").and_then(Value::as_i64).unwrap_or(0);
    let ast = entry
        .get("ast")
        .cloned()
        .ok_or_else(|| IngestError::CompileError("compiler output has no AST for the input".into()))?;

    let mut compiled = unit.clone();
    compiled.compiler_version = Some(compiler.version.to_string());
    compiled.ast_json = Some(json!({ "sources": { file: { "id": id, "ast": ast } } }));
    compiled.file_offsets = [(id, 0)].into_iter().collect();
    Ok(compiled)
}
