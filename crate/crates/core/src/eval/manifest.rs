use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Ponzi,
    NonPonzi,
}

impl Label {
    pub fn is_ponzi(self) -> bool {
        self == Label::Ponzi
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.is_ponzi() { "ponzi" } else { "non_ponzi" })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ponzi" | "1" | "true" => Ok(Label::Ponzi),
            "non_ponzi" | "non-ponzi" | "nonponzi" | "0" | "false" => Ok(Label::NonPonzi),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path_or_address: String,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
struct RawEntry {
    id: String,
    path_or_address: String,
    label: String,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, entries: Vec<ManifestEntry>) -> Result<Self, EvalError> {
        let m = DatasetManifest { name: name.into(), entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.id.is_empty() {
                return Err(EvalError::Manifest("entry with an empty id".into()));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(EvalError::DuplicateId(e.id.clone()));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads a CSV (`id,path_or_address,label` header) or line-delimited
    /// JSON manifest, chosen by extension. Relative paths are resolved
    /// against the manifest's directory; addresses are kept as written.
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        let jsonl = matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json" | "ndjson"));
        let raw = if jsonl { parse_jsonl(&text)? } else { parse_csv(&text)? };
        let base = path.parent().unwrap_or(Path::new(""));
        let entries = raw
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let label = r.label.parse().map_err(|e| EvalError::Manifest(format!("entry {}: {e}", i + 1)))?;
                Ok(ManifestEntry { path_or_address: resolve(base, &r.path_or_address), id: r.id, label })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(name, entries)
    }
}

fn resolve(base: &Path, p: &str) -> String {
    let is_address = p.len() == 42 && p.starts_with("0x");
    if is_address || Path::new(p).is_absolute() {
        p.to_string()
    } else {
        base.join(p).display().to_string()
    }
}

fn parse_csv(text: &str) -> Result<Vec<RawEntry>, EvalError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
    reader.deserialize().map(|r| r.map_err(|e| EvalError::Manifest(e.to_string()))).collect()
}

fn parse_jsonl(text: &str) -> Result<Vec<RawEntry>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EvalError::Manifest(format!("line {}: {e}", i + 1))))
        .collect()
}
