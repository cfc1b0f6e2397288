use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Mode;
use crate::render::DotDocument;
use crate::slice::SliceBundle;

const BUILTIN_VERSION: &str = include_str!("../../templates/v1/VERSION");
const BUILTIN_ANALYSIS: &str = include_str!("../../templates/v1/analysis.txt");
const BUILTIN_TAINT_SECTION: &str = include_str!("../../templates/v1/taint_graph_section.txt");
const BUILTIN_TAINT_BLOCK: &str = include_str!("../../templates/v1/taint_graph_block.txt");
const BUILTIN_DETECTION: &str = include_str!("../../templates/v1/detection.txt");
const BUILTIN_DEFINITION: &str = include_str!("../../templates/v1/ponzi_definition.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("empty prompt input: {0}")]
    EmptyInput(&'static str),
    #[error("cannot read template {path}: {source}")]
    Template {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Analysis,
    Detection,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptParts {
    pub code: Option<String>,
    pub taint_dot: Option<String>,
    pub prior_analysis: Option<String>,
    pub ponzi_definition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub stage: Stage,
    pub rendered: String,
    pub parts: PromptParts,
    pub token_estimate: u64,
    pub template_version: String,
}

/// Rough token count: one token per four bytes, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

/// Prompt templates. `{name}` placeholders are substituted in one pass, so
/// substituted text is never re-expanded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub version: String,
    pub analysis: String,
    pub taint_section: String,
    pub taint_block: String,
    pub detection: String,
    pub ponzi_definition: String,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            version: BUILTIN_VERSION.trim().to_string(),
            analysis: BUILTIN_ANALYSIS.to_string(),
            taint_section: BUILTIN_TAINT_SECTION.to_string(),
            taint_block: BUILTIN_TAINT_BLOCK.to_string(),
            detection: BUILTIN_DETECTION.to_string(),
            ponzi_definition: BUILTIN_DEFINITION.to_string(),
        }
    }
}

impl Templates {
    /// Loads templates from `dir`; files that are absent keep the built-in
    /// text. The version is read from `VERSION`, defaulting to `custom`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str, fallback: &str| -> Result<String, PromptError> {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(text) => Ok(text),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(fallback.to_string()),
                Err(source) => Err(PromptError::Template { path: path.display().to_string(), source }),
            }
        };
        if !dir.is_dir() {
            return Err(PromptError::Template {
                path: dir.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
            });
        }
        let builtin = Templates::default();
        Ok(Templates {
            version: read("VERSION", "custom")?.trim().to_string(),
            analysis: read("analysis.txt", &builtin.analysis)?,
            taint_section: read("taint_graph_section.txt", &builtin.taint_section)?,
            taint_block: read("taint_graph_block.txt", &builtin.taint_block)?,
            detection: read("detection.txt", &builtin.detection)?,
            ponzi_definition: read("ponzi_definition.txt", &builtin.ponzi_definition)?,
        })
    }
}

/// Replaces `{key}` placeholders with their values; unknown placeholders
/// and stray braces are kept as written.
pub fn substitute(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let value = close.and_then(|c| {
            let key = &after[..c];
            values.iter().find(|(k, _)| *k == key).map(|(_, v)| (*v, c))
        });
        match value {
            Some((v, c)) => {
                out.push_str(v);
                rest = &after[c + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// First-stage prompt. Full mode sends the slice (with its declaration
/// header) and the DOT graph, no-taint mode the slice only, raw mode the
/// whole source.
pub fn build_analysis_prompt(
    templates: &Templates,
    bundle: &SliceBundle,
    dot: Option<&DotDocument>,
    mode: Mode,
    raw_source: &str,
) -> Result<PromptBundle, PromptError> {
    let code = match mode {
        Mode::Raw => raw_source.to_string(),
        Mode::Full | Mode::NoTaint => bundle.prompt_code(),
    };
    if code.trim().is_empty() {
        return Err(PromptError::EmptyInput("no code to analyse"));
    }
    let taint_dot = match mode {
        Mode::Full => Some(dot.ok_or(PromptError::EmptyInput("full mode needs a taint graph"))?.text.clone()),
        Mode::NoTaint | Mode::Raw => None,
    };
    let (section, block) = match &taint_dot {
        Some(dot) => (templates.taint_section.clone(), substitute(&templates.taint_block, &[("dot", dot.trim_end())])),
        None => (String::new(), String::new()),
    };
    let rendered = substitute(
        &templates.analysis,
        &[("code", code.trim_end()), ("taint_section", &section), ("taint_graph", &block)],
    );
    Ok(PromptBundle {
        stage: Stage::Analysis,
        token_estimate: estimate_tokens(&rendered),
        rendered,
        parts: PromptParts { code: Some(code), taint_dot, ..Default::default() },
        template_version: templates.version.clone(),
    })
}

/// Second-stage prompt: the definition, the first-stage analysis, and the
/// instruction to answer `true` or `false`.
pub fn build_detection_prompt(
    templates: &Templates,
    analysis: &str,
    ponzi_definition: &str,
) -> Result<PromptBundle, PromptError> {
    if analysis.trim().is_empty() {
        return Err(PromptError::EmptyInput("analysis text is empty"));
    }
    if ponzi_definition.trim().is_empty() {
        return Err(PromptError::EmptyInput("Ponzi definition is empty"));
    }
    let rendered = substitute(
        &templates.detection,
        &[("ponzi_definition", ponzi_definition.trim()), ("analysis", analysis.trim())],
    );
    Ok(PromptBundle {
        stage: Stage::Detection,
        token_estimate: estimate_tokens(&rendered),
        rendered,
        parts: PromptParts {
            prior_analysis: Some(analysis.to_string()),
            ponzi_definition: Some(ponzi_definition.to_string()),
            ..Default::default()
        },
        template_version: templates.version.clone(),
    })
}
