//! The Think–Act runtime: the action grammar, pipeline configuration and
//! execution traces shared by the two grounding executors.
//!
//! A grounding run is a sequence of steps, each a *thought* (free text), an
//! *action* (one of the three [`AgentAction`] shapes) and an *observation*
//! (the dispatcher's reply). [`runtime::run_scripted`] drives the thirteen
//! pipeline stages itself and is fully deterministic; [`runtime::run_react`]
//! lets a planner chat model choose the actions, parsing each reply with
//! [`parse_action`]. Both record every step in an [`AgentTrace`] together
//! with the configuration in force at that moment, so threshold fallbacks
//! stay auditable after the fact.
//!
//! The planner-facing assets live in the submodules: [`skill`] bundles the
//! expert skill document (the pipeline's standard operating procedure) and
//! [`registry`] the tool specifications the dispatcher validates against.

pub mod registry;
pub mod runtime;
pub mod skill;

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expansion::{DbscanConfig, ExpansionError, SorConfig};
use crate::semantic::SemanticError;

pub use registry::{RegistryError, ToolRegistry, ToolSpec};
pub use runtime::{dispatch, run_react, run_scripted, system_prompt, GroundingRun, ToolContext};
pub use skill::SkillDocument;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("planner unavailable: {0}")]
    Planner(#[source] SemanticError),
    #[error("artifact write failed: {0}")]
    Artifact(#[from] ExpansionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Pipeline configuration
// ---------------------------------------------------------------------------

/// Every knob of a grounding run. The detector threshold is the only field
/// the run itself may change: a coarse-filter fallback lowers it to
/// `fallback_threshold`, and from then on every thresholded step uses the
/// lowered value (the skill's Threshold Consistency rule).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Detector confidence cut-off for coarse filtering.
    pub detect_threshold: f64,
    /// The one retry value when coarse filtering keeps nothing.
    pub fallback_threshold: f64,
    /// Z-buffer tolerance (metres) for the centroid visibility check.
    pub eps: f64,
    /// Frame budget of the temporal expansion (reference included).
    pub ste_cap: usize,
    /// Most extra views the centroid expansion may add.
    pub mge_cap: usize,
    /// Most frames a scene loader should admit into the registry.
    pub max_frames: usize,
    /// Outlier removal applied before clustering the final cloud.
    pub sor: SorConfig,
    /// Clustering that isolates the target in the final cloud.
    pub dbscan: DbscanConfig,
    /// Pixel thinning for the initial (centroid-only) reconstruction; the
    /// final reconstruction is always dense.
    pub stride: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detect_threshold: 0.5,
            fallback_threshold: 0.3,
            eps: 0.4,
            ste_cap: 32,
            mge_cap: 32,
            max_frames: 300,
            sor: SorConfig::default(),
            dbscan: DbscanConfig::default(),
            stride: 2,
        }
    }
}

impl PipelineConfig {
    /// Rejects non-positive knobs, thresholds outside `(0, 1]` and a
    /// fallback threshold above the default one.
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |msg: String| Err(AgentError::Config(msg));
        for (name, value) in [
            ("detect_threshold", self.detect_threshold),
            ("fallback_threshold", self.fallback_threshold),
        ] {
            if !(value > 0.0 && value <= 1.0) {
                return bad(format!("{name} must be in (0, 1], got {value}"));
            }
        }
        if self.fallback_threshold > self.detect_threshold {
            return bad(format!(
                "fallback_threshold {} exceeds detect_threshold {}",
                self.fallback_threshold, self.detect_threshold
            ));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive and finite, got {}", self.eps));
        }
        if !(self.sor.std_ratio > 0.0 && self.sor.std_ratio.is_finite()) {
            return bad(format!("sor.std_ratio must be positive, got {}", self.sor.std_ratio));
        }
        if !(self.dbscan.eps > 0.0 && self.dbscan.eps.is_finite()) {
            return bad(format!("dbscan.eps must be positive, got {}", self.dbscan.eps));
        }
        for (name, value) in [
            ("ste_cap", self.ste_cap),
            ("mge_cap", self.mge_cap),
            ("max_frames", self.max_frames),
            ("sor.k", self.sor.k),
            ("dbscan.min_pts", self.dbscan.min_pts),
            ("stride", self.stride),
        ] {
            if value == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// The action grammar
// ---------------------------------------------------------------------------

/// One planner decision. The wire format is fixed: a tool call is
/// `name({...json...})`, task completion is `Finish[...]` and giving up is
/// `Abort[...]` ([`render_action`] writes it, [`parse_action`] reads it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentAction {
    ToolCall { name: String, args: serde_json::Map<String, serde_json::Value> },
    Finish { message: String },
    Abort { reason: String },
}

/// What [`parse_action`] rejects. Tool-call payloads must be balanced JSON
/// objects; `Finish`/`Abort` payloads must keep their square brackets
/// balanced (nested pairs are fine — the final answer usually embeds a
/// `[cx, cy, cz, dx, dy, dz]` box).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionParseError {
    #[error("the reply contains no action")]
    Missing,
    #[error("unrecognized action shape: {0:?}")]
    UnknownShape(String),
    #[error("unbalanced {what} in {text:?}")]
    Unbalanced { what: &'static str, text: String },
    #[error("tool arguments must be a JSON object, found {0:?}")]
    NotAnObject(String),
    #[error("tool arguments are not valid JSON: {0}")]
    InvalidJson(String),
    #[error("unexpected trailing text {0:?} after the action")]
    Trailing(String),
}

/// Renders the action in its wire format. `parse_action(render_action(a))`
/// returns `a` unchanged for every action whose `Finish`/`Abort` payload
/// keeps its brackets balanced.
pub fn render_action(action: &AgentAction) -> String {
    match action {
        AgentAction::ToolCall { name, args } => {
            format!("{name}({})", serde_json::Value::Object(args.clone()))
        }
        AgentAction::Finish { message } => format!("Finish[{message}]"),
        AgentAction::Abort { reason } => format!("Abort[{reason}]"),
    }
}

/// Parses a planner reply into an action.
///
/// Only the action portion of the reply is scanned: everything after the
/// last line starting with an `Action:` label, or the whole reply when no
/// label is present (thought lines never carry the label at line start).
/// The tool name must abut its parenthesis and nothing may follow the
/// action but whitespace — the grammar is strict by contract, malformed
/// output is the planner's problem to repair.
pub fn parse_action(text: &str) -> Result<AgentAction, ActionParseError> {
    let body = action_body(text).trim();
    if body.is_empty() {
        return Err(ActionParseError::Missing);
    }
    for (keyword, build) in [
        ("Finish", fn_finish as fn(String) -> AgentAction),
        ("Abort", fn_abort as fn(String) -> AgentAction),
    ] {
        if let Some(rest) = body.strip_prefix(keyword) {
            if rest.starts_with('[') {
                return bracket_payload(rest).map(build);
            }
        }
    }
    tool_call(body)
}

fn fn_finish(message: String) -> AgentAction {
    AgentAction::Finish { message }
}

fn fn_abort(reason: String) -> AgentAction {
    AgentAction::Abort { reason }
}

/// The text after the last `Action:` label, or all of `text` without one.
/// Labels count only at the start of a line so that thoughts mentioning the
/// word mid-sentence cannot hijack the scan.
fn action_body(text: &str) -> &str {
    let mut body = text;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("Action:") {
            let indent = line.len() - trimmed.len();
            let at = offset + indent + (trimmed.len() - rest.len());
            body = &text[at..];
        }
        offset += line.len();
    }
    body
}

fn snippet(s: &str) -> String {
    const LIMIT: usize = 48;
    if s.chars().count() <= LIMIT {
        s.to_string()
    } else {
        let cut: String = s.chars().take(LIMIT).collect();
        format!("{cut}…")
    }
}

/// Payload of a `[...]` group starting at `s[0] == '['`; rejects unbalanced
/// brackets and trailing text.
fn bracket_payload(s: &str) -> Result<String, ActionParseError> {
    let mut depth = 0usize;
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth == 0 {
                    let rest = &s[i + 1..];
                    if !rest.trim().is_empty() {
                        return Err(ActionParseError::Trailing(snippet(rest.trim())));
                    }
                    return Ok(s[1..i].to_string());
                }
            }
            _ => {}
        }
    }
    Err(ActionParseError::Unbalanced { what: "brackets", text: snippet(s) })
}

/// Parses `name({...})`. The argument object is located by brace balancing
/// that honours JSON string escapes, then handed to the JSON parser.
fn tool_call(body: &str) -> Result<AgentAction, ActionParseError> {
    let name_len = body
        .char_indices()
        .take_while(|&(i, c)| {
            if i == 0 {
                c.is_ascii_alphabetic() || c == '_'
            } else {
                c.is_ascii_alphanumeric() || c == '_'
            }
        })
        .count();
    if name_len == 0 || !body[name_len..].starts_with('(') {
        return Err(ActionParseError::UnknownShape(snippet(body)));
    }
    let name = &body[..name_len];
    let inner = body[name_len + 1..].trim_start();
    if !inner.starts_with('{') {
        let shown = inner.split(')').next().unwrap_or(inner);
        return Err(ActionParseError::NotAnObject(snippet(shown)));
    }
    let json_len = balanced_object_len(inner)
        .ok_or_else(|| ActionParseError::Unbalanced { what: "braces", text: snippet(inner) })?;
    let args: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&inner[..json_len])
            .map_err(|e| ActionParseError::InvalidJson(e.to_string()))?;
    let rest = inner[json_len..].trim_start();
    let Some(rest) = rest.strip_prefix(')') else {
        return Err(ActionParseError::Trailing(snippet(rest)));
    };
    if !rest.trim().is_empty() {
        return Err(ActionParseError::Trailing(snippet(rest.trim())));
    }
    Ok(AgentAction::ToolCall { name: name.to_string(), args })
}

/// Byte length of the balanced `{...}` group at the start of `s`, or `None`
/// if it never closes. Braces inside JSON strings do not count.
fn balanced_object_len(s: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, b) in s.bytes().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

/// One executed step. `effective_config` is the configuration in force
/// *after* the step ran, so a threshold drop is visible on the very step
/// that caused it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub thought: String,
    pub action: AgentAction,
    pub observation: String,
    pub effective_config: PipelineConfig,
}

/// The full record of a run, one step per decision. Finished traces end
/// with a `Finish` or `Abort` action.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentTrace {
    pub steps: Vec<TraceStep>,
}

impl AgentTrace {
    pub fn push(&mut self, step: TraceStep) {
        self.steps.push(step);
    }

    /// True once the last step is a `Finish` or `Abort`.
    pub fn is_terminated(&self) -> bool {
        matches!(
            self.steps.last().map(|s| &s.action),
            Some(AgentAction::Finish { .. } | AgentAction::Abort { .. })
        )
    }

    /// The Threshold Consistency check: snapshots never raise the detector
    /// threshold again once a step lowered it.
    pub fn thresholds_monotone(&self) -> bool {
        self.steps
            .windows(2)
            .all(|w| w[1].effective_config.detect_threshold <= w[0].effective_config.detect_threshold)
    }

    /// One JSON object per line, in step order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step).expect("trace steps serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let steps = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { steps })
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_jsonl().as_bytes())
    }
}
