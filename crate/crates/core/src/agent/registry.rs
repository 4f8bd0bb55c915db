//! The tool registry: name, parameter schema and description for every tool
//! the dispatcher accepts. The planner sees [`ToolRegistry::describe`] in
//! its system prompt; [`ToolRegistry::validate_call`] screens each action's
//! arguments before anything executes, so a misspelled tool or a
//! wrongly-typed argument becomes an error observation instead of a crash.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The bundled registry: the twelve pipeline tools in execution order.
pub const TOOL_REGISTRY_JSON: &str = include_str!("../../assets/tool_registry.json");

/// JSON value kinds a parameter may take. `Integer` is strict: `3.0` is a
/// number, not an integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    String,
    Number,
    Integer,
    Boolean,
    Array,
    Object,
}

impl ParamKind {
    fn admits(self, value: &serde_json::Value) -> bool {
        match self {
            ParamKind::String => value.is_string(),
            ParamKind::Number => value.is_number(),
            ParamKind::Integer => value.is_i64() || value.is_u64(),
            ParamKind::Boolean => value.is_boolean(),
            ParamKind::Array => value.is_array(),
            ParamKind::Object => value.is_object(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ParamKind::String => "string",
            ParamKind::Number => "number",
            ParamKind::Integer => "integer",
            ParamKind::Boolean => "boolean",
            ParamKind::Array => "array",
            ParamKind::Object => "object",
        }
    }
}

fn value_kind(value: &serde_json::Value) -> &'static str {
    match value {
        serde_json::Value::Null => "null",
        serde_json::Value::Bool(_) => "boolean",
        serde_json::Value::Number(_) => "number",
        serde_json::Value::String(_) => "string",
        serde_json::Value::Array(_) => "array",
        serde_json::Value::Object(_) => "object",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ParamKind,
    #[serde(default)]
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub parameters: Vec<ParamSpec>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistryError {
    #[error("registry does not parse: {0}")]
    Parse(String),
    #[error("duplicate tool name {0:?}")]
    DuplicateTool(String),
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("invalid arguments for {tool}: {message}")]
    ArgumentValidation { tool: String, message: String },
}

/// An ordered collection of [`ToolSpec`]s with unique names. Order matters:
/// the bundled registry lists tools in the order the pipeline runs them,
/// and prompts present them that way.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolRegistry {
    tools: Vec<ToolSpec>,
}

impl ToolRegistry {
    pub fn new(tools: Vec<ToolSpec>) -> Result<Self, RegistryError> {
        for (i, tool) in tools.iter().enumerate() {
            if tools[..i].iter().any(|t| t.name == tool.name) {
                return Err(RegistryError::DuplicateTool(tool.name.clone()));
            }
        }
        Ok(Self { tools })
    }

    pub fn from_json(json: &str) -> Result<Self, RegistryError> {
        let tools: Vec<ToolSpec> =
            serde_json::from_str(json).map_err(|e| RegistryError::Parse(e.to_string()))?;
        Self::new(tools)
    }

    /// The registry shipped in this crate's assets.
    pub fn builtin() -> Self {
        Self::from_json(TOOL_REGISTRY_JSON).expect("the bundled registry parses")
    }

    pub fn tools(&self) -> &[ToolSpec] {
        &self.tools
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.name == name)
    }

    /// All tool names joined with `", "`, for the prompt's tool-names slot.
    pub fn names_line(&self) -> String {
        self.tools.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join(", ")
    }

    /// One `- name(param: type, optional?: type): description` line per
    /// tool, for the prompt's tool-descriptions slot.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for tool in &self.tools {
            let params: Vec<String> = tool
                .parameters
                .iter()
                .map(|p| {
                    let opt = if p.required { "" } else { "?" };
                    format!("{}{opt}: {}", p.name, p.kind.name())
                })
                .collect();
            out.push_str(&format!("- {}({}): {}\n", tool.name, params.join(", "), tool.description));
        }
        out
    }

    /// Checks a call against the schema: the tool must exist, required
    /// parameters must be present, nothing unexpected may appear, and every
    /// value must match its declared kind.
    pub fn validate_call(
        &self,
        name: &str,
        args: &serde_json::Map<String, serde_json::Value>,
    ) -> Result<(), RegistryError> {
        let tool = self.get(name).ok_or_else(|| RegistryError::UnknownTool(name.to_string()))?;
        let invalid = |message: String| {
            Err(RegistryError::ArgumentValidation { tool: name.to_string(), message })
        };
        for param in &tool.parameters {
            if param.required && !args.contains_key(&param.name) {
                return invalid(format!("missing required argument `{}`", param.name));
            }
        }
        for (key, value) in args {
            let Some(param) = tool.parameters.iter().find(|p| &p.name == key) else {
                return invalid(format!("unexpected argument `{key}`"));
            };
            if !param.kind.admits(value) {
                return invalid(format!(
                    "argument `{key}` must be a {}, got {}",
                    param.kind.name(),
                    value_kind(value)
                ));
            }
        }
        Ok(())
    }
}
