//! Prompt templates, shipped as assets and embedded at compile time.
//!
//! The texts are data, not code: they live under `assets/prompts/` where they
//! can be diffed and tuned without touching Rust. Placeholders use
//! `{name}` syntax and are substituted with [`fill`]; only [`SYSTEM`] has
//! any (`{skill_description}`, `{tool_descriptions}`, `{tool_names}`).

/// Agent system prompt framing the think/act loop and the action grammar.
pub const SYSTEM: &str = include_str!("../../assets/prompts/system.md");
/// Turns a free-form query into the four structured fields.
pub const QUERY_PARSE: &str = include_str!("../../assets/prompts/query_parse.md");
/// Strict yes/no verification of a frame against a scene description.
pub const SCENE_FILTER: &str = include_str!("../../assets/prompts/scene_filter.md");
/// Presence check plus 0-5 match score for a frame against the query.
pub const VLM_SCORE: &str = include_str!("../../assets/prompts/vlm_score.md");
/// YES/NO tracking verification of a candidate frame against a context clip.
pub const FRAME_EXPANSION: &str = include_str!("../../assets/prompts/frame_expansion.md");
/// Picks the numeric instance id matching the query in an annotated image.
pub const SEGMENTATION_MARKER: &str = include_str!("../../assets/prompts/segmentation_marker.md");

/// Replaces each `{name}` placeholder with its value. Unknown placeholders
/// are left untouched (the templates contain literal braces in JSON
/// examples, which must survive).
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in values {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}
