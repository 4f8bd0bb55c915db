//! The expert skill document: the pipeline's standard operating procedure,
//! written for the planner. The bundled markdown is the canonical text — it
//! is pasted into the system prompt verbatim — and this module parses it
//! into a structure the runtime can check itself against: an ordered list
//! of steps plus the strategy tips (the Threshold Consistency rule lives
//! there).

use serde::Serialize;
use thiserror::Error;

/// The bundled skill text shipped with the crate.
pub const SKILL_MARKDOWN: &str = include_str!("../../assets/skill_3d_visual_grounding.md");

/// One numbered instruction. Numbers are 1-based and consecutive by
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkillStep {
    pub number: usize,
    pub title: String,
    pub body: String,
}

/// One named entry from the Strategy Tips section.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkillTip {
    pub name: String,
    pub advice: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SkillError {
    #[error("skill document is missing its {0} field")]
    MissingField(&'static str),
    #[error("skill document has no numbered steps")]
    NoSteps,
    #[error("step numbering breaks at position {position}: expected {expected}, found {found}")]
    NonConsecutive { position: usize, expected: usize, found: usize },
}

/// A parsed skill. `markdown()` returns the exact source text, which is what
/// prompts embed; the structured fields exist for validation and for tools
/// that want to enumerate the procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillDocument {
    pub name: String,
    pub description: String,
    pub steps: Vec<SkillStep>,
    pub tips: Vec<SkillTip>,
    markdown: String,
}

impl SkillDocument {
    /// The skill shipped in this crate's assets.
    pub fn builtin() -> Self {
        Self::parse(SKILL_MARKDOWN).expect("the bundled skill document parses")
    }

    /// Parses a skill written in the bundled document's conventions:
    /// `**Name:**` / `**Description:**` lines, `N. **Title**: body` steps
    /// and `**Name**: advice` lines under a `## Strategy Tips` heading.
    pub fn parse(markdown: &str) -> Result<Self, SkillError> {
        let mut name = None;
        let mut description = None;
        let mut steps: Vec<SkillStep> = Vec::new();
        let mut tips = Vec::new();
        let mut in_tips = false;

        for line in markdown.lines() {
            let line = line.trim();
            if let Some(heading) = line.strip_prefix("## ") {
                in_tips = heading.trim() == "Strategy Tips";
                continue;
            }
            if let Some(rest) = line.strip_prefix("**Name:**") {
                name = Some(rest.trim().trim_matches('`').to_string());
            } else if let Some(rest) = line.strip_prefix("**Description:**") {
                description = Some(rest.trim().to_string());
            } else if in_tips {
                if let Some((tip_name, advice)) = bold_label(line) {
                    tips.push(SkillTip { name: tip_name, advice });
                }
            } else if let Some(step) = numbered_step(line) {
                let expected = steps.len() + 1;
                if step.number != expected {
                    return Err(SkillError::NonConsecutive {
                        position: expected,
                        expected,
                        found: step.number,
                    });
                }
                steps.push(step);
            }
        }

        let name = name.ok_or(SkillError::MissingField("name"))?;
        let description = description.ok_or(SkillError::MissingField("description"))?;
        if steps.is_empty() {
            return Err(SkillError::NoSteps);
        }
        Ok(Self { name, description, steps, tips, markdown: markdown.to_string() })
    }

    /// The source text, verbatim.
    pub fn markdown(&self) -> &str {
        &self.markdown
    }
}

/// Parses `N. **Title**: body`.
fn numbered_step(line: &str) -> Option<SkillStep> {
    let digits = line.bytes().take_while(|b| b.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let number: usize = line[..digits].parse().ok()?;
    let rest = line[digits..].strip_prefix(". ")?;
    let (title, body) = bold_label(rest)?;
    Some(SkillStep { number, title, body })
}

/// Parses `**Label**: text` into its halves.
fn bold_label(line: &str) -> Option<(String, String)> {
    let rest = line.strip_prefix("**")?;
    let (label, body) = rest.split_once("**:")?;
    Some((label.trim().to_string(), body.trim().to_string()))
}
