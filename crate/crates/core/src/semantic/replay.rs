//! Replay backends: every capability answers from an ordered log of canned
//! responses.
//!
//! A log entry may pin the request it answers by digest (see
//! [`chat_digest`](super::chat_digest) and friends); an empty digest matches
//! any request. Replay is strict by design — running past the end of a log
//! or hitting a digest mismatch is an error, never a silent default — so a
//! drifting pipeline cannot quietly consume a stale fixture.
//!
//! Responses use the same JSON shapes as the remote wire protocol: a chat
//! response is a JSON string, detector responses are
//! `{"detections": [...]}`, segmenter responses are `{"masks": [...]}`.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::scene::Scene;

use super::{
    chat_digest, detector_digest, parse_detections_value, parse_masks_value, segmenter_digest,
    Chat, ChatTurn, Detection, Detector, SegmentMask, SegmentPrompt, Segmenter, SemanticError,
};

/// One canned response, optionally pinned to a request digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    /// Hex SHA-256 of the canonical request; `""` matches any request.
    #[serde(default)]
    pub request_digest: String,
    pub response: serde_json::Value,
}

impl ReplayEntry {
    /// An entry answering any request.
    pub fn any(response: serde_json::Value) -> Self {
        Self { request_digest: String::new(), response }
    }

    /// An entry pinned to a specific request digest.
    pub fn pinned(request_digest: impl Into<String>, response: serde_json::Value) -> Self {
        Self { request_digest: request_digest.into(), response }
    }
}

/// The full log: one ordered tape per capability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReplayLog {
    #[serde(default)]
    pub chat: Vec<ReplayEntry>,
    #[serde(default)]
    pub detector: Vec<ReplayEntry>,
    #[serde(default)]
    pub segmenter: Vec<ReplayEntry>,
}

impl ReplayLog {
    pub fn load(path: &Path) -> Result<Self, SemanticError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SemanticError::BadReplayLog(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| SemanticError::BadReplayLog(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), SemanticError> {
        let text = serde_json::to_string_pretty(self).expect("ReplayLog serializes");
        std::fs::write(path, text)
            .map_err(|e| SemanticError::BadReplayLog(format!("{}: {e}", path.display())))
    }

    /// Appends an unpinned chat reply.
    pub fn push_chat(&mut self, reply: impl Into<String>) {
        self.chat.push(ReplayEntry::any(serde_json::Value::String(reply.into())));
    }

    /// Appends an unpinned detector response.
    pub fn push_detections(&mut self, detections: serde_json::Value) {
        self.detector.push(ReplayEntry::any(detections));
    }

    /// Appends an unpinned segmenter response.
    pub fn push_masks(&mut self, masks: serde_json::Value) {
        self.segmenter.push(ReplayEntry::any(masks));
    }
}

/// An ordered tape of entries for one capability.
struct Tape {
    capability: &'static str,
    state: Mutex<TapeState>,
}

struct TapeState {
    entries: VecDeque<ReplayEntry>,
    served: usize,
}

impl Tape {
    fn new(capability: &'static str, entries: Vec<ReplayEntry>) -> Self {
        Self {
            capability,
            state: Mutex::new(TapeState { entries: entries.into(), served: 0 }),
        }
    }

    fn next(&self, actual_digest: &str) -> Result<serde_json::Value, SemanticError> {
        let mut state = self.state.lock().unwrap();
        let index = state.served;
        let entry = state.entries.pop_front().ok_or(SemanticError::ReplayExhausted {
            capability: self.capability,
            served: index,
        })?;
        state.served += 1;
        if !entry.request_digest.is_empty() && entry.request_digest != actual_digest {
            return Err(SemanticError::ReplayMismatch {
                capability: self.capability,
                index,
                expected: entry.request_digest,
                actual: actual_digest.to_string(),
            });
        }
        Ok(entry.response)
    }
}

pub struct ReplayChat {
    tape: Tape,
}

impl ReplayChat {
    pub fn new(entries: Vec<ReplayEntry>) -> Self {
        Self { tape: Tape::new("chat", entries) }
    }
}

impl Chat for ReplayChat {
    fn reply(&self, turns: &[ChatTurn]) -> Result<String, SemanticError> {
        let response = self.tape.next(&chat_digest(turns))?;
        response.as_str().map(str::to_string).ok_or_else(|| {
            SemanticError::BadReplayLog("chat response must be a JSON string".into())
        })
    }
}

pub struct ReplayDetector {
    scene: Arc<Scene>,
    tape: Tape,
}

impl ReplayDetector {
    pub fn new(scene: Arc<Scene>, entries: Vec<ReplayEntry>) -> Self {
        Self { scene, tape: Tape::new("detector", entries) }
    }
}

impl Detector for ReplayDetector {
    fn detect(
        &self,
        frame_index: usize,
        phrase: &str,
        threshold: f64,
    ) -> Result<Vec<Detection>, SemanticError> {
        let response = self.tape.next(&detector_digest(frame_index, phrase, threshold))?;
        parse_detections_value(&response, frame_index, phrase, &self.scene.intrinsics)
    }
}

pub struct ReplaySegmenter {
    scene: Arc<Scene>,
    tape: Tape,
}

impl ReplaySegmenter {
    pub fn new(scene: Arc<Scene>, entries: Vec<ReplayEntry>) -> Self {
        Self { scene, tape: Tape::new("segmenter", entries) }
    }
}

impl Segmenter for ReplaySegmenter {
    fn segment(
        &self,
        frame_index: usize,
        prompt: &SegmentPrompt,
    ) -> Result<Vec<SegmentMask>, SemanticError> {
        let response = self.tape.next(&segmenter_digest(frame_index, prompt))?;
        parse_masks_value(&response, frame_index, &self.scene.intrinsics)
    }
}
