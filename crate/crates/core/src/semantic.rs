//! Semantic capabilities: the open-vocabulary detector, the instance
//! segmenter and the chat model, plus the query/filter/score/mark operations
//! built on top of them.
//!
//! The pipeline never talks to a concrete model directly. It goes through the
//! three capability traits ([`Detector`], [`Segmenter`], [`Chat`]), each with
//! three interchangeable backends:
//!
//! * **oracle** — answers derived from a scene's ground-truth boxes by
//!   re-rendering their masks; deterministic, used by tests and demos,
//! * **replay** — an ordered log of canned responses; fails loudly when the
//!   log runs out or a pinned request digest does not match,
//! * **remote** — JSON/HTTP endpoints serving real models.
//!
//! Images travel through chat conversations as *frame references* (index plus
//! annotation rectangles), not encoded pixels: the oracle resolves them
//! against ground truth, replay folds them into request digests, and only the
//! remote backend renders and base64-encodes actual pixels. Batch operations
//! process frames in ascending index order, so every backend sees the same
//! deterministic call sequence.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{Bitmap, GeometryError, Intrinsics, RleMask};
use crate::scene::{Scene, SceneError};

pub mod oracle;
pub mod prompts;
pub mod remote;
pub mod replay;

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("malformed tool output: {0}")]
    MalformedToolOutput(String),
    #[error("no instances of the target class in the frame")]
    NoInstances,
    #[error("no annotated instance matches the query (ID: -1)")]
    NoMatch,
    #[error("chat backend unavailable: {0}")]
    ChatUnavailable(String),
    #[error("detector backend unavailable: {0}")]
    DetectorUnavailable(String),
    #[error("segmenter backend unavailable: {0}")]
    SegmenterUnavailable(String),
    #[error("request to {url} timed out")]
    Timeout { url: String },
    #[error("remote protocol error: HTTP {status} from {url}")]
    ProtocolError { status: u16, url: String },
    #[error("replay log for {capability} exhausted after {served} calls")]
    ReplayExhausted { capability: &'static str, served: usize },
    #[error(
        "replay digest mismatch for {capability} call #{index}: logged {expected}, got {actual}"
    )]
    ReplayMismatch { capability: &'static str, index: usize, expected: String, actual: String },
    #[error("replay log unreadable: {0}")]
    BadReplayLog(String),
    #[error("environment variable {var} is not set")]
    MissingEndpoint { var: &'static str },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)` with `x0 <= x1`,
/// `y0 <= y1`. Width and height therefore count pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelRect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        debug_assert!(x0 <= x1 && y0 <= y1, "corners out of order");
        Self { x0, y0, x1, y1 }
    }

    /// Converts the inclusive pixel bounds reported by [`Bitmap::bounds`].
    pub fn from_mask_bounds(bounds: (usize, usize, usize, usize)) -> Self {
        let (u0, v0, u1, v1) = bounds;
        Self::new(u0 as f64, v0 as f64, (u1 + 1) as f64, (v1 + 1) as f64)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn iou(&self, other: &PixelRect) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clamp_to(&self, width: usize, height: usize) -> Self {
        Self {
            x0: self.x0.clamp(0.0, width as f64),
            y0: self.y0.clamp(0.0, height as f64),
            x1: self.x1.clamp(0.0, width as f64),
            y1: self.y1.clamp(0.0, height as f64),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// One detector hit: where a phrase was found and how confident the model is.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub frame_index: usize,
    pub bbox: PixelRect,
    /// Confidence in `[0, 1]`.
    pub score: f64,
    /// The phrase the detection answers.
    pub phrase: String,
}

/// One segmented instance in a frame. `bitmap` has the frame's pixel
/// dimensions; ids are unique within the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMask {
    pub frame_index: usize,
    pub bitmap: Bitmap,
    pub instance_id: usize,
    /// Mask quality in `[0, 1]`.
    pub score: f64,
}

/// Structured form of a grounding query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedQuery {
    /// Core noun phrase naming the target, possibly with inherent adjectives.
    pub target_class: String,
    /// Inherent properties of the target itself.
    pub attributes: Vec<String>,
    /// Relational / spatial constraints that locate the target.
    pub conditions: Vec<String>,
    /// One sentence describing the scene composition the query implies.
    pub scene_feature: String,
}

impl ParsedQuery {
    /// Parses and validates the JSON form. All four keys must be present and
    /// `target_class` must be non-empty.
    pub fn from_json(text: &str) -> Result<Self, SemanticError> {
        let parsed: ParsedQuery = serde_json::from_str(text)
            .map_err(|e| SemanticError::MalformedToolOutput(format!("query JSON: {e}")))?;
        if parsed.target_class.trim().is_empty() {
            return Err(SemanticError::MalformedToolOutput("empty target_class".into()));
        }
        Ok(parsed)
    }
}

/// How a segmentation is requested.
#[derive(Debug, Clone, PartialEq)]
pub enum SegmentPrompt {
    /// Segment every instance matching an open-vocabulary phrase.
    Phrase(String),
    /// Segment the object under one pixel.
    Point { u: u32, v: u32 },
    /// Segment the object best matching a rectangle.
    Box(PixelRect),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

/// A rectangle burned into an image shown to the chat model, optionally with
/// a text label (instance ids are rendered this way).
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub rect: PixelRect,
    pub label: Option<String>,
}

/// An image handed to the chat model: a scene frame plus the annotations to
/// draw over it. Backends decide what "showing" means — the remote backend
/// renders and encodes pixels, the oracle reads the frame's ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatImage {
    pub frame_index: usize,
    pub annotations: Vec<Annotation>,
}

impl ChatImage {
    /// An unannotated frame.
    pub fn plain(frame_index: usize) -> Self {
        Self { frame_index, annotations: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChatPart {
    Text(String),
    Image(ChatImage),
}

/// One conversation turn; at least one part.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatTurn {
    pub role: ChatRole,
    pub parts: Vec<ChatPart>,
}

impl ChatTurn {
    pub fn system(text: impl Into<String>) -> Self {
        Self { role: ChatRole::System, parts: vec![ChatPart::Text(text.into())] }
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        Self { role: ChatRole::User, parts: vec![ChatPart::Text(text.into())] }
    }

    pub fn user(parts: Vec<ChatPart>) -> Self {
        debug_assert!(!parts.is_empty(), "a chat turn needs at least one part");
        Self { role: ChatRole::User, parts }
    }
}

/// Open-vocabulary detection over one frame.
pub trait Detector: Send + Sync {
    fn detect(
        &self,
        frame_index: usize,
        phrase: &str,
        threshold: f64,
    ) -> Result<Vec<Detection>, SemanticError>;
}

/// Promptable instance segmentation over one frame.
pub trait Segmenter: Send + Sync {
    fn segment(
        &self,
        frame_index: usize,
        prompt: &SegmentPrompt,
    ) -> Result<Vec<SegmentMask>, SemanticError>;
}

/// Multimodal chat: a conversation in, a text reply out.
pub trait Chat: Send + Sync {
    fn reply(&self, turns: &[ChatTurn]) -> Result<String, SemanticError>;
}

/// The three semantic capabilities bundled for the pipeline. Backends are
/// shared behind `Arc` so a toolkit clones cheaply and crosses threads.
#[derive(Clone)]
pub struct Toolkit {
    pub detector: Arc<dyn Detector>,
    pub segmenter: Arc<dyn Segmenter>,
    pub chat: Arc<dyn Chat>,
}

impl Toolkit {
    /// Ground-truth-backed toolkit for a scene (see [`oracle`]).
    pub fn oracle(scene: Arc<Scene>, gt: crate::scene::GroundTruth) -> Self {
        let core = oracle::OracleCore::new(scene, gt);
        Self {
            detector: Arc::new(oracle::OracleDetector::new(core.clone())),
            segmenter: Arc::new(oracle::OracleSegmenter::new(core.clone())),
            chat: Arc::new(oracle::OracleChat::new(core)),
        }
    }

    /// Canned-response toolkit (see [`replay`]).
    pub fn replay(scene: Arc<Scene>, log: replay::ReplayLog) -> Self {
        Self {
            detector: Arc::new(replay::ReplayDetector::new(scene.clone(), log.detector)),
            segmenter: Arc::new(replay::ReplaySegmenter::new(scene, log.segmenter)),
            chat: Arc::new(replay::ReplayChat::new(log.chat)),
        }
    }

    /// Network-backed toolkit (see [`remote`]).
    pub fn remote(scene: Arc<Scene>, config: remote::RemoteConfig) -> Self {
        let http = remote::Http::new(&config);
        Self {
            detector: Arc::new(remote::RemoteDetector::new(scene.clone(), http.clone())),
            segmenter: Arc::new(remote::RemoteSegmenter::new(scene.clone(), http.clone())),
            chat: Arc::new(remote::RemoteChat::new(scene, http)),
        }
    }
}

// ---------------------------------------------------------------------------
// Request digests
//
// A canonical text rendering of each request, hashed so replay logs can pin
// the exact call they answer. Floats are rendered with `{:?}` (shortest
// round-trip), so equal values digest equally.
// ---------------------------------------------------------------------------

fn hex_sha256(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Digest of a chat conversation.
pub fn chat_digest(turns: &[ChatTurn]) -> String {
    let mut canon = String::new();
    for turn in turns {
        canon.push_str(match turn.role {
            ChatRole::System => "system\n",
            ChatRole::User => "user\n",
            ChatRole::Assistant => "assistant\n",
        });
        for part in &turn.parts {
            match part {
                ChatPart::Text(s) => {
                    canon.push_str("text:");
                    canon.push_str(s);
                }
                ChatPart::Image(img) => {
                    canon.push_str(&format!("image:frame={}", img.frame_index));
                    for a in &img.annotations {
                        canon.push_str(&format!(
                            ";rect=({:?},{:?},{:?},{:?}),label={}",
                            a.rect.x0,
                            a.rect.y0,
                            a.rect.x1,
                            a.rect.y1,
                            a.label.as_deref().unwrap_or("")
                        ));
                    }
                }
            }
            canon.push('\n');
        }
    }
    hex_sha256(canon.as_bytes())
}

/// Digest of a detector call.
pub fn detector_digest(frame_index: usize, phrase: &str, threshold: f64) -> String {
    hex_sha256(format!("detect:frame={frame_index},phrase={phrase},threshold={threshold:?}").as_bytes())
}

/// Digest of a segmenter call.
pub fn segmenter_digest(frame_index: usize, prompt: &SegmentPrompt) -> String {
    let p = match prompt {
        SegmentPrompt::Phrase(s) => format!("phrase={s}"),
        SegmentPrompt::Point { u, v } => format!("point=({u},{v})"),
        SegmentPrompt::Box(r) => {
            format!("box=({:?},{:?},{:?},{:?})", r.x0, r.y0, r.x1, r.y1)
        }
    };
    hex_sha256(format!("segment:frame={frame_index},{p}").as_bytes())
}

// ---------------------------------------------------------------------------
// Wire payload parsing, shared by the replay and remote backends
// ---------------------------------------------------------------------------

/// Parses `{"detections": [{"box": [x0,y0,x1,y1], "score": s}, ...]}`.
/// Scores are clamped to `[0, 1]` and boxes to the image domain.
pub(crate) fn parse_detections_value(
    value: &serde_json::Value,
    frame_index: usize,
    phrase: &str,
    k: &Intrinsics,
) -> Result<Vec<Detection>, SemanticError> {
    let malformed = |what: &str| SemanticError::MalformedToolOutput(format!("detections: {what}"));
    let items = value
        .get("detections")
        .and_then(|d| d.as_array())
        .ok_or_else(|| malformed("missing \"detections\" array"))?;
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let raw: [f64; 4] = item
            .get("box")
            .and_then(|b| serde_json::from_value(b.clone()).ok())
            .ok_or_else(|| malformed("each detection needs \"box\": [x0,y0,x1,y1]"))?;
        let score = item
            .get("score")
            .and_then(|s| s.as_f64())
            .ok_or_else(|| malformed("each detection needs a numeric \"score\""))?;
        if raw.iter().any(|v| !v.is_finite()) || raw[0] > raw[2] || raw[1] > raw[3] {
            return Err(malformed(&format!("box {raw:?} is not an ordered rectangle")));
        }
        out.push(Detection {
            frame_index,
            bbox: PixelRect::new(raw[0], raw[1], raw[2], raw[3]).clamp_to(k.width, k.height),
            score: score.clamp(0.0, 1.0),
            phrase: phrase.to_string(),
        });
    }
    Ok(out)
}

/// Parses `{"masks": [{"rle": {...}} | {"bitmap": [[0,1,...],...]}, "score": s]}`.
/// Mask dimensions must match the frame.
pub(crate) fn parse_masks_value(
    value: &serde_json::Value,
    frame_index: usize,
    k: &Intrinsics,
) -> Result<Vec<SegmentMask>, SemanticError> {
    let malformed = |what: String| SemanticError::MalformedToolOutput(format!("masks: {what}"));
    let items = value
        .get("masks")
        .and_then(|m| m.as_array())
        .ok_or_else(|| malformed("missing \"masks\" array".into()))?;
    let mut out = Vec::with_capacity(items.len());
    for (instance_id, item) in items.iter().enumerate() {
        let bitmap = if let Some(rle) = item.get("rle") {
            let rle: RleMask = serde_json::from_value(rle.clone())
                .map_err(|e| malformed(format!("bad rle: {e}")))?;
            Bitmap::from_rle(&rle)?
        } else if let Some(rows) = item.get("bitmap").and_then(|b| b.as_array()) {
            let grid: Vec<Vec<u8>> = serde_json::from_value(serde_json::Value::Array(rows.clone()))
                .map_err(|e| malformed(format!("bad bitmap: {e}")))?;
            let height = grid.len();
            let width = grid.first().map_or(0, Vec::len);
            if grid.iter().any(|row| row.len() != width) {
                return Err(malformed("ragged bitmap rows".into()));
            }
            let bits = grid.into_iter().flatten().map(|b| b != 0).collect();
            Bitmap::from_bits(width, height, bits)
        } else {
            return Err(malformed("each mask needs \"rle\" or \"bitmap\"".into()));
        };
        if bitmap.width() != k.width || bitmap.height() != k.height {
            return Err(malformed(format!(
                "mask is {}x{}, frame is {}x{}",
                bitmap.width(),
                bitmap.height(),
                k.width,
                k.height
            )));
        }
        let score = item.get("score").and_then(|s| s.as_f64()).unwrap_or(1.0).clamp(0.0, 1.0);
        out.push(SegmentMask { frame_index, bitmap, instance_id, score });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Extracts the contents of the first triple-backtick fence (any language
/// tag) from a chat reply.
fn extract_fenced_block(reply: &str) -> Option<&str> {
    let open = reply.find("```")?;
    let after_ticks = &reply[open + 3..];
    // Skip an optional language tag: everything up to the first newline.
    let body_start = after_ticks.find('\n')? + 1;
    let body = &after_ticks[body_start..];
    let close = body.find("```")?;
    Some(body[..close].trim())
}

/// Sends the query-parsing prompt and validates the structured reply.
///
/// The reply must carry a triple-backtick-fenced JSON object with the four
/// query keys; anything else is [`SemanticError::MalformedToolOutput`].
pub fn parse_query(query: &str, chat: &dyn Chat) -> Result<ParsedQuery, SemanticError> {
    assert!(!query.trim().is_empty(), "query must be non-empty");
    let turns = [ChatTurn::system(prompts::QUERY_PARSE), ChatTurn::user_text(query)];
    let reply = chat.reply(&turns)?;
    let block = extract_fenced_block(&reply).ok_or_else(|| {
        SemanticError::MalformedToolOutput("no fenced JSON block in the reply".into())
    })?;
    ParsedQuery::from_json(block)
}

/// Keeps the frames in which the detector finds `target_class` with
/// confidence at or above `threshold`. Indices come back ascending.
pub fn object_filter(
    scene: &Scene,
    target_class: &str,
    threshold: f64,
    detector: &dyn Detector,
) -> Result<Vec<usize>, SemanticError> {
    assert!((0.0..=1.0).contains(&threshold), "threshold must be in [0, 1]");
    let mut kept = Vec::new();
    for frame_index in 0..scene.len() {
        let detections = detector.detect(frame_index, target_class, threshold)?;
        if detections.iter().any(|d| d.score >= threshold) {
            kept.push(frame_index);
        }
    }
    Ok(kept)
}

/// Keeps the frames whose scene-filter reply starts with "yes"
/// (case-insensitive, leading whitespace ignored). Any other reply drops the
/// frame — an all-"no" result is the caller's signal to fall back.
pub fn vlm_filter(
    frame_indices: &[usize],
    scene_feature: &str,
    chat: &dyn Chat,
) -> Result<Vec<usize>, SemanticError> {
    assert!(!frame_indices.is_empty(), "vlm_filter needs at least one frame");
    let mut kept = Vec::new();
    for &frame_index in frame_indices {
        let turns = [
            ChatTurn::system(prompts::SCENE_FILTER),
            ChatTurn::user(vec![
                ChatPart::Text(format!("Scene description: {scene_feature}")),
                ChatPart::Image(ChatImage::plain(frame_index)),
            ]),
        ];
        let reply = chat.reply(&turns)?;
        if reply.trim().to_lowercase().starts_with("yes") {
            kept.push(frame_index);
        }
    }
    Ok(kept)
}

/// Per-frame scoring verdict. `score` is already coerced: clamped to
/// `[0, 5]`, forced to `0.0` when `is_present` is false, and `0.0` when the
/// reply did not parse (then `malformed` is set). `note` records any
/// coercion for the trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameScore {
    pub frame_index: usize,
    pub is_present: bool,
    pub score: f64,
    pub malformed: bool,
    pub note: Option<String>,
}

fn score_from_reply(frame_index: usize, reply: &str) -> FrameScore {
    #[derive(Deserialize)]
    struct Raw {
        is_present: bool,
        score: f64,
    }
    match serde_json::from_str::<Raw>(reply.trim()) {
        Err(e) => FrameScore {
            frame_index,
            is_present: false,
            score: 0.0,
            malformed: true,
            note: Some(format!("unparseable reply ({e}); scored 0.0")),
        },
        Ok(raw) => {
            let mut score = raw.score.clamp(0.0, 5.0);
            let mut note = None;
            if score != raw.score {
                note = Some(format!("score {} clamped to {score}", raw.score));
            }
            if !raw.is_present && score != 0.0 {
                note = Some(format!("is_present=false forces score 0.0 (was {})", raw.score));
                score = 0.0;
            }
            FrameScore { frame_index, is_present: raw.is_present, score, malformed: false, note }
        }
    }
}

/// Scores each frame against the query with the chat model. Malformed
/// replies degrade to score 0 for that frame instead of failing the batch.
pub fn vlm_score(
    frame_indices: &[usize],
    query: &str,
    parsed: &ParsedQuery,
    chat: &dyn Chat,
) -> Result<Vec<FrameScore>, SemanticError> {
    assert!(!frame_indices.is_empty(), "vlm_score needs at least one frame");
    let parsed_json = serde_json::to_string(parsed).expect("ParsedQuery serializes");
    let mut out = Vec::with_capacity(frame_indices.len());
    for &frame_index in frame_indices {
        let turns = [
            ChatTurn::system(prompts::VLM_SCORE),
            ChatTurn::user(vec![
                ChatPart::Text(format!("Query: {query}\nParsed: {parsed_json}")),
                ChatPart::Image(ChatImage::plain(frame_index)),
            ]),
        ];
        let reply = chat.reply(&turns)?;
        out.push(score_from_reply(frame_index, &reply));
    }
    Ok(out)
}

/// Frame indices ordered by descending score; ties break toward the lower
/// frame index.
pub fn rank(scores: &[FrameScore]) -> Vec<usize> {
    let mut order: Vec<&FrameScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then(a.frame_index.cmp(&b.frame_index))
    });
    order.into_iter().map(|s| s.frame_index).collect()
}

/// Parses the marker reply "ID: <integer>". A bare integer is accepted too.
fn parse_marker_id(reply: &str) -> Result<i64, SemanticError> {
    let trimmed = reply.trim();
    if let Ok(id) = trimmed.parse::<i64>() {
        return Ok(id);
    }
    let lower = trimmed.to_lowercase();
    let at = lower
        .find("id:")
        .ok_or_else(|| SemanticError::MalformedToolOutput(format!("no \"ID:\" in {trimmed:?}")))?;
    let tail = trimmed[at + 3..].trim_start();
    let end = tail
        .char_indices()
        .take_while(|(i, c)| c.is_ascii_digit() || (*i == 0 && *c == '-'))
        .map(|(i, c)| i + c.len_utf8())
        .last()
        .ok_or_else(|| {
            SemanticError::MalformedToolOutput(format!("no integer after \"ID:\" in {trimmed:?}"))
        })?;
    tail[..end]
        .parse::<i64>()
        .map_err(|_| SemanticError::MalformedToolOutput(format!("bad id in {trimmed:?}")))
}

/// Segments every `target_class` instance in the frame, overlays numeric ids
/// and asks the chat model which one the query means.
///
/// Ids are assigned `0..n-1` in descending mask-area order (stable for equal
/// areas). With a single instance the chat model is not consulted — the
/// marker prompt's single-candidate override makes the answer a foregone
/// conclusion. Returns the chosen id and all masks (re-labelled).
pub fn mark_and_pick(
    frame_index: usize,
    parsed: &ParsedQuery,
    segmenter: &dyn Segmenter,
    chat: &dyn Chat,
) -> Result<(usize, Vec<SegmentMask>), SemanticError> {
    let mut masks =
        segmenter.segment(frame_index, &SegmentPrompt::Phrase(parsed.target_class.clone()))?;
    masks.retain(|m| !m.bitmap.is_empty());
    if masks.is_empty() {
        return Err(SemanticError::NoInstances);
    }
    masks.sort_by_key(|m| std::cmp::Reverse(m.bitmap.count()));
    for (id, mask) in masks.iter_mut().enumerate() {
        mask.instance_id = id;
    }
    if masks.len() == 1 {
        return Ok((0, masks));
    }

    let annotations: Vec<Annotation> = masks
        .iter()
        .map(|m| Annotation {
            rect: PixelRect::from_mask_bounds(m.bitmap.bounds().expect("non-empty mask")),
            label: Some(m.instance_id.to_string()),
        })
        .collect();
    let parsed_json = serde_json::to_string(parsed).expect("ParsedQuery serializes");
    let turns = [
        ChatTurn::system(prompts::SEGMENTATION_MARKER),
        ChatTurn::user(vec![
            ChatPart::Text(format!("Parsed query: {parsed_json}")),
            ChatPart::Image(ChatImage { frame_index, annotations }),
        ]),
    ];
    let reply = chat.reply(&turns)?;
    let id = parse_marker_id(&reply)?;
    if id == -1 {
        return Err(SemanticError::NoMatch);
    }
    if id < 0 || id as usize >= masks.len() {
        return Err(SemanticError::MalformedToolOutput(format!(
            "instance id {id} out of range 0..{}",
            masks.len()
        )));
    }
    Ok((id as usize, masks))
}

/// Asks the chat model whether the tracked object visible in the annotated
/// context frames is still present in the candidate frame. True iff the
/// reply, trimmed and uppercased, is exactly "YES".
pub fn verify_tracking(
    context: &[(usize, PixelRect)],
    candidate: usize,
    chat: &dyn Chat,
) -> Result<bool, SemanticError> {
    assert!(!context.is_empty(), "context clip must be non-empty");
    let mut parts =
        vec![ChatPart::Text("Reference Video frames, target annotated:".to_string())];
    for &(frame_index, rect) in context {
        parts.push(ChatPart::Image(ChatImage {
            frame_index,
            annotations: vec![Annotation { rect, label: None }],
        }));
    }
    parts.push(ChatPart::Text("Candidate Image:".to_string()));
    parts.push(ChatPart::Image(ChatImage::plain(candidate)));
    let turns = [ChatTurn::system(prompts::FRAME_EXPANSION), ChatTurn::user(parts)];
    let reply = chat.reply(&turns)?;
    Ok(reply.trim().to_uppercase() == "YES")
}

// ---------------------------------------------------------------------------
// Annotation rendering (remote backend and saved visualizations)
// ---------------------------------------------------------------------------

/// Box colors cycled by annotation index.
const ANNOTATION_COLORS: [[u8; 3]; 6] = [
    [230, 57, 70],
    [69, 123, 157],
    [42, 157, 143],
    [233, 196, 106],
    [144, 12, 63],
    [96, 108, 56],
];

/// 5x7 glyphs for '0'..'9' and '-'; bit 4 is the leftmost column.
const GLYPHS: [[u8; 7]; 11] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
    [0b00000, 0b00000, 0b00000, 0b01110, 0b00000, 0b00000, 0b00000], // -
];

fn glyph_for(c: char) -> Option<&'static [u8; 7]> {
    match c {
        '0'..='9' => Some(&GLYPHS[c as usize - '0' as usize]),
        '-' => Some(&GLYPHS[10]),
        _ => None,
    }
}

/// Draws annotation rectangles (2 px outline) and their labels (scaled 5x7
/// digits on a solid backing) onto a copy of the image. Purely synthetic
/// glyphs — no font dependencies — so output is byte-deterministic.
pub fn annotate_rgb(base: &image::RgbImage, annotations: &[Annotation]) -> image::RgbImage {
    const SCALE: u32 = 2;
    const PAD: u32 = 2;
    let mut img = base.clone();
    let (w, h) = img.dimensions();
    let mut put = |x: i64, y: i64, color: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    };
    for (i, a) in annotations.iter().enumerate() {
        let color = ANNOTATION_COLORS[i % ANNOTATION_COLORS.len()];
        let (x0, y0) = (a.rect.x0.round() as i64, a.rect.y0.round() as i64);
        let (x1, y1) = (a.rect.x1.round() as i64 - 1, a.rect.y1.round() as i64 - 1);
        for t in 0..2i64 {
            for x in x0..=x1 {
                put(x, y0 + t, color);
                put(x, y1 - t, color);
            }
            for y in y0..=y1 {
                put(x0 + t, y, color);
                put(x1 - t, y, color);
            }
        }
        let Some(label) = &a.label else { continue };
        let glyphs: Vec<&[u8; 7]> = label.chars().filter_map(glyph_for).collect();
        if glyphs.is_empty() {
            continue;
        }
        let text_w = glyphs.len() as u32 * 6 * SCALE - SCALE;
        let text_h = 7 * SCALE;
        let ox = x0 + 2;
        let oy = y0 + 2;
        for y in 0..(text_h + 2 * PAD) as i64 {
            for x in 0..(text_w + 2 * PAD) as i64 {
                put(ox + x, oy + y, color);
            }
        }
        for (gi, glyph) in glyphs.iter().enumerate() {
            let gx = ox + PAD as i64 + gi as i64 * (6 * SCALE) as i64;
            let gy = oy + PAD as i64;
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..5u32 {
                    if bits & (1 << (4 - col)) != 0 {
                        for sy in 0..SCALE {
                            for sx in 0..SCALE {
                                put(
                                    gx + (col * SCALE + sx) as i64,
                                    gy + (row as u32 * SCALE + sy) as i64,
                                    [255, 255, 255],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    img
}
