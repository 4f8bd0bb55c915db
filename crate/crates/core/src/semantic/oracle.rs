//! Ground-truth oracle backends.
//!
//! Every answer is derived from the scene's labelled 3D boxes by re-rendering
//! their occlusion-aware masks ([`render_frame`]) — no pixels are inspected
//! and no model is involved, so the toolkit is exactly reproducible. Tests
//! and the offline demo path rely on that.
//!
//! The oracle has to commit to behaviours a learned model leaves implicit.
//! Those rules are part of its contract:
//!
//! * **phrase matching** — a phrase names a class when, lowercased and
//!   whitespace-collapsed, either contains the other ("red crate" ~ "crate").
//! * **the target instance** — when several boxes match the target class,
//!   the one with the lowest ground-truth id is the intended target.
//! * **detector/segmenter confidence** — `px / (px + 500)` where `px` is the
//!   visible mask pixel count: more visible support, higher score, never 1.
//! * **query parsing** — the target class is the ground-truth class whose
//!   name occurs earliest in the query; every other mentioned class becomes a
//!   "near the ..." condition and the scene feature lists all of them.
//! * **scene filtering** — in an "a scene containing {list}" description
//!   (our parser's template) every listed object must be a visible
//!   ground-truth class; in free-form text, "yes" iff every ground-truth
//!   class the description happens to name is visible.
//! * **scoring** — `5 * px / peak` (floored at 0.1) where `peak` is the
//!   target's best visibility anywhere in the scene; absent targets score 0.
//! * **tracking verification** — "YES" iff the target's mask keeps at least
//!   [`VERIFY_MIN_PIXELS`] visible pixels in the candidate frame.
//! * **marking** — answers the annotated id whose rectangle best overlaps
//!   the target's rendered mask box; "ID: -1" when nothing overlaps.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::geometry::Bitmap;
use crate::scene::synthetic::render_frame;
use crate::scene::{GroundTruth, Scene};

use super::{
    Chat, ChatImage, ChatRole, ChatPart, ChatTurn, Detection, Detector, ParsedQuery, PixelRect,
    SegmentMask, SegmentPrompt, Segmenter, SemanticError,
};

/// Visible pixels at which detector/segmenter confidence reaches 0.5.
const DETECT_HALF_PIXELS: f64 = 500.0;
/// Minimum visible mask pixels for the tracking verifier to answer YES.
pub const VERIFY_MIN_PIXELS: usize = 50;

struct FrameMasks {
    /// Per ground-truth box (in `gt.boxes` order), its occlusion-aware mask.
    masks: Vec<Bitmap>,
    counts: Vec<usize>,
}

/// Shared state of the three oracle capabilities: the scene, its ground
/// truth, and a lazy cache of re-rendered per-frame masks.
pub struct OracleCore {
    scene: Arc<Scene>,
    gt: GroundTruth,
    masks: Mutex<HashMap<usize, Arc<FrameMasks>>>,
    peaks: OnceLock<Vec<usize>>,
}

impl OracleCore {
    pub fn new(scene: Arc<Scene>, gt: GroundTruth) -> Arc<Self> {
        Arc::new(Self { scene, gt, masks: Mutex::new(HashMap::new()), peaks: OnceLock::new() })
    }

    /// Ground-truth masks for one frame, rendered on first use. Rendering
    /// needs only the pose and intrinsics, so this never touches pixel files.
    fn frame_masks(&self, frame_index: usize) -> Arc<FrameMasks> {
        if let Some(cached) = self.masks.lock().unwrap().get(&frame_index) {
            return cached.clone();
        }
        let (_, masks) = render_frame(
            &self.scene.intrinsics,
            &self.scene.frame(frame_index).pose,
            &self.gt.boxes,
        );
        let counts = masks.iter().map(Bitmap::count).collect();
        let rendered = Arc::new(FrameMasks { masks, counts });
        self.masks.lock().unwrap().entry(frame_index).or_insert(rendered).clone()
    }

    /// Per box, its best visible pixel count over the whole scene.
    fn peaks(&self) -> &[usize] {
        self.peaks.get_or_init(|| {
            let mut peaks = vec![0usize; self.gt.boxes.len()];
            for frame_index in 0..self.scene.len() {
                let fm = self.frame_masks(frame_index);
                for (peak, &count) in peaks.iter_mut().zip(&fm.counts) {
                    *peak = (*peak).max(count);
                }
            }
            peaks
        })
    }

    /// Positions (in `gt.boxes` order) of boxes whose class matches `phrase`.
    fn matching_boxes(&self, phrase: &str) -> Vec<usize> {
        (0..self.gt.boxes.len())
            .filter(|&pos| phrase_matches(phrase, &self.gt.boxes[pos].class))
            .collect()
    }

    /// The intended target instance: the matching box with the lowest id.
    fn target_box(&self, phrase: &str) -> Option<usize> {
        self.matching_boxes(phrase).into_iter().min_by_key(|&pos| self.gt.boxes[pos].id)
    }

    /// Distinct class names in ground-truth order.
    fn classes(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for b in &self.gt.boxes {
            if !out.contains(&b.class.as_str()) {
                out.push(&b.class);
            }
        }
        out
    }
}

fn normalize(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn phrase_matches(phrase: &str, class: &str) -> bool {
    let (p, c) = (normalize(phrase), normalize(class));
    !p.is_empty() && !c.is_empty() && (p.contains(&c) || c.contains(&p))
}

fn confidence(px: usize) -> f64 {
    px as f64 / (px as f64 + DETECT_HALF_PIXELS)
}

pub struct OracleDetector {
    core: Arc<OracleCore>,
}

impl OracleDetector {
    pub fn new(core: Arc<OracleCore>) -> Self {
        Self { core }
    }
}

impl Detector for OracleDetector {
    fn detect(
        &self,
        frame_index: usize,
        phrase: &str,
        threshold: f64,
    ) -> Result<Vec<Detection>, SemanticError> {
        let fm = self.core.frame_masks(frame_index);
        let mut out = Vec::new();
        for pos in self.core.matching_boxes(phrase) {
            let px = fm.counts[pos];
            if px == 0 {
                continue;
            }
            let score = confidence(px);
            if score < threshold {
                continue;
            }
            out.push(Detection {
                frame_index,
                bbox: PixelRect::from_mask_bounds(fm.masks[pos].bounds().expect("px > 0")),
                score,
                phrase: phrase.to_string(),
            });
        }
        Ok(out)
    }
}

pub struct OracleSegmenter {
    core: Arc<OracleCore>,
}

impl OracleSegmenter {
    pub fn new(core: Arc<OracleCore>) -> Self {
        Self { core }
    }
}

impl Segmenter for OracleSegmenter {
    fn segment(
        &self,
        frame_index: usize,
        prompt: &SegmentPrompt,
    ) -> Result<Vec<SegmentMask>, SemanticError> {
        let fm = self.core.frame_masks(frame_index);
        let positions: Vec<usize> = match prompt {
            SegmentPrompt::Phrase(phrase) => self
                .core
                .matching_boxes(phrase)
                .into_iter()
                .filter(|&pos| fm.counts[pos] > 0)
                .collect(),
            // Masks are disjoint (each pixel belongs to its nearest box), so
            // a point prompt yields at most one instance.
            SegmentPrompt::Point { u, v } => {
                let (u, v) = (*u as usize, *v as usize);
                let inside = u < self.scene_width() && v < self.scene_height();
                (0..fm.masks.len())
                    .filter(|&pos| inside && fm.masks[pos].get(u, v))
                    .collect()
            }
            SegmentPrompt::Box(rect) => {
                let mut best: Option<(usize, f64)> = None;
                for pos in 0..fm.masks.len() {
                    if fm.counts[pos] == 0 {
                        continue;
                    }
                    let mask_rect =
                        PixelRect::from_mask_bounds(fm.masks[pos].bounds().expect("px > 0"));
                    let iou = mask_rect.iou(rect);
                    if iou > 0.0 && best.map_or(true, |(_, b)| iou > b) {
                        best = Some((pos, iou));
                    }
                }
                best.map(|(pos, _)| pos).into_iter().collect()
            }
        };
        Ok(positions
            .into_iter()
            .enumerate()
            .map(|(instance_id, pos)| SegmentMask {
                frame_index,
                bitmap: fm.masks[pos].clone(),
                instance_id,
                score: confidence(fm.counts[pos]),
            })
            .collect())
    }
}

impl OracleSegmenter {
    fn scene_width(&self) -> usize {
        self.core.scene.intrinsics.width
    }
    fn scene_height(&self) -> usize {
        self.core.scene.intrinsics.height
    }
}

pub struct OracleChat {
    core: Arc<OracleCore>,
}

impl OracleChat {
    pub fn new(core: Arc<OracleCore>) -> Self {
        Self { core }
    }
}

fn misuse(msg: impl Into<String>) -> SemanticError {
    SemanticError::ChatUnavailable(format!("oracle chat: {}", msg.into()))
}

fn turn_texts(turn: &ChatTurn) -> String {
    let texts: Vec<&str> = turn
        .parts
        .iter()
        .filter_map(|p| match p {
            ChatPart::Text(s) => Some(s.as_str()),
            ChatPart::Image(_) => None,
        })
        .collect();
    texts.join("\n")
}

fn turn_images(turn: &ChatTurn) -> Vec<&ChatImage> {
    turn.parts
        .iter()
        .filter_map(|p| match p {
            ChatPart::Image(img) => Some(img),
            ChatPart::Text(_) => None,
        })
        .collect()
}

/// First balanced `{...}` object in `text`, honouring JSON string escapes.
fn extract_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, b) in text.bytes().enumerate().skip(start) {
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
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn target_class_in(text: &str) -> Result<String, SemanticError> {
    let json = extract_json_object(text)
        .ok_or_else(|| misuse("no parsed-query JSON in the user turn"))?;
    let value: serde_json::Value =
        serde_json::from_str(json).map_err(|e| misuse(format!("bad parsed-query JSON: {e}")))?;
    value
        .get("target_class")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| misuse("parsed-query JSON lacks target_class"))
}

impl Chat for OracleChat {
    fn reply(&self, turns: &[ChatTurn]) -> Result<String, SemanticError> {
        let system = turns
            .iter()
            .find(|t| t.role == ChatRole::System)
            .map(turn_texts)
            .unwrap_or_default();
        let user = turns
            .iter()
            .rev()
            .find(|t| t.role == ChatRole::User)
            .ok_or_else(|| misuse("no user turn"))?;
        if system.starts_with("You are working on a 3D visual grounding task") {
            self.answer_query_parse(user)
        } else if system.starts_with("You are a strict visual verification assistant") {
            self.answer_scene_filter(user)
        } else if system.starts_with("You are a visual filtering assistant") {
            self.answer_score(user)
        } else if system.starts_with("You are an expert in Video Object Tracking") {
            self.answer_verify(user)
        } else if system.starts_with("You are an expert who identifies objects") {
            self.answer_marker(user)
        } else {
            Err(misuse("unrecognized system prompt"))
        }
    }
}

impl OracleChat {
    fn answer_query_parse(&self, user: &ChatTurn) -> Result<String, SemanticError> {
        let query = turn_texts(user);
        let query_lc = query.to_lowercase();
        let mut found: Vec<(usize, &str)> = self
            .core
            .classes()
            .into_iter()
            .filter_map(|class| query_lc.find(&class.to_lowercase()).map(|at| (at, class)))
            .collect();
        // Earliest mention first; a longer name wins over its own substring.
        found.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.len().cmp(&a.1.len())));

        let target_class = found.first().map(|(_, c)| c.to_string()).unwrap_or_else(|| {
            query.split_whitespace().next().unwrap_or("object").to_string()
        });
        let conditions: Vec<String> =
            found.iter().skip(1).map(|(_, c)| format!("near the {c}")).collect();
        let mentioned: Vec<&str> = found.iter().map(|&(_, c)| c).collect();
        let scene_feature = if mentioned.is_empty() {
            format!("a scene containing {target_class}")
        } else {
            format!("a scene containing {}", mentioned.join(", "))
        };
        let parsed =
            ParsedQuery { target_class, attributes: Vec::new(), conditions, scene_feature };
        let json = serde_json::to_string_pretty(&parsed).expect("ParsedQuery serializes");
        Ok(format!("```json\n{json}\n```"))
    }

    fn answer_scene_filter(&self, user: &ChatTurn) -> Result<String, SemanticError> {
        let image = *turn_images(user).last().ok_or_else(|| misuse("no image to verify"))?;
        let description = normalize(&turn_texts(user));
        let fm = self.core.frame_masks(image.frame_index);
        let visible = |phrase: &str| {
            self.core
                .gt
                .boxes
                .iter()
                .enumerate()
                .any(|(pos, b)| phrase_matches(phrase, &b.class) && fm.counts[pos] > 0)
        };
        // Our own query parser phrases scene features as "a scene containing
        // {list}". That template names its objects explicitly, so every
        // listed phrase must be a visible ground-truth class — an object the
        // scene doesn't have at all makes the answer "no" everywhere.
        let all_visible = if let Some(list) = description.split("a scene containing").nth(1) {
            list.split(',')
                .flat_map(|part| part.split(" and "))
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .all(visible)
        } else {
            // Free-form description: verify the ground-truth classes it
            // happens to mention; anything else is unverifiable.
            self.core
                .classes()
                .into_iter()
                .all(|class| !description.contains(&normalize(class)) || visible(class))
        };
        Ok(if all_visible { "yes" } else { "no" }.to_string())
    }

    fn answer_score(&self, user: &ChatTurn) -> Result<String, SemanticError> {
        let image = *turn_images(user).last().ok_or_else(|| misuse("no image to score"))?;
        let target = target_class_in(&turn_texts(user))?;
        let absent = serde_json::json!({"is_present": false, "score": 0.0});
        let Some(pos) = self.core.target_box(&target) else {
            return Ok(absent.to_string());
        };
        let px = self.core.frame_masks(image.frame_index).counts[pos];
        if px == 0 {
            return Ok(absent.to_string());
        }
        let peak = self.core.peaks()[pos].max(1);
        let score = (5.0 * px as f64 / peak as f64).clamp(0.1, 5.0);
        Ok(serde_json::json!({"is_present": true, "score": score}).to_string())
    }

    fn answer_verify(&self, user: &ChatTurn) -> Result<String, SemanticError> {
        let images = turn_images(user);
        if images.len() < 2 {
            return Err(misuse("verifier needs context images and a candidate"));
        }
        let candidate = images[images.len() - 1];
        let context = images[..images.len() - 1]
            .iter()
            .rev()
            .find(|img| !img.annotations.is_empty())
            .ok_or_else(|| misuse("no annotated context image"))?;
        let target_rect = context.annotations[0].rect;
        let fm = self.core.frame_masks(context.frame_index);
        let mut best: Option<(usize, f64)> = None;
        for pos in 0..fm.masks.len() {
            if fm.counts[pos] == 0 {
                continue;
            }
            let iou =
                PixelRect::from_mask_bounds(fm.masks[pos].bounds().expect("px > 0")).iou(&target_rect);
            if iou > 0.0 && best.map_or(true, |(_, b)| iou > b) {
                best = Some((pos, iou));
            }
        }
        let Some((pos, _)) = best else {
            return Ok("NO".to_string());
        };
        let px = self.core.frame_masks(candidate.frame_index).counts[pos];
        Ok(if px >= VERIFY_MIN_PIXELS { "YES" } else { "NO" }.to_string())
    }

    fn answer_marker(&self, user: &ChatTurn) -> Result<String, SemanticError> {
        let image = *turn_images(user).last().ok_or_else(|| misuse("no annotated image"))?;
        let target = target_class_in(&turn_texts(user))?;
        let Some(pos) = self.core.target_box(&target) else {
            return Ok("ID: -1".to_string());
        };
        let fm = self.core.frame_masks(image.frame_index);
        if fm.counts[pos] == 0 {
            return Ok("ID: -1".to_string());
        }
        let target_rect = PixelRect::from_mask_bounds(fm.masks[pos].bounds().expect("px > 0"));
        let mut best: Option<(usize, f64)> = None;
        for (index, a) in image.annotations.iter().enumerate() {
            let iou = target_rect.iou(&a.rect);
            if iou > 0.0 && best.map_or(true, |(_, b)| iou > b) {
                best = Some((index, iou));
            }
        }
        Ok(match best {
            None => "ID: -1".to_string(),
            Some((index, _)) => {
                let label = image.annotations[index]
                    .label
                    .clone()
                    .unwrap_or_else(|| index.to_string());
                format!("ID: {label}")
            }
        })
    }
}
