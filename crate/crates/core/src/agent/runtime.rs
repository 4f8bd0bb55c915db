//! Execution: a dispatcher that maps validated tool calls onto the pipeline
//! stages, the deterministic scripted runner, and the ReAct planner loop.
//!
//! Both runners share one [`ToolContext`]. Tools communicate through it the
//! way the real pipeline communicates through files: each stage deposits its
//! result under a fixed artifact name and later stages select their input by
//! that name (`image_files.json`, `object_filtered_image_files.json`, …), so
//! a planner expresses decisions — like reverting to the coarse filter after
//! the fine filter emptied everything — purely through the paths it passes.
//!
//! Failures never panic the run: the dispatcher reports them as observations
//! starting with `ERROR: `, which the scripted runner turns into an `Abort`
//! step and a planner sees as feedback. The one deliberate exception is an
//! empty initial reconstruction, which is part of normal operation — the
//! observation announces that the centroid expansion will be skipped and the
//! final cloud is rebuilt densely from the tracked clip alone.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::expansion::{
    final_reconstruction, geometric_expansion, initial_build, semantic_temporal_expansion,
    write_centroid_artifacts, write_expanded_listing, write_final_artifacts, ExpansionError,
    ExpansionPool, TrackedClip, CENTROID_IMAGES_FILE, CENTROID_MASKS_FILE, EXPANDED_IMAGES_FILE,
    FINAL_IMAGES_FILE, FINAL_MASKS_FILE,
};
use crate::geometry::Point3;
use crate::pointcloud::ply::{write_ply, PlyEncoding};
use crate::pointcloud::{Bbox3D, PointCloud};
use crate::scene::Scene;
use crate::semantic::{
    self, annotate_rgb, prompts, Annotation, Chat, ChatPart, ChatRole, ChatTurn, FrameScore,
    ParsedQuery, PixelRect, SegmentMask, SemanticError, Toolkit,
};

use super::registry::ToolRegistry;
use super::skill::SkillDocument;
use super::{parse_action, AgentAction, AgentError, AgentTrace, PipelineConfig, TraceStep};

/// Frame listing written by `read_image_files`.
pub const IMAGE_FILES_FILE: &str = "image_files.json";
/// Frame listing surviving the coarse (detector) filter.
pub const OBJECT_FILTERED_FILE: &str = "object_filtered_image_files.json";
/// Frame listing surviving the fine (scene-semantics) filter.
pub const VLM_FILTERED_FILE: &str = "vlm_filtered_image_files.json";
/// Per-frame scores, in scoring order.
pub const VLM_SCORES_FILE: &str = "vlm_scores.json";
/// Frame listing in descending score order.
pub const VLM_RANKED_FILE: &str = "vlm_ranked_image_files.json";
/// Instance masks found in the reference view.
pub const REFERENCE_MASKS_FILE: &str = "reference_image_mask_results.json";
/// Reference view with the chosen instance boxed.
pub const REFERENCE_VIEW_FILE: &str = "reference_image_with_target_mask_box.png";
/// The predicted point cloud; both reconstruction passes write it.
pub const PRED_PCD_FILE: &str = "pred_pcd.ply";

/// Outcome of a grounding run: the box (absent after an abort) and the full
/// step record.
#[derive(Debug, Clone)]
pub struct GroundingRun {
    pub bbox: Option<Bbox3D>,
    pub trace: AgentTrace,
}

/// Mutable state the tools thread through a run. Tools read their inputs
/// from it by artifact name (see [`module docs`](self)) and deposit results
/// back; when an output directory is set they also materialize every
/// artifact on disk.
pub struct ToolContext<'a> {
    scene: &'a Arc<Scene>,
    toolkit: &'a Toolkit,
    config: PipelineConfig,
    out_dir: Option<PathBuf>,
    query: String,
    parsed: Option<ParsedQuery>,
    frames: Option<Vec<usize>>,
    coarse: Option<Vec<usize>>,
    fine: Option<Vec<usize>>,
    scores: Option<Vec<FrameScore>>,
    ranked: Option<Vec<usize>>,
    reference_frame: Option<usize>,
    seg_id: Option<usize>,
    reference_masks: Option<Vec<SegmentMask>>,
    reference: Option<(usize, SegmentMask)>,
    clip: Option<TrackedClip>,
    anchor: Option<Point3>,
    pool: Option<ExpansionPool>,
    bbox: Option<Bbox3D>,
    /// Set when the initial reconstruction came up empty; the final cloud is
    /// then rebuilt densely from the clip and the centroid expansion skipped.
    mge_skipped: bool,
}

impl<'a> ToolContext<'a> {
    pub fn new(
        scene: &'a Arc<Scene>,
        toolkit: &'a Toolkit,
        config: PipelineConfig,
        query: &str,
        out_dir: Option<&Path>,
    ) -> Self {
        Self {
            scene,
            toolkit,
            config,
            out_dir: out_dir.map(Path::to_path_buf),
            query: query.to_string(),
            parsed: None,
            frames: None,
            coarse: None,
            fine: None,
            scores: None,
            ranked: None,
            reference_frame: None,
            seg_id: None,
            reference_masks: None,
            reference: None,
            clip: None,
            anchor: None,
            pool: None,
            bbox: None,
            mge_skipped: false,
        }
    }

    /// The configuration currently in force (thresholds may have dropped).
    pub fn config(&self) -> PipelineConfig {
        self.config
    }

    /// The final box, once a reconstruction produced one.
    pub fn bbox(&self) -> Option<Bbox3D> {
        self.bbox
    }

    /// Adopts a requested detector threshold under the Threshold Consistency
    /// rule: a lower request lowers the configuration for the rest of the
    /// run, a higher one is clamped back down to the value in force.
    fn adopt_threshold(&mut self, requested: f64) -> Result<f64, String> {
        if !(0.0..=1.0).contains(&requested) {
            return Err(format!("threshold {requested} is outside [0, 1]"));
        }
        if requested < self.config.detect_threshold {
            self.config.detect_threshold = requested;
            self.config.fallback_threshold = self.config.fallback_threshold.min(requested);
        }
        Ok(self.config.detect_threshold)
    }

    /// Maps an artifact path onto the frame set that stage produced.
    fn resolve_frames(&self, listing: &str) -> Result<Vec<usize>, String> {
        let name = basename(listing);
        let found = match name {
            IMAGE_FILES_FILE => self.frames.clone(),
            OBJECT_FILTERED_FILE => self.coarse.clone(),
            VLM_FILTERED_FILE => self.fine.clone(),
            VLM_RANKED_FILE => self.ranked.clone(),
            EXPANDED_IMAGES_FILE => self.clip.as_ref().map(TrackedClip::frames),
            _ => return Err(format!("unknown frame listing {listing:?}")),
        };
        found.ok_or_else(|| format!("{name} has not been produced yet"))
    }

    fn write_artifact<T: Serialize>(&self, value: &T, name: &str) -> Result<(), String> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
        std::fs::write(dir.join(name), text).map_err(|e| e.to_string())
    }

    fn write_listing(&self, frames: &[usize], name: &str) -> Result<(), String> {
        let names: Vec<String> =
            frames.iter().map(|&f| self.scene.frame(f).display_name()).collect();
        self.write_artifact(&names, name)
    }

    fn write_reference_masks(&self, masks: &[SegmentMask]) -> Result<(), String> {
        let records: Vec<serde_json::Value> = masks
            .iter()
            .map(|m| {
                serde_json::json!({
                    "frame_index": m.frame_index,
                    "instance_id": m.instance_id,
                    "score": m.score,
                    "rle": m.bitmap.to_rle(),
                })
            })
            .collect();
        self.write_artifact(&records, REFERENCE_MASKS_FILE)
    }

    fn write_cloud(&self, cloud: &PointCloud) -> Result<(), String> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        write_ply(cloud, &dir.join(PRED_PCD_FILE), PlyEncoding::BinaryLittleEndian)
            .map_err(|e| e.to_string())
    }
}

fn basename(path: &str) -> &str {
    Path::new(path).file_name().and_then(|n| n.to_str()).unwrap_or(path)
}

/// Renders a box the way observations and final answers quote it:
/// `[cx, cy, cz, dx, dy, dz]` with four decimals.
pub fn format_bbox(bbox: &Bbox3D) -> String {
    let a = bbox.to_array();
    format!("[{:.4}, {:.4}, {:.4}, {:.4}, {:.4}, {:.4}]", a[0], a[1], a[2], a[3], a[4], a[5])
}

/// The planner's system prompt: the prompt scaffold with the skill document
/// and the tool registry pasted in.
pub fn system_prompt(skill: &SkillDocument, registry: &ToolRegistry) -> String {
    prompts::fill(
        prompts::SYSTEM,
        &[
            ("skill_description", skill.markdown()),
            ("tool_descriptions", &registry.describe()),
            ("tool_names", &registry.names_line()),
        ],
    )
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Validates and executes one tool call, returning the observation. All
/// failures — schema violations, out-of-order calls, tool errors — come back
/// as observations starting with `ERROR: ` and leave the context unchanged.
pub fn dispatch(registry: &ToolRegistry, action: &AgentAction, cx: &mut ToolContext) -> String {
    let AgentAction::ToolCall { name, args } = action else {
        return "ERROR: only tool calls can be dispatched".into();
    };
    if let Err(e) = registry.validate_call(name, args) {
        return format!("ERROR: {e}");
    }
    match execute(name, args, cx) {
        Ok(observation) => observation,
        Err(message) => format!("ERROR: {message}"),
    }
}

type Args = serde_json::Map<String, serde_json::Value>;

fn arg_str<'m>(args: &'m Args, key: &str) -> Result<&'m str, String> {
    args.get(key).and_then(|v| v.as_str()).ok_or_else(|| format!("argument `{key}` is missing"))
}

fn arg_f64(args: &Args, key: &str) -> Result<f64, String> {
    args.get(key).and_then(|v| v.as_f64()).ok_or_else(|| format!("argument `{key}` is missing"))
}

fn arg_usize(args: &Args, key: &str) -> Result<usize, String> {
    args.get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| format!("argument `{key}` must be a non-negative integer"))
}

fn opt_f64(args: &Args, key: &str) -> Option<f64> {
    args.get(key).and_then(|v| v.as_f64())
}

fn opt_usize(args: &Args, key: &str) -> Option<usize> {
    args.get(key).and_then(|v| v.as_u64()).map(|v| v as usize)
}

fn sem(e: SemanticError) -> String {
    e.to_string()
}

fn execute(name: &str, args: &Args, cx: &mut ToolContext) -> Result<String, String> {
    match name {
        "query_parse" => {
            let query = arg_str(args, "query")?;
            let parsed = semantic::parse_query(query, cx.toolkit.chat.as_ref()).map_err(sem)?;
            let observation = serde_json::to_string(&parsed).expect("parsed query serializes");
            cx.parsed = Some(parsed);
            Ok(observation)
        }

        "read_image_files" => {
            let scene_id = arg_str(args, "scene_id")?;
            if scene_id != cx.scene.scene_id {
                return Err(format!(
                    "unknown scene {scene_id:?}; this run is grounded in {:?}",
                    cx.scene.scene_id
                ));
            }
            let frames: Vec<usize> = (0..cx.scene.len())
                .filter(|&i| cx.scene.frame(i).valid)
                .take(cx.config.max_frames)
                .collect();
            if frames.is_empty() {
                return Err("the scene has no valid frames".into());
            }
            cx.write_listing(&frames, IMAGE_FILES_FILE)?;
            cx.frames = Some(frames);
            Ok(IMAGE_FILES_FILE.into())
        }

        "object_filter" => {
            let registered = cx
                .frames
                .clone()
                .ok_or_else(|| "run read_image_files before filtering".to_string())?;
            let phrase = arg_str(args, "parsed_query")?;
            let threshold = cx.adopt_threshold(arg_f64(args, "threshold")?)?;
            let hits =
                semantic::object_filter(cx.scene, phrase, threshold, cx.toolkit.detector.as_ref())
                    .map_err(sem)?;
            let coarse: Vec<usize> = hits.into_iter().filter(|i| registered.contains(i)).collect();
            cx.write_listing(&coarse, OBJECT_FILTERED_FILE)?;
            let n = coarse.len();
            cx.coarse = Some(coarse);
            Ok(format!("{OBJECT_FILTERED_FILE}, {n}"))
        }

        "vlm_filter" => {
            let input = cx.resolve_frames(arg_str(args, "image_files_path")?)?;
            if input.is_empty() {
                return Err("the input listing is empty; nothing to filter".into());
            }
            let feature = arg_str(args, "scene_feature")?;
            let fine =
                semantic::vlm_filter(&input, feature, cx.toolkit.chat.as_ref()).map_err(sem)?;
            cx.write_listing(&fine, VLM_FILTERED_FILE)?;
            let n = fine.len();
            cx.fine = Some(fine);
            Ok(format!("{VLM_FILTERED_FILE}, {n}"))
        }

        "vlm_score" => {
            let input = cx.resolve_frames(arg_str(args, "image_files_path")?)?;
            if input.is_empty() {
                return Err("the input listing is empty; nothing to score".into());
            }
            let parsed =
                cx.parsed.clone().ok_or_else(|| "run query_parse before scoring".to_string())?;
            let scores =
                semantic::vlm_score(&input, &cx.query, &parsed, cx.toolkit.chat.as_ref())
                    .map_err(sem)?;
            let ranked = semantic::rank(&scores);
            cx.write_artifact(&scores, VLM_SCORES_FILE)?;
            cx.write_listing(&ranked, VLM_RANKED_FILE)?;
            cx.scores = Some(scores);
            cx.ranked = Some(ranked);
            Ok(format!("('{VLM_SCORES_FILE}', '{VLM_RANKED_FILE}')"))
        }

        "argmax_image_and_seg_id" => {
            let ranked = cx
                .ranked
                .clone()
                .ok_or_else(|| "run vlm_score before selecting a reference".to_string())?;
            let parsed = cx
                .parsed
                .clone()
                .ok_or_else(|| "run query_parse before selecting a reference".to_string())?;
            cx.adopt_threshold(arg_f64(args, "threshold")?)?;
            let mut found = None;
            for &frame in &ranked {
                match semantic::mark_and_pick(
                    frame,
                    &parsed,
                    cx.toolkit.segmenter.as_ref(),
                    cx.toolkit.chat.as_ref(),
                ) {
                    Ok((seg_id, masks)) => {
                        found = Some((frame, seg_id, masks));
                        break;
                    }
                    Err(SemanticError::NoInstances | SemanticError::NoMatch) => continue,
                    Err(e) => return Err(sem(e)),
                }
            }
            let (frame, seg_id, masks) = found.ok_or_else(|| {
                "no ranked frame contains an instance matching the query".to_string()
            })?;
            cx.write_reference_masks(&masks)?;
            let display = cx.scene.frame(frame).display_name();
            cx.reference_frame = Some(frame);
            cx.seg_id = Some(seg_id);
            cx.reference_masks = Some(masks);
            Ok(format!("('{display}', {seg_id}, '{REFERENCE_MASKS_FILE}')"))
        }

        "segment_target_in_reference" => {
            let image_path = arg_str(args, "image_path")?;
            let seg_id = arg_usize(args, "seg_id")?;
            let frame = cx
                .reference_frame
                .ok_or_else(|| "run argmax_image_and_seg_id before isolating".to_string())?;
            let display = cx.scene.frame(frame).display_name();
            if Path::new(image_path).file_name() != Path::new(&display).file_name() {
                return Err(format!(
                    "{image_path:?} is not the selected reference view {display:?}"
                ));
            }
            let masks = cx.reference_masks.as_ref().expect("masks accompany the frame");
            let mask = masks
                .iter()
                .find(|m| m.instance_id == seg_id)
                .cloned()
                .ok_or_else(|| format!("the reference view has no instance {seg_id}"))?;
            if let Some(dir) = &cx.out_dir {
                let rgb = cx.scene.frame(frame).rgb().map_err(|e| e.to_string())?;
                let bounds =
                    mask.bitmap.bounds().ok_or_else(|| "the selected mask is empty".to_string())?;
                let annotation = Annotation {
                    rect: PixelRect::from_mask_bounds(bounds),
                    label: cx.parsed.as_ref().map(|p| p.target_class.clone()),
                };
                annotate_rgb(&rgb, &[annotation])
                    .save(dir.join(REFERENCE_VIEW_FILE))
                    .map_err(|e| e.to_string())?;
            }
            cx.reference = Some((frame, mask));
            Ok(REFERENCE_VIEW_FILE.into())
        }

        "vlm_frame_expansion" => {
            let reference = cx
                .reference
                .clone()
                .ok_or_else(|| "run segment_target_in_reference before tracking".to_string())?;
            let cap = arg_usize(args, "max_frames")?;
            if cap == 0 {
                return Err("max_frames must be at least 1".into());
            }
            if let Some(requested) = opt_f64(args, "threshold") {
                cx.adopt_threshold(requested)?;
            }
            let clip = semantic_temporal_expansion(cx.scene, reference, cx.toolkit, cap);
            if let Some(dir) = &cx.out_dir {
                write_expanded_listing(cx.scene, &clip, dir).map_err(|e| e.to_string())?;
            }
            let n = clip.len();
            cx.clip = Some(clip);
            Ok(format!("('{EXPANDED_IMAGES_FILE}', {n})"))
        }

        "segment_all_target_object" => {
            let listing = arg_str(args, "image_files_path")?;
            if basename(listing) != EXPANDED_IMAGES_FILE {
                return Err(format!("expected the expanded frame listing, got {listing:?}"));
            }
            let clip = cx
                .clip
                .as_ref()
                .ok_or_else(|| "run vlm_frame_expansion before segmenting".to_string())?;
            if let Some(dir) = &cx.out_dir {
                write_final_artifacts(cx.scene, clip, dir).map_err(|e| e.to_string())?;
            }
            Ok(format!("('{FINAL_IMAGES_FILE}', '{FINAL_MASKS_FILE}')"))
        }

        "reconstruct_point_cloud" => {
            let listing = arg_str(args, "image_files_path")?;
            arg_str(args, "masks_path")?;
            match basename(listing) {
                CENTROID_IMAGES_FILE => {
                    let pool = cx
                        .pool
                        .as_ref()
                        .ok_or_else(|| "run centroid_complete before the final reconstruction".to_string())?;
                    let (cloud, bbox) =
                        final_reconstruction(cx.scene, pool, cx.config.sor, cx.config.dbscan, 1)
                            .map_err(|e| e.to_string())?;
                    cx.write_cloud(&cloud)?;
                    cx.bbox = Some(bbox);
                    Ok(PRED_PCD_FILE.into())
                }
                FINAL_IMAGES_FILE | EXPANDED_IMAGES_FILE => {
                    let clip = cx
                        .clip
                        .as_ref()
                        .ok_or_else(|| "run vlm_frame_expansion before reconstructing".to_string())?;
                    if cx.mge_skipped {
                        // Recovery path: no usable initial cloud, so the clip
                        // itself is the pool and the rebuild is dense.
                        let pool = ExpansionPool::from_clip(clip);
                        let (cloud, bbox) = final_reconstruction(
                            cx.scene,
                            &pool,
                            cx.config.sor,
                            cx.config.dbscan,
                            1,
                        )
                        .map_err(|e| e.to_string())?;
                        cx.write_cloud(&cloud)?;
                        cx.bbox = Some(bbox);
                        Ok(PRED_PCD_FILE.into())
                    } else {
                        match initial_build(cx.scene, clip, cx.config.stride) {
                            Ok((cloud, anchor)) => {
                                cx.write_cloud(&cloud)?;
                                cx.anchor = Some(anchor);
                                Ok(PRED_PCD_FILE.into())
                            }
                            Err(ExpansionError::EmptyCloud | ExpansionError::NonFiniteCentroid) => {
                                cx.mge_skipped = true;
                                Ok(format!(
                                    "empty point cloud at stride {}; skipping the centroid \
                                     expansion and rebuilding densely from the clip",
                                    cx.config.stride
                                ))
                            }
                            Err(e) => Err(e.to_string()),
                        }
                    }
                }
                other => Err(format!("unknown point-cloud source listing {other:?}")),
            }
        }

        "centroid_complete" => {
            arg_str(args, "pcd_path")?;
            let eps = opt_f64(args, "eps").unwrap_or(cx.config.eps);
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(format!("eps must be positive and finite, got {eps}"));
            }
            let cap = opt_usize(args, "max_views").unwrap_or(cx.config.mge_cap);
            if cap == 0 {
                return Err("max_views must be at least 1".into());
            }
            let clip = cx
                .clip
                .as_ref()
                .ok_or_else(|| "run vlm_frame_expansion before expanding views".to_string())?;
            let anchor = cx.anchor.ok_or_else(|| {
                "no centroid available; run the initial reconstruction first".to_string()
            })?;
            let pool = geometric_expansion(cx.scene, &anchor, clip, cx.toolkit, eps, cap)
                .map_err(|e| e.to_string())?;
            if let Some(dir) = &cx.out_dir {
                write_centroid_artifacts(cx.scene, &pool, dir).map_err(|e| e.to_string())?;
            }
            cx.pool = Some(pool);
            Ok(format!("('{CENTROID_IMAGES_FILE}', '{CENTROID_MASKS_FILE}')"))
        }

        "calculate_bbox" => {
            arg_str(args, "pcd_path")?;
            let bbox = cx.bbox.ok_or_else(|| {
                "no reconstructed cloud to box; run the final reconstruction first".to_string()
            })?;
            Ok(format_bbox(&bbox))
        }

        other => Err(format!("tool {other:?} has no implementation")),
    }
}

// ---------------------------------------------------------------------------
// Scripted runner
// ---------------------------------------------------------------------------

struct Scripted<'a> {
    registry: ToolRegistry,
    cx: ToolContext<'a>,
    trace: AgentTrace,
}

impl<'a> Scripted<'a> {
    fn step(&mut self, thought: &str, name: &str, args: serde_json::Value) -> String {
        let serde_json::Value::Object(args) = args else {
            unreachable!("scripted steps always pass object arguments")
        };
        let action = AgentAction::ToolCall { name: name.into(), args };
        let observation = dispatch(&self.registry, &action, &mut self.cx);
        self.trace.push(TraceStep {
            thought: thought.into(),
            action,
            observation: observation.clone(),
            effective_config: self.cx.config,
        });
        observation
    }

    fn abort(mut self, reason: String) -> GroundingRun {
        self.trace.push(TraceStep {
            thought: "The pipeline cannot continue.".into(),
            action: AgentAction::Abort { reason },
            observation: String::new(),
            effective_config: self.cx.config,
        });
        GroundingRun { bbox: None, trace: self.trace }
    }

    fn finish(mut self, message: String) -> GroundingRun {
        self.trace.push(TraceStep {
            thought: "The pipeline completed; report the box.".into(),
            action: AgentAction::Finish { message },
            observation: String::new(),
            effective_config: self.cx.config,
        });
        GroundingRun { bbox: self.cx.bbox, trace: self.trace }
    }
}

fn error_reason(observation: &str) -> Option<String> {
    observation.strip_prefix("ERROR: ").map(str::to_string)
}

/// Runs the thirteen pipeline stages in their fixed order, with the standard
/// fallbacks: one coarse-filter retry at the fallback threshold, reverting
/// to the coarse frames when the fine filter empties everything, and a dense
/// clip-only rebuild when the initial cloud is empty. Deterministic given a
/// deterministic toolkit — two runs produce bit-identical traces.
pub fn run_scripted(
    scene: &Arc<Scene>,
    query: &str,
    toolkit: &Toolkit,
    config: PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<GroundingRun, AgentError> {
    config.validate()?;
    let mut s = Scripted {
        registry: ToolRegistry::builtin(),
        cx: ToolContext::new(scene, toolkit, config, query, out_dir),
        trace: AgentTrace::default(),
    };

    macro_rules! run_step {
        ($thought:expr, $name:expr, $args:tt) => {{
            let observation = s.step($thought, $name, serde_json::json!($args));
            if let Some(reason) = error_reason(&observation) {
                return Ok(s.abort(reason));
            }
            observation
        }};
    }

    run_step!("Parse the query into its structured parts.", "query_parse", {"query": query});
    let parsed = s.cx.parsed.clone().expect("query_parse stores its result");

    run_step!(
        "Index the scene's frames before any filtering.",
        "read_image_files",
        {"scene_id": s.cx.scene.scene_id}
    );

    run_step!(
        "Coarse-filter the frames with the detector.",
        "object_filter",
        {
            "image_files_path": IMAGE_FILES_FILE,
            "parsed_query": parsed.target_class,
            "threshold": s.cx.config.detect_threshold,
        }
    );
    if s.cx.coarse.as_ref().is_some_and(Vec::is_empty) {
        run_step!(
            "Zero frames survived the coarse filter; retry once at the fallback threshold.",
            "object_filter",
            {
                "image_files_path": IMAGE_FILES_FILE,
                "parsed_query": parsed.target_class,
                "threshold": s.cx.config.fallback_threshold,
            }
        );
        if s.cx.coarse.as_ref().is_some_and(Vec::is_empty) {
            return Ok(s.abort(
                "no frames contain the target class even at the fallback threshold".into(),
            ));
        }
    }

    run_step!(
        "Check the scene-level constraints on the surviving frames.",
        "vlm_filter",
        {
            "image_files_path": OBJECT_FILTERED_FILE,
            "scene_feature": parsed.scene_feature,
        }
    );
    let mut candidates = VLM_FILTERED_FILE;
    if s.cx.fine.as_ref().is_some_and(Vec::is_empty) {
        candidates = OBJECT_FILTERED_FILE;
        let last = s.trace.steps.last_mut().expect("the filter step was just pushed");
        last.observation.push_str(" (empty; reverting to the coarse filter's frames)");
    }

    run_step!(
        "Score and rank how well each frame shows the described target.",
        "vlm_score",
        {"image_files_path": candidates, "parsed_query": parsed.target_class}
    );

    run_step!(
        "Walk the ranking and mark the target instance in the best view.",
        "argmax_image_and_seg_id",
        {
            "scores_path": VLM_SCORES_FILE,
            "image_files_path": VLM_RANKED_FILE,
            "query": query,
            "parsed_query": parsed.target_class,
            "threshold": s.cx.config.detect_threshold,
        }
    );
    let frame = s.cx.reference_frame.expect("argmax stores the reference frame");
    let seg_id = s.cx.seg_id.expect("argmax stores the instance id");
    let reference_image = s.cx.scene.frame(frame).display_name();

    run_step!(
        "Isolate the chosen instance in the reference view.",
        "segment_target_in_reference",
        {
            "image_path": reference_image,
            "seg_id": seg_id,
            "mask_results_path": REFERENCE_MASKS_FILE,
        }
    );

    run_step!(
        "Track the target through neighbouring frames.",
        "vlm_frame_expansion",
        {
            "reference_image_path": reference_image,
            "max_frames": s.cx.config.ste_cap,
            "threshold": s.cx.config.detect_threshold,
        }
    );

    run_step!(
        "Save the per-frame target masks for reconstruction.",
        "segment_all_target_object",
        {"image_files_path": EXPANDED_IMAGES_FILE}
    );

    run_step!(
        "Lift the tracked masks into an initial point cloud.",
        "reconstruct_point_cloud",
        {"image_files_path": FINAL_IMAGES_FILE, "masks_path": FINAL_MASKS_FILE}
    );

    if s.cx.mge_skipped {
        run_step!(
            "The initial cloud was empty at the sampling stride; rebuild densely from the \
             clip alone and skip the centroid expansion.",
            "reconstruct_point_cloud",
            {"image_files_path": FINAL_IMAGES_FILE, "masks_path": FINAL_MASKS_FILE}
        );
    } else {
        run_step!(
            "Project the centroid across the scene to pick up unseen views.",
            "centroid_complete",
            {
                "pcd_path": PRED_PCD_FILE,
                "eps": s.cx.config.eps,
                "max_views": s.cx.config.mge_cap,
            }
        );
        run_step!(
            "Rebuild the cloud densely from the expanded views.",
            "reconstruct_point_cloud",
            {"image_files_path": CENTROID_IMAGES_FILE, "masks_path": CENTROID_MASKS_FILE}
        );
    }

    let box_string = run_step!(
        "Box the final cloud.",
        "calculate_bbox",
        {"pcd_path": PRED_PCD_FILE}
    );

    let message =
        format!("The 3D bounding box for the {} is {box_string}.", parsed.target_class);
    Ok(s.finish(message))
}

// ---------------------------------------------------------------------------
// ReAct loop
// ---------------------------------------------------------------------------

fn assistant(reply: &str) -> ChatTurn {
    ChatTurn { role: ChatRole::Assistant, parts: vec![ChatPart::Text(reply.to_string())] }
}

/// The planner's thought: the text before the last `Action:` line, with a
/// leading `Thought:` label stripped. Empty when the reply is nothing but
/// the action.
fn planner_thought(reply: &str) -> String {
    let mut cut = None;
    let mut offset = 0;
    for line in reply.split_inclusive('\n') {
        if line.trim_start().starts_with("Action:") {
            cut = Some(offset);
        }
        offset += line.len();
    }
    let Some(cut) = cut else { return String::new() };
    let head = reply[..cut].trim();
    head.strip_prefix("Thought:").map(str::trim).unwrap_or(head).to_string()
}

/// Drives a planner chat model through the grounding loop: the system prompt
/// embeds the skill and registry, each reply is parsed into an action, tool
/// calls are dispatched and their observations fed back. A reply that fails
/// to parse is returned to the planner once as an error observation; failing
/// twice in a row aborts the run, as does exhausting `max_steps`.
pub fn run_react(
    scene: &Arc<Scene>,
    query: &str,
    toolkit: &Toolkit,
    planner: &dyn Chat,
    config: PipelineConfig,
    max_steps: usize,
    out_dir: Option<&Path>,
) -> Result<GroundingRun, AgentError> {
    assert!(max_steps >= 1, "max_steps must admit at least one step");
    config.validate()?;
    let registry = ToolRegistry::builtin();
    let skill = SkillDocument::builtin();
    let mut cx = ToolContext::new(scene, toolkit, config, query, out_dir);
    let mut trace = AgentTrace::default();
    let mut turns = vec![
        ChatTurn::system(system_prompt(&skill, &registry)),
        ChatTurn::user_text(format!("scene_id: {}\nquery: {query}", scene.scene_id)),
    ];

    for _ in 0..max_steps {
        let mut reply = planner.reply(&turns).map_err(AgentError::Planner)?;
        let action = match parse_action(&reply) {
            Ok(action) => action,
            Err(first) => {
                turns.push(assistant(&reply));
                turns.push(ChatTurn::user_text(format!(
                    "Observation: ERROR: {first}. Reply with exactly one action in the \
                     documented format."
                )));
                reply = planner.reply(&turns).map_err(AgentError::Planner)?;
                match parse_action(&reply) {
                    Ok(action) => action,
                    Err(second) => {
                        trace.push(TraceStep {
                            thought: planner_thought(&reply),
                            action: AgentAction::Abort {
                                reason: format!(
                                    "the planner produced unparseable actions twice in a row: \
                                     {second}"
                                ),
                            },
                            observation: String::new(),
                            effective_config: cx.config,
                        });
                        return Ok(GroundingRun { bbox: None, trace });
                    }
                }
            }
        };

        let thought = planner_thought(&reply);
        turns.push(assistant(&reply));
        match action {
            AgentAction::ToolCall { .. } => {
                let observation = dispatch(&registry, &action, &mut cx);
                turns.push(ChatTurn::user_text(format!("Observation: {observation}")));
                trace.push(TraceStep {
                    thought,
                    action,
                    observation,
                    effective_config: cx.config,
                });
            }
            AgentAction::Finish { .. } => {
                trace.push(TraceStep {
                    thought,
                    action,
                    observation: String::new(),
                    effective_config: cx.config,
                });
                return Ok(GroundingRun { bbox: cx.bbox, trace });
            }
            AgentAction::Abort { .. } => {
                trace.push(TraceStep {
                    thought,
                    action,
                    observation: String::new(),
                    effective_config: cx.config,
                });
                return Ok(GroundingRun { bbox: None, trace });
            }
        }
    }

    trace.push(TraceStep {
        thought: String::new(),
        action: AgentAction::Abort { reason: format!("step budget of {max_steps} exhausted") },
        observation: String::new(),
        effective_config: cx.config,
    });
    Ok(GroundingRun { bbox: None, trace })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::agent::render_action;
    use crate::evaluation::iou3d;
    use crate::pointcloud::{axis_aligned_bbox, ply::read_ply};
    use crate::scene::synthetic::{render_frame, render_synthetic, BoxSpec, OrbitSpec, SyntheticSpec};
    use crate::scene::GroundTruth;
    use crate::semantic::replay::{ReplayChat, ReplayEntry, ReplayLog};

    fn spec_with(
        scene_id: &str,
        boxes: Vec<BoxSpec>,
        frames: usize,
        radius: f64,
        height: f64,
    ) -> SyntheticSpec {
        SyntheticSpec {
            scene_id: scene_id.into(),
            width: 96,
            height: 72,
            fov_deg: 60.0,
            frames,
            orbit: OrbitSpec {
                center: [0.0, 0.0, 0.4],
                radius,
                height,
                start_deg: 0.0,
                sweep_deg: 360.0,
            },
            boxes,
        }
    }

    fn cube(class: &str, center: [f64; 3], extent: [f64; 3]) -> BoxSpec {
        BoxSpec { class: class.into(), center, extent, color: None }
    }

    fn build(spec: &SyntheticSpec) -> (Arc<Scene>, GroundTruth) {
        let (scene, gt) = render_synthetic(spec).unwrap();
        (Arc::new(scene), gt)
    }

    /// Per-frame pixel support of one ground-truth instance.
    fn pixel_counts(scene: &Scene, gt: &GroundTruth, pos: usize) -> Vec<usize> {
        (0..scene.len())
            .map(|f| {
                let (_, masks) =
                    render_frame(&scene.intrinsics, &scene.frame(f).pose, &gt.boxes);
                masks[pos].count()
            })
            .collect()
    }

    fn tool_names(trace: &AgentTrace) -> Vec<&str> {
        trace
            .steps
            .iter()
            .filter_map(|s| match &s.action {
                AgentAction::ToolCall { name, .. } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    const HAPPY_PATH: [&str; 13] = [
        "query_parse",
        "read_image_files",
        "object_filter",
        "vlm_filter",
        "vlm_score",
        "argmax_image_and_seg_id",
        "segment_target_in_reference",
        "vlm_frame_expansion",
        "segment_all_target_object",
        "reconstruct_point_cloud",
        "centroid_complete",
        "reconstruct_point_cloud",
        "calculate_bbox",
    ];

    fn happy_scene() -> (Arc<Scene>, GroundTruth) {
        build(&spec_with(
            "runtime-happy",
            vec![
                cube("crate", [0.0, 0.0, 0.4], [0.8, 0.8, 0.8]),
                cube("barrel", [1.7, 0.4, 0.3], [0.35, 0.35, 0.6]),
            ],
            48,
            2.6,
            0.3,
        ))
    }

    #[test]
    fn the_scripted_run_grounds_a_simple_query() {
        let (scene, gt) = happy_scene();
        let toolkit = Toolkit::oracle(scene.clone(), gt.clone());
        let dir = tempfile::tempdir().unwrap();

        let run = run_scripted(
            &scene,
            "the crate next to the barrel",
            &toolkit,
            PipelineConfig::default(),
            Some(dir.path()),
        )
        .unwrap();

        assert!(run.trace.is_terminated());
        assert_eq!(run.trace.steps.len(), 14);
        assert_eq!(tool_names(&run.trace), HAPPY_PATH);
        for step in &run.trace.steps {
            assert!(!step.observation.starts_with("ERROR:"), "step failed: {step:?}");
        }
        assert!(run.trace.thresholds_monotone());

        let bbox = run.bbox.expect("the run finishes with a box");
        let iou = iou3d(&bbox, &gt.boxes[0].bbox);
        assert!(iou >= 0.9, "grounded box too loose: IoU {iou:.3}");

        // The final answer quotes the box the way the trace rendered it.
        let AgentAction::Finish { message } = &run.trace.steps[13].action else {
            panic!("expected a Finish step");
        };
        assert_eq!(
            message,
            &format!("The 3D bounding box for the crate is {}.", format_bbox(&bbox))
        );

        // Every artifact of the run landed in the output directory.
        for name in [
            IMAGE_FILES_FILE,
            OBJECT_FILTERED_FILE,
            VLM_FILTERED_FILE,
            VLM_SCORES_FILE,
            VLM_RANKED_FILE,
            REFERENCE_MASKS_FILE,
            REFERENCE_VIEW_FILE,
            EXPANDED_IMAGES_FILE,
            FINAL_IMAGES_FILE,
            FINAL_MASKS_FILE,
            CENTROID_IMAGES_FILE,
            CENTROID_MASKS_FILE,
            PRED_PCD_FILE,
        ] {
            assert!(dir.path().join(name).exists(), "missing artifact {name}");
        }

        // The saved cloud reproduces the reported box to float32 precision.
        let cloud = read_ply(&dir.path().join(PRED_PCD_FILE)).unwrap();
        let saved = axis_aligned_bbox(&cloud).unwrap();
        for (a, b) in saved.to_array().iter().zip(bbox.to_array()) {
            assert!((a - b).abs() < 1e-4, "saved {saved:?} vs reported {bbox:?}");
        }
    }

    #[test]
    fn scripted_traces_are_bit_identical() {
        let (scene, gt) = happy_scene();
        let toolkit = Toolkit::oracle(scene.clone(), gt);
        let config = PipelineConfig::default();
        let query = "the crate next to the barrel";

        let a = run_scripted(&scene, query, &toolkit, config, None).unwrap();
        let b = run_scripted(&scene, query, &toolkit, config, None).unwrap();
        assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
    }

    #[test]
    fn a_sparse_target_triggers_the_threshold_fallback() {
        let (scene, gt) =
            build(&spec_with("runtime-sparse", vec![cube("crate", [0.0, 0.0, 0.4], [0.5, 0.5, 0.5])], 32, 2.6, 0.3));

        // The fixture only works if the detector's confidence tops out
        // between the two thresholds: px/(px+500) in [0.3, 0.5).
        let max_px = *pixel_counts(&scene, &gt, 0).iter().max().unwrap();
        assert!((250..500).contains(&max_px), "fixture drifted: {max_px} px");

        let toolkit = Toolkit::oracle(scene.clone(), gt.clone());
        let run =
            run_scripted(&scene, "the crate", &toolkit, PipelineConfig::default(), None).unwrap();

        // One extra step: the coarse filter ran twice.
        assert_eq!(run.trace.steps.len(), 15);
        let names = tool_names(&run.trace);
        assert_eq!(&names[2..4], ["object_filter", "object_filter"]);
        assert!(run.trace.steps[2].observation.ends_with(", 0"));

        // The retry recorded the fallback threshold and every later step
        // kept it (Threshold Consistency).
        for step in &run.trace.steps[3..] {
            assert_eq!(step.effective_config.detect_threshold, 0.3, "step {step:?}");
        }
        for (index, key) in [(6usize, "threshold"), (8, "threshold")] {
            let AgentAction::ToolCall { name: _, args } = &run.trace.steps[index].action else {
                panic!("expected a tool call at step {index}");
            };
            assert_eq!(args[key], serde_json::json!(0.3));
        }
        assert!(run.trace.thresholds_monotone());

        let bbox = run.bbox.expect("the fallback run still grounds the target");
        assert!(iou3d(&bbox, &gt.boxes[0].bbox) >= 0.5);
    }

    #[test]
    fn an_impossible_scene_feature_reverts_to_coarse() {
        // The beacon exists in the ground truth but sits far outside every
        // frustum, so the scene filter rejects every frame.
        let (scene, gt) = build(&spec_with(
            "runtime-revert",
            vec![
                cube("crate", [0.0, 0.0, 0.4], [0.8, 0.8, 0.8]),
                cube("beacon", [0.0, 0.0, -80.0], [0.5, 0.5, 0.5]),
            ],
            32,
            2.6,
            0.3,
        ));
        assert!(pixel_counts(&scene, &gt, 1).iter().all(|&px| px == 0), "the beacon must stay unseen");

        let toolkit = Toolkit::oracle(scene.clone(), gt.clone());
        let run = run_scripted(
            &scene,
            "the crate near the beacon",
            &toolkit,
            PipelineConfig::default(),
            None,
        )
        .unwrap();

        assert_eq!(run.trace.steps.len(), 14);
        let filter_step = &run.trace.steps[3];
        assert!(filter_step.observation.contains(", 0 (empty; reverting"), "{filter_step:?}");

        // The scorer was pointed back at the coarse listing.
        let AgentAction::ToolCall { name, args } = &run.trace.steps[4].action else {
            panic!("expected the scoring call");
        };
        assert_eq!(name, "vlm_score");
        assert_eq!(args["image_files_path"], serde_json::json!(OBJECT_FILTERED_FILE));

        let bbox = run.bbox.expect("the revert still grounds the target");
        assert!(iou3d(&bbox, &gt.boxes[0].bbox) >= 0.5);
    }

    /// Builds the replay fixture for the empty-initial-cloud recovery: the
    /// reference mask is two pixels whose row-major rank-0 pixel sits on
    /// background depth, so the strided initial build lifts nothing while
    /// the dense rebuild still finds the on-object pixel.
    fn empty_cloud_fixture() -> (Arc<Scene>, ReplayLog) {
        let (scene, gt) =
            build(&spec_with("runtime-empty", vec![cube("slab", [0.0, 0.0, 0.4], [0.8, 0.8, 0.8])], 4, 2.6, 0.3));

        let reference = 1usize;
        let (depth, masks) =
            render_frame(&scene.intrinsics, &scene.frame(reference).pose, &gt.boxes);
        let (width, height) = (scene.intrinsics.width, scene.intrinsics.height);
        let mut pair = None;
        'rows: for v in 0..height {
            for u in 1..width {
                if masks[0].get(u, v) && depth.get(u, v) > 0.0 && depth.get(u - 1, v) == 0.0 {
                    pair = Some((u, v));
                    break 'rows;
                }
            }
        }
        let (u, v) = pair.expect("the slab has a left edge with empty background");
        let mut rows = vec![vec![0u8; width]; height];
        rows[v][u - 1] = 1; // rank 0: background, lifts to nothing
        rows[v][u] = 1; // rank 1: on the slab

        let mut log = ReplayLog::default();
        log.push_chat(
            "```json\n{\"target_class\": \"slab\", \"attributes\": [], \"conditions\": [], \
             \"scene_feature\": \"a scene containing slab\"}\n```",
        );
        log.push_chat("yes"); // fine filter keeps the one coarse frame
        log.push_chat("{\"is_present\": true, \"score\": 4.5}");
        for frame in 0..scene.len() {
            if frame == reference {
                log.push_detections(serde_json::json!({
                    "detections": [{"box": [10.0, 10.0, 40.0, 40.0], "score": 0.9}],
                }));
            } else {
                log.push_detections(serde_json::json!({"detections": []}));
            }
        }
        // The reference segmentation, then an immediate stop in both
        // tracking directions so the clip stays a single frame.
        log.push_masks(serde_json::json!({"masks": [{"bitmap": rows, "score": 1.0}]}));
        log.push_masks(serde_json::json!({"masks": []}));
        log.push_masks(serde_json::json!({"masks": []}));
        (scene, log)
    }

    #[test]
    fn an_empty_initial_cloud_skips_the_geometric_expansion() {
        let (scene, log) = empty_cloud_fixture();
        let toolkit = Toolkit::replay(scene.clone(), log);
        let mut config = PipelineConfig::default();
        // A single lifted point must survive clustering on its own.
        config.dbscan.min_pts = 1;

        let run = run_scripted(&scene, "the slab", &toolkit, config, None).unwrap();

        let expected: Vec<&str> = HAPPY_PATH
            .iter()
            .copied()
            .filter(|&n| n != "centroid_complete")
            .collect();
        assert_eq!(tool_names(&run.trace), expected, "{}", run.trace.to_jsonl());
        assert_eq!(run.trace.steps.len(), 13);

        let first_build = &run.trace.steps[9];
        assert!(first_build.observation.contains("empty point cloud at stride 2"));
        assert!(run.trace.is_terminated());

        // One pixel lifts to one point: a degenerate but well-formed box.
        let bbox = run.bbox.expect("the recovery path still produces a box");
        assert_eq!(bbox.extent.x, 0.0);
    }

    #[test]
    fn the_react_loop_replays_the_scripted_run() {
        let (scene, gt) = happy_scene();
        let toolkit = Toolkit::oracle(scene.clone(), gt);
        let config = PipelineConfig::default();
        let query = "the crate next to the barrel";

        let scripted = run_scripted(&scene, query, &toolkit, config, None).unwrap();

        // A planner that replays the scripted decisions verbatim.
        let replies: Vec<ReplayEntry> = scripted
            .trace
            .steps
            .iter()
            .map(|step| {
                ReplayEntry::any(serde_json::Value::String(format!(
                    "Thought: {}\nAction: {}",
                    step.thought,
                    render_action(&step.action)
                )))
            })
            .collect();
        let planner = ReplayChat::new(replies);

        let react = run_react(&scene, query, &toolkit, &planner, config, 50, None).unwrap();
        assert_eq!(react.trace, scripted.trace);
        assert_eq!(
            react.bbox.map(|b| b.to_array()),
            scripted.bbox.map(|b| b.to_array())
        );
    }

    #[test]
    fn an_unparseable_reply_is_retried_once() {
        let (scene, gt) = happy_scene();
        let toolkit = Toolkit::oracle(scene.clone(), gt);
        let config = PipelineConfig::default();

        // Garbage, then a well-formed abort: one trace step.
        let planner = ReplayChat::new(vec![
            ReplayEntry::any(serde_json::json!("let me think about this...")),
            ReplayEntry::any(serde_json::json!("Thought: hopeless\nAction: Abort[confused]")),
        ]);
        let run = run_react(&scene, "the crate", &toolkit, &planner, config, 10, None).unwrap();
        assert_eq!(run.trace.steps.len(), 1);
        assert_eq!(
            run.trace.steps[0].action,
            AgentAction::Abort { reason: "confused".into() }
        );
        assert!(run.bbox.is_none());

        // Garbage twice: the loop gives up by itself.
        let planner = ReplayChat::new(vec![
            ReplayEntry::any(serde_json::json!("???")),
            ReplayEntry::any(serde_json::json!("still not an action")),
        ]);
        let run = run_react(&scene, "the crate", &toolkit, &planner, config, 10, None).unwrap();
        assert_eq!(run.trace.steps.len(), 1);
        let AgentAction::Abort { reason } = &run.trace.steps[0].action else {
            panic!("expected an abort");
        };
        assert!(reason.contains("unparseable actions twice"));
    }

    #[test]
    fn bad_tool_calls_become_error_observations() {
        let (scene, gt) = happy_scene();
        let toolkit = Toolkit::oracle(scene.clone(), gt);
        let config = PipelineConfig::default();

        let planner = ReplayChat::new(vec![
            ReplayEntry::any(serde_json::json!("Action: warp_drive({})")),
            ReplayEntry::any(serde_json::json!(
                "Action: object_filter({\"image_files_path\": \"image_files.json\", \
                 \"parsed_query\": \"crate\"})"
            )),
            ReplayEntry::any(serde_json::json!("Action: calculate_bbox({\"pcd_path\": \"pred_pcd.ply\"})")),
            ReplayEntry::any(serde_json::json!("Action: Abort[cannot recover]")),
        ]);
        let run = run_react(&scene, "the crate", &toolkit, &planner, config, 10, None).unwrap();

        assert_eq!(run.trace.steps.len(), 4);
        assert!(run.trace.steps[0].observation.starts_with("ERROR: unknown tool"));
        assert!(run.trace.steps[1]
            .observation
            .contains("missing required argument `threshold`"));
        assert!(run.trace.steps[2].observation.starts_with("ERROR: no reconstructed cloud"));
        assert!(run.trace.is_terminated());
    }

    #[test]
    fn the_step_budget_aborts_the_run() {
        let (scene, gt) = happy_scene();
        let toolkit = Toolkit::oracle(scene.clone(), gt);
        let config = PipelineConfig::default();

        let reply = "Action: query_parse({\"query\": \"the crate\"})";
        let planner = ReplayChat::new(vec![
            ReplayEntry::any(serde_json::json!(reply)),
            ReplayEntry::any(serde_json::json!(reply)),
            ReplayEntry::any(serde_json::json!(reply)),
        ]);
        let run = run_react(&scene, "the crate", &toolkit, &planner, config, 3, None).unwrap();

        assert_eq!(run.trace.steps.len(), 4);
        let AgentAction::Abort { reason } = &run.trace.steps[3].action else {
            panic!("expected the budget abort");
        };
        assert!(reason.contains("step budget of 3"));
        assert!(run.bbox.is_none());
    }

    #[test]
    fn the_system_prompt_embeds_skill_and_registry() {
        let prompt = system_prompt(&SkillDocument::builtin(), &ToolRegistry::builtin());
        assert!(prompt.contains("Threshold Consistency"));
        assert!(prompt.contains("- query_parse(query: string)"));
        assert!(prompt.contains("query_parse, read_image_files, object_filter"));
        for placeholder in ["{skill_description}", "{tool_descriptions}", "{tool_names}"] {
            assert!(!prompt.contains(placeholder), "unfilled {placeholder}");
        }
    }

    #[test]
    fn observations_match_the_published_shapes() {
        let (scene, gt) = happy_scene();
        let toolkit = Toolkit::oracle(scene.clone(), gt);
        let run = run_scripted(
            &scene,
            "the crate next to the barrel",
            &toolkit,
            PipelineConfig::default(),
            None,
        )
        .unwrap();

        let obs: Vec<&str> =
            run.trace.steps.iter().map(|s| s.observation.as_str()).collect();
        assert_eq!(obs[1], "image_files.json");
        assert!(obs[2].starts_with("object_filtered_image_files.json, "));
        assert!(obs[3].starts_with("vlm_filtered_image_files.json, "));
        assert_eq!(obs[4], "('vlm_scores.json', 'vlm_ranked_image_files.json')");
        assert!(obs[5].starts_with("('") && obs[5].ends_with(", 'reference_image_mask_results.json')"));
        assert_eq!(obs[6], "reference_image_with_target_mask_box.png");
        assert!(obs[7].starts_with("('expanded_image_files.json', "));
        assert_eq!(obs[8], "('final_images.json', 'final_masks.json')");
        assert_eq!(obs[9], "pred_pcd.ply");
        assert_eq!(obs[10], "('centroid_final_images.json', 'centroid_final_masks.json')");
        assert_eq!(obs[11], "pred_pcd.ply");
        assert!(obs[12].starts_with('[') && obs[12].ends_with(']'));
    }
}
