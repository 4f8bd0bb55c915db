//! Growing one verified mask into a multi-view observation set.
//!
//! A single good segmentation rarely sees the whole object, so coverage is
//! grown in stages:
//!
//! 1. [`semantic_temporal_expansion`] tracks the target through a contiguous
//!    clip of neighbouring frames, re-segmenting and re-verifying at every
//!    step so drift is caught before it compounds.
//! 2. [`initial_build`] lifts the clip's masks into a provisional point
//!    cloud whose centroid anchors the next stage.
//! 3. [`geometric_expansion`] projects that centroid into every remaining
//!    frame and pools the ones that genuinely observe it. The test is purely
//!    geometric, so it recovers viewpoints an appearance-based pass would
//!    miss — including frames rejected earlier in the pipeline.
//!
//! [`final_reconstruction`] then turns the pooled masks into a denoised,
//! clustered cloud and its axis-aligned box. Each stage's frame set and
//! masks can be written as JSON artifacts for inspection or replay.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    lift_mask, visibility_check, GeometryError, Point3, RleMask, Visibility,
};
use crate::pointcloud::{
    axis_aligned_bbox, centroid, dbscan, largest_cluster, statistical_outlier_removal, Bbox3D,
    PointCloud,
};
use crate::scene::{Scene, SceneError};
use crate::semantic::{verify_tracking, PixelRect, SegmentMask, SegmentPrompt, Toolkit};

/// How many tracked frames anchor each verification step (the nearest ones,
/// in frame order).
const VERIFY_CONTEXT: usize = 4;

#[derive(Debug, Error)]
pub enum ExpansionError {
    /// Every masked pixel carried an invalid depth reading.
    #[error("no masked pixel lifted to a valid 3D point")]
    EmptyCloud,
    /// The anchor centroid has a NaN or infinite coordinate.
    #[error("anchor centroid is not finite")]
    NonFiniteCentroid,
    /// Clustering labelled every point as noise.
    #[error("no cluster survived filtering")]
    NoCluster,
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("artifact write failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Statistical outlier removal settings for the final cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SorConfig {
    /// Neighbours examined per point.
    pub k: usize,
    /// Points whose mean neighbour distance exceeds `mean + std_ratio * σ`
    /// are dropped.
    pub std_ratio: f64,
}

impl Default for SorConfig {
    fn default() -> Self {
        Self { k: 20, std_ratio: 2.0 }
    }
}

/// Density clustering settings for isolating the target from stray surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanConfig {
    /// Neighbourhood radius in metres.
    pub eps: f64,
    /// Neighbours (self included) that make a point a core point.
    pub min_pts: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        Self { eps: 0.1, min_pts: 8 }
    }
}

/// A contiguous run of frames that tracked the target, one mask per frame.
#[derive(Debug, Clone)]
pub struct TrackedClip {
    entries: Vec<(usize, SegmentMask)>,
    ref_index: usize,
}

impl TrackedClip {
    /// Wraps per-frame masks as a clip. The entries must be sorted over a
    /// contiguous frame range containing `ref_index`, and every mask must be
    /// non-empty and tagged with its own frame.
    pub fn new(entries: Vec<(usize, SegmentMask)>, ref_index: usize) -> Self {
        assert!(!entries.is_empty(), "a clip holds at least one frame");
        for pair in entries.windows(2) {
            assert!(pair[1].0 == pair[0].0 + 1, "clip frames must be contiguous");
        }
        assert!(
            entries.iter().any(|(frame, _)| *frame == ref_index),
            "the reference frame must be inside the clip"
        );
        for (frame, mask) in &entries {
            assert!(!mask.bitmap.is_empty(), "clip masks are never empty");
            assert_eq!(mask.frame_index, *frame, "mask tagged with the wrong frame");
        }
        Self { entries, ref_index }
    }

    fn from_map(map: BTreeMap<usize, SegmentMask>, ref_index: usize) -> Self {
        Self::new(map.into_iter().collect(), ref_index)
    }

    /// The frame the clip grew from.
    pub fn ref_index(&self) -> usize {
        self.ref_index
    }

    pub fn entries(&self) -> &[(usize, SegmentMask)] {
        &self.entries
    }

    /// Frame indices in ascending order.
    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|(frame, _)| *frame).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.entries.binary_search_by_key(&frame, |entry| entry.0).is_ok()
    }

    pub fn first_frame(&self) -> usize {
        self.entries.first().expect("clip is non-empty").0
    }

    pub fn last_frame(&self) -> usize {
        self.entries.last().expect("clip is non-empty").0
    }

    /// Serializable mask rows for the clip's frames.
    pub fn mask_records(&self, scene: &Scene) -> Vec<MaskRecord> {
        self.entries
            .iter()
            .map(|(frame, mask)| MaskRecord {
                frame_index: *frame,
                image: scene.frame(*frame).display_name(),
                source: Source::Semantic,
                rle: mask.bitmap.to_rle(),
            })
            .collect()
    }
}

/// Where a pooled mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Tracked through the clip by appearance.
    Semantic,
    /// Added because the anchor centroid is visible in the frame.
    Geometric,
}

/// Frame/mask pairs pooled for reconstruction, each tagged with its origin.
/// Frames are unique and ascending; the tracked clip is always a subset.
#[derive(Debug, Clone)]
pub struct ExpansionPool {
    entries: Vec<(usize, SegmentMask, Source)>,
}

impl ExpansionPool {
    /// Seeds a pool with the clip's masks.
    pub fn from_clip(clip: &TrackedClip) -> Self {
        let entries = clip
            .entries()
            .iter()
            .map(|(frame, mask)| (*frame, mask.clone(), Source::Semantic))
            .collect();
        Self { entries }
    }

    fn insert_geometric(&mut self, frame: usize, mask: SegmentMask) {
        match self.entries.binary_search_by_key(&frame, |entry| entry.0) {
            Ok(_) => panic!("frame {frame} pooled twice"),
            Err(pos) => self.entries.insert(pos, (frame, mask, Source::Geometric)),
        }
    }

    pub fn entries(&self) -> &[(usize, SegmentMask, Source)] {
        &self.entries
    }

    /// Frame indices in ascending order.
    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|(frame, _, _)| *frame).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.entries.binary_search_by_key(&frame, |entry| entry.0).is_ok()
    }

    /// Serializable mask rows for the pool's frames.
    pub fn mask_records(&self, scene: &Scene) -> Vec<MaskRecord> {
        self.entries
            .iter()
            .map(|(frame, mask, source)| MaskRecord {
                frame_index: *frame,
                image: scene.frame(*frame).display_name(),
                source: *source,
                rle: mask.bitmap.to_rle(),
            })
            .collect()
    }
}

/// Highest-scoring non-empty mask; the earliest wins ties so replays are
/// stable.
fn best_mask(masks: Vec<SegmentMask>) -> Option<SegmentMask> {
    let mut best: Option<SegmentMask> = None;
    for mask in masks {
        if mask.bitmap.is_empty() {
            continue;
        }
        if best.as_ref().map_or(true, |b| mask.score > b.score) {
            best = Some(mask);
        }
    }
    best
}

/// Up to [`VERIFY_CONTEXT`] tracked frames nearest the candidate, in frame
/// order, each paired with its mask's bounding rectangle.
fn verification_context(
    clip: &BTreeMap<usize, SegmentMask>,
    candidate: usize,
) -> Vec<(usize, PixelRect)> {
    let mut frames: Vec<usize> = clip.keys().copied().collect();
    frames.sort_by_key(|&frame| (frame.abs_diff(candidate), frame));
    frames.truncate(VERIFY_CONTEXT);
    frames.sort_unstable();
    frames
        .into_iter()
        .map(|frame| {
            let bounds = clip[&frame].bitmap.bounds().expect("accepted masks are never empty");
            (frame, PixelRect::from_mask_bounds(bounds))
        })
        .collect()
}

/// Walks one direction away from the reference, growing `clip` until a stop
/// condition fires: scene boundary, invalid frame, empty segmentation, a
/// verifier refusal, a toolkit failure, or the step quota. Returns the next
/// candidate frame when only the quota stopped the walk, so a later pass can
/// resume it.
fn walk(
    scene: &Scene,
    toolkit: &Toolkit,
    clip: &mut BTreeMap<usize, SegmentMask>,
    start: i64,
    step: i64,
    quota: usize,
) -> Option<i64> {
    let mut frame = start;
    let mut used = 0;
    while used < quota {
        if frame < 0 || frame >= scene.len() as i64 {
            return None;
        }
        let index = frame as usize;
        if !scene.frame(index).valid {
            return None;
        }
        // Re-segment with the rectangle of the nearest accepted mask: the
        // frame one step back, which this walk (or the reference) accepted.
        let anchor = &clip[&((frame - step) as usize)];
        let prompt = SegmentPrompt::Box(PixelRect::from_mask_bounds(
            anchor.bitmap.bounds().expect("accepted masks are never empty"),
        ));
        let masks = match toolkit.segmenter.segment(index, &prompt) {
            Ok(masks) => masks,
            Err(err) => {
                log::warn!("tracking stopped at frame {index}: segmenter failed ({err})");
                return None;
            }
        };
        let Some(best) = best_mask(masks) else {
            return None; // the target left this frame
        };
        match verify_tracking(&verification_context(clip, index), index, toolkit.chat.as_ref()) {
            Ok(true) => {}
            Ok(false) => return None,
            Err(err) => {
                log::warn!("tracking stopped at frame {index}: verification failed ({err})");
                return None;
            }
        }
        clip.insert(index, best);
        used += 1;
        frame += step;
    }
    Some(frame)
}

/// Grows a verified reference mask into a contiguous tracked clip.
///
/// The clip expands frame by frame away from the reference — forward first,
/// then backward — re-segmenting each candidate inside the nearest accepted
/// mask's rectangle and asking the verifier whether the result is still the
/// same object. A direction stops at the first refusal, empty segmentation,
/// scene boundary, or toolkit failure, so one bad frame never poisons the
/// rest. `cap` bounds the clip size with the reference counted in; the
/// remaining budget is split as evenly as each direction allows, and a side
/// that stops early hands its unused share to the other.
///
/// Tracking never fails: in the worst case the clip is the reference frame
/// alone. Directions run one after the other so repeated runs produce
/// identical clips.
pub fn semantic_temporal_expansion(
    scene: &Scene,
    reference: (usize, SegmentMask),
    toolkit: &Toolkit,
    cap: usize,
) -> TrackedClip {
    let (ref_index, ref_mask) = reference;
    assert!(cap >= 1, "cap must admit the reference frame");
    assert!(ref_index < scene.len(), "reference frame out of range");
    assert!(!ref_mask.bitmap.is_empty(), "reference mask is empty");

    let mut clip = BTreeMap::new();
    clip.insert(ref_index, ref_mask);

    let budget = cap - 1;
    let forward_quota = budget - budget / 2;
    let resume = walk(scene, toolkit, &mut clip, ref_index as i64 + 1, 1, forward_quota);
    let backward_quota = budget - (clip.len() - 1);
    walk(scene, toolkit, &mut clip, ref_index as i64 - 1, -1, backward_quota);

    // Backward may have stopped short of its share; a forward walk that
    // paused only for budget picks up the leftover.
    let leftover = budget - (clip.len() - 1);
    if leftover > 0 {
        if let Some(next) = resume {
            walk(scene, toolkit, &mut clip, next, 1, leftover);
        }
    }
    TrackedClip::from_map(clip, ref_index)
}

/// Lifts each entry's masked pixels into one world-frame cloud.
fn lift_entries<'a>(
    scene: &Scene,
    entries: impl Iterator<Item = (usize, &'a crate::geometry::Bitmap)>,
    stride: usize,
) -> Result<PointCloud, ExpansionError> {
    let mut points = Vec::new();
    for (index, bitmap) in entries {
        let frame = scene.frame(index);
        let depth = frame.depth()?;
        points.extend(lift_mask(&depth, bitmap, &scene.intrinsics, &frame.pose, stride)?);
    }
    Ok(PointCloud::from_points(points))
}

/// Lifts the clip's masks into a provisional cloud and its centroid — the
/// anchor for geometric expansion.
///
/// Masked pixels without a depth reading are skipped during lifting, so a
/// clip whose masks cover only dead sensor regions yields
/// [`ExpansionError::EmptyCloud`].
pub fn initial_build(
    scene: &Scene,
    clip: &TrackedClip,
    stride: usize,
) -> Result<(PointCloud, Point3), ExpansionError> {
    let cloud = lift_entries(
        scene,
        clip.entries().iter().map(|(frame, mask)| (*frame, &mask.bitmap)),
        stride,
    )?;
    if cloud.is_empty() {
        return Err(ExpansionError::EmptyCloud);
    }
    let anchor = centroid(&cloud).expect("non-empty cloud has a centroid");
    Ok((cloud, anchor))
}

/// Pools every frame that geometrically observes the anchor centroid.
///
/// Each valid frame outside the clip is classified with the occlusion-aware
/// visibility test; frames that pass become point-prompt segmentations at
/// the centroid's projected pixel. When more than `cap` frames qualify, a
/// uniform temporal stride keeps the pool viewpoint-diverse without blowing
/// the budget. Segmenter failures and empty masks skip the frame (logged)
/// rather than aborting — the clip alone is already a usable pool.
pub fn geometric_expansion(
    scene: &Scene,
    anchor: &Point3,
    clip: &TrackedClip,
    toolkit: &Toolkit,
    eps: f64,
    cap: usize,
) -> Result<ExpansionPool, ExpansionError> {
    assert!(eps > 0.0 && eps.is_finite(), "occlusion tolerance must be positive");
    if !anchor.coords.iter().all(|c| c.is_finite()) {
        return Err(ExpansionError::NonFiniteCentroid);
    }

    let mut pool = ExpansionPool::from_clip(clip);
    let mut candidates = Vec::new();
    for (index, frame) in scene.frames.iter().enumerate() {
        if !frame.valid || pool.contains(index) {
            continue;
        }
        let depth = frame.depth()?;
        let (visibility, pixel) =
            visibility_check(anchor, &depth, &frame.pose, &scene.intrinsics, eps);
        if visibility == Visibility::Visible {
            candidates.push((index, pixel.u.round() as u32, pixel.v.round() as u32));
        }
    }

    let selected: Vec<(usize, u32, u32)> = if candidates.len() > cap {
        (0..cap).map(|j| candidates[j * candidates.len() / cap]).collect()
    } else {
        candidates
    };

    for (index, u, v) in selected {
        match toolkit.segmenter.segment(index, &SegmentPrompt::Point { u, v }) {
            Ok(masks) => match best_mask(masks) {
                Some(mask) => pool.insert_geometric(index, mask),
                None => log::debug!("frame {index}: nothing under the anchor pixel, skipped"),
            },
            Err(err) => log::warn!("frame {index}: segmenter failed ({err}), skipped"),
        }
    }
    Ok(pool)
}

/// Reconstructs the target's cloud and axis-aligned box from pooled masks.
///
/// All masks are lifted at `stride`, denoised by statistical outlier
/// removal, density-clustered, and reduced to the largest cluster. Clouds
/// with no more points than the outlier filter's neighbour count skip the
/// filter — too few samples to estimate statistics — rather than failing.
pub fn final_reconstruction(
    scene: &Scene,
    pool: &ExpansionPool,
    sor: SorConfig,
    db: DbscanConfig,
    stride: usize,
) -> Result<(PointCloud, Bbox3D), ExpansionError> {
    assert!(!pool.is_empty(), "reconstruction needs a non-empty pool");
    let cloud = lift_entries(
        scene,
        pool.entries().iter().map(|(frame, mask, _)| (*frame, &mask.bitmap)),
        stride,
    )?;
    if cloud.is_empty() {
        return Err(ExpansionError::EmptyCloud);
    }
    let cloud = if cloud.len() > sor.k {
        statistical_outlier_removal(&cloud, sor.k, sor.std_ratio)
            .expect("cloud is larger than the neighbour count")
    } else {
        log::debug!("cloud of {} points too small to denoise (k = {})", cloud.len(), sor.k);
        cloud
    };
    let labels = dbscan(&cloud, db.eps, db.min_pts);
    // Labels come from the same cloud, so the only failure is all-noise.
    let cluster = largest_cluster(&cloud, &labels).map_err(|_| ExpansionError::NoCluster)?;
    let bbox = axis_aligned_bbox(&cluster).expect("cluster is non-empty");
    Ok((cluster, bbox))
}

/// Frame listing written after tracking.
pub const EXPANDED_IMAGES_FILE: &str = "expanded_image_files.json";
/// Frame listing written with the clip's masks.
pub const FINAL_IMAGES_FILE: &str = "final_images.json";
/// Mask archive for the clip.
pub const FINAL_MASKS_FILE: &str = "final_masks.json";
/// Frame listing written after geometric expansion.
pub const CENTROID_IMAGES_FILE: &str = "centroid_final_images.json";
/// Mask archive for the expansion pool.
pub const CENTROID_MASKS_FILE: &str = "centroid_final_masks.json";

/// One pooled mask, serialized with run-length counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub frame_index: usize,
    /// Display name of the frame's colour image.
    pub image: String,
    pub source: Source,
    pub rle: RleMask,
}

fn image_names(scene: &Scene, frames: &[usize]) -> Vec<String> {
    frames.iter().map(|&frame| scene.frame(frame).display_name()).collect()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), ExpansionError> {
    let text = serde_json::to_string_pretty(value).expect("artifact types serialize");
    fs::write(path, text)?;
    Ok(())
}

/// Writes the clip's frame listing ([`EXPANDED_IMAGES_FILE`]).
pub fn write_expanded_listing(
    scene: &Scene,
    clip: &TrackedClip,
    dir: &Path,
) -> Result<PathBuf, ExpansionError> {
    let path = dir.join(EXPANDED_IMAGES_FILE);
    write_json(&image_names(scene, &clip.frames()), &path)?;
    Ok(path)
}

/// Writes the clip's images and masks ([`FINAL_IMAGES_FILE`],
/// [`FINAL_MASKS_FILE`]).
pub fn write_final_artifacts(
    scene: &Scene,
    clip: &TrackedClip,
    dir: &Path,
) -> Result<(PathBuf, PathBuf), ExpansionError> {
    let images = dir.join(FINAL_IMAGES_FILE);
    let masks = dir.join(FINAL_MASKS_FILE);
    write_json(&image_names(scene, &clip.frames()), &images)?;
    write_json(&clip.mask_records(scene), &masks)?;
    Ok((images, masks))
}

/// Writes the pool's images and masks ([`CENTROID_IMAGES_FILE`],
/// [`CENTROID_MASKS_FILE`]).
pub fn write_centroid_artifacts(
    scene: &Scene,
    pool: &ExpansionPool,
    dir: &Path,
) -> Result<(PathBuf, PathBuf), ExpansionError> {
    let images = dir.join(CENTROID_IMAGES_FILE);
    let masks = dir.join(CENTROID_MASKS_FILE);
    write_json(&image_names(scene, &pool.frames()), &images)?;
    write_json(&pool.mask_records(scene), &masks)?;
    Ok((images, masks))
}
