//! Scene storage: a scene is a directory of posed RGB-D frames
//!
//! ```text
//! scene/
//!   intrinsics.txt      fx fy cx cy width height (whitespace separated)
//!   color/<id>.png      8-bit RGB (JPEG also accepted)
//!   depth/<id>.png      16-bit grayscale, millimetres, 0 = no reading
//!   pose/<id>.txt       4x4 row-major camera-to-world matrix
//!   ground_truth.json   optional: labelled boxes for oracle runs
//! ```
//!
//! Frames are the ids present in all three subdirectories, ordered by
//! numeric id, uniformly subsampled to a frame budget. Depth and colour are
//! decoded lazily and cached per frame.

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DepthMap, GeometryError, Intrinsics, Pose};
use crate::pointcloud::Bbox3D;

pub mod synthetic;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("bad intrinsics file {path}: {reason}")]
    BadIntrinsics { path: PathBuf, reason: String },
    #[error("bad pose file {path}: {reason}")]
    BadPose { path: PathBuf, reason: String },
    #[error("depth image {path} is not 16-bit grayscale")]
    UnsupportedDepthFormat { path: PathBuf },
    #[error("scene at {0} has no usable frames")]
    NoValidFrames(PathBuf),
    #[error("synthetic spec invalid: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("malformed ground truth: {0}")]
    BadGroundTruth(String),
}

/// Where a frame's pixel data comes from: a file on disk or memory (the
/// synthetic renderer produces in-memory frames).
#[derive(Debug, Clone)]
enum DepthSource {
    File(PathBuf),
    Memory(Arc<DepthMap>),
}

#[derive(Debug, Clone)]
enum RgbSource {
    File(PathBuf),
    Memory(Arc<RgbImage>),
}

/// One posed RGB-D frame. `index` is the frame's position within the loaded
/// scene (the index space every pipeline stage works in); `source_id` is the
/// on-disk id it came from.
#[derive(Debug)]
pub struct SceneFrame {
    pub index: usize,
    pub source_id: String,
    pub pose: Pose,
    /// Always true for frames returned by [`load_scene`]; frames that fail
    /// validation are dropped rather than kept in the scene.
    pub valid: bool,
    depth: DepthSource,
    rgb: RgbSource,
    depth_cache: OnceLock<Arc<DepthMap>>,
    rgb_cache: OnceLock<Arc<RgbImage>>,
}

impl SceneFrame {
    /// The frame's depth map in metres, decoding and caching on first use.
    pub fn depth(&self) -> Result<Arc<DepthMap>, SceneError> {
        if let Some(d) = self.depth_cache.get() {
            return Ok(d.clone());
        }
        let loaded = match &self.depth {
            DepthSource::Memory(d) => d.clone(),
            DepthSource::File(path) => Arc::new(read_depth(path)?),
        };
        Ok(self.depth_cache.get_or_init(|| loaded).clone())
    }

    /// The frame's colour image, decoding and caching on first use.
    pub fn rgb(&self) -> Result<Arc<RgbImage>, SceneError> {
        if let Some(i) = self.rgb_cache.get() {
            return Ok(i.clone());
        }
        let loaded = match &self.rgb {
            RgbSource::Memory(i) => i.clone(),
            RgbSource::File(path) => Arc::new(image::open(path)?.to_rgb8()),
        };
        Ok(self.rgb_cache.get_or_init(|| loaded).clone())
    }

    /// Path of the colour image, if the frame is file-backed. Used for
    /// human-readable artifact listings.
    pub fn rgb_path(&self) -> Option<&Path> {
        match &self.rgb {
            RgbSource::File(p) => Some(p),
            RgbSource::Memory(_) => None,
        }
    }

    /// Display name for artifacts: the rgb path when file-backed, otherwise
    /// a synthetic `<id>.png` name.
    pub fn display_name(&self) -> String {
        match self.rgb_path() {
            Some(p) => p.display().to_string(),
            None => format!("{}.png", self.source_id),
        }
    }

    fn from_memory(
        index: usize,
        source_id: String,
        pose: Pose,
        depth: Arc<DepthMap>,
        rgb: Arc<RgbImage>,
    ) -> Self {
        Self {
            index,
            source_id,
            pose,
            valid: true,
            depth: DepthSource::Memory(depth),
            rgb: RgbSource::Memory(rgb),
            depth_cache: OnceLock::new(),
            rgb_cache: OnceLock::new(),
        }
    }
}

/// A loaded scene: ordered frames plus the shared pinhole intrinsics.
#[derive(Debug)]
pub struct Scene {
    pub scene_id: String,
    pub intrinsics: Intrinsics,
    pub frames: Vec<SceneFrame>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, index: usize) -> &SceneFrame {
        &self.frames[index]
    }
}

/// One labelled ground-truth box of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub id: u32,
    pub class: String,
    pub bbox: Bbox3D,
    #[serde(default = "default_box_color")]
    pub color: [u8; 3],
}

fn default_box_color() -> [u8; 3] {
    [180, 180, 180]
}

/// Ground truth for a scene: the labelled boxes. Per-frame visibility masks
/// are derived on demand by re-rendering (see [`synthetic::render_frame`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GroundTruth {
    pub boxes: Vec<GtBox>,
}

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path)?;
        let gt: GroundTruth = serde_json::from_str(&text)
            .map_err(|e| SceneError::BadGroundTruth(e.to_string()))?;
        let mut ids: Vec<u32> = gt.boxes.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != gt.boxes.len() {
            return Err(SceneError::BadGroundTruth("duplicate box ids".into()));
        }
        Ok(gt)
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        let mut text = serde_json::to_string_pretty(self).expect("ground truth serializes");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Ground-truth file conventionally stored next to the frames.
    pub fn default_path(scene_dir: &Path) -> PathBuf {
        scene_dir.join("ground_truth.json")
    }
}

/// Parses `intrinsics.txt`: six whitespace-separated numbers
/// `fx fy cx cy width height`.
pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, SceneError> {
    let text = std::fs::read_to_string(path)?;
    let bad = |reason: &str| SceneError::BadIntrinsics {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let nums: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("non-numeric field"))?;
    if nums.len() != 6 {
        return Err(bad(&format!("expected 6 fields, got {}", nums.len())));
    }
    if nums[4].fract() != 0.0 || nums[5].fract() != 0.0 || nums[4] <= 0.0 || nums[5] <= 0.0 {
        return Err(bad("width/height must be positive integers"));
    }
    Intrinsics::new(nums[0], nums[1], nums[2], nums[3], nums[4] as usize, nums[5] as usize)
        .map_err(|e| bad(&e.to_string()))
}

pub fn write_intrinsics(k: &Intrinsics, path: &Path) -> Result<(), SceneError> {
    std::fs::write(
        path,
        format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height),
    )?;
    Ok(())
}

/// Decodes a 16-bit grayscale PNG of millimetre depths into metres.
pub fn read_depth(path: &Path) -> Result<DepthMap, SceneError> {
    let img = image::open(path)?;
    let buf = match img {
        image::DynamicImage::ImageLuma16(buf) => buf,
        _ => return Err(SceneError::UnsupportedDepthFormat { path: path.to_path_buf() }),
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let data = buf.into_raw().iter().map(|&mm| mm as f32 / 1000.0).collect();
    Ok(DepthMap::new(w, h, data))
}

/// Encodes a depth map as 16-bit millimetre PNG. Readings outside the u16
/// millimetre range are clamped; non-positive readings store 0.
pub fn write_depth(depth: &DepthMap, path: &Path) -> Result<(), SceneError> {
    let raw: Vec<u16> = depth
        .data()
        .iter()
        .map(|&m| {
            if m <= 0.0 {
                0
            } else {
                ((m as f64) * 1000.0).round().min(u16::MAX as f64) as u16
            }
        })
        .collect();
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, raw)
            .expect("buffer size matches");
    buf.save(path)?;
    Ok(())
}

/// Parses a 4x4 row-major camera-to-world pose file.
pub fn read_pose(path: &Path) -> Result<Pose, SceneError> {
    let text = std::fs::read_to_string(path)?;
    let bad = |reason: String| SceneError::BadPose { path: path.to_path_buf(), reason };
    let nums: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| bad(format!("non-numeric field '{t}'")))
        })
        .collect::<Result<_, _>>()?;
    if nums.len() != 16 {
        return Err(bad(format!("expected 16 fields, got {}", nums.len())));
    }
    if nums.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite entries".into()));
    }
    let m = nalgebra::Matrix4::from_row_slice(&nums);
    Pose::from_matrix(&m).map_err(|e| bad(e.to_string()))
}

pub fn write_pose(pose: &Pose, path: &Path) -> Result<(), SceneError> {
    let m = pose.to_matrix();
    let mut text = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{}", m[(r, c)])).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads a scene directory, keeping at most `max_frames` frames by uniform
/// temporal subsampling. Frames with unreadable or non-rigid poses are
/// dropped (with a warning) rather than failing the whole scene.
pub fn load_scene(dir: &Path, max_frames: usize) -> Result<Scene, SceneError> {
    assert!(max_frames >= 1, "max_frames must be >= 1");
    let intrinsics = read_intrinsics(&dir.join("intrinsics.txt"))?;

    let color_dir = dir.join("color");
    let depth_dir = dir.join("depth");
    let pose_dir = dir.join("pose");

    // Candidate ids: stems present in color/ with a depth and pose sibling.
    let mut ids: Vec<(IdKey, String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(&color_dir)? {
        let entry = entry?;
        let path = entry.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !matches!(ext, "png" | "jpg" | "jpeg") {
            continue;
        }
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s.to_string(),
            None => continue,
        };
        if depth_dir.join(format!("{stem}.png")).is_file()
            && pose_dir.join(format!("{stem}.txt")).is_file()
        {
            ids.push((IdKey::from(stem.as_str()), stem, path));
        } else {
            log::warn!("frame {stem}: missing depth or pose, skipping");
        }
    }
    ids.sort();

    // Uniform subsample before validity filtering, so a bad pose reduces the
    // scene by exactly one frame instead of shifting the sampling lattice.
    let picked: Vec<(String, PathBuf)> = if ids.len() > max_frames {
        (0..max_frames)
            .map(|i| {
                let j = i * ids.len() / max_frames;
                (ids[j].1.clone(), ids[j].2.clone())
            })
            .collect()
    } else {
        ids.into_iter().map(|(_, stem, path)| (stem, path)).collect()
    };

    let mut frames = Vec::new();
    for (stem, rgb_path) in picked {
        let pose_path = pose_dir.join(format!("{stem}.txt"));
        let pose = match read_pose(&pose_path) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("frame {stem}: invalid pose ({e}), excluding");
                continue;
            }
        };
        frames.push(SceneFrame {
            index: frames.len(),
            source_id: stem.clone(),
            pose,
            valid: true,
            depth: DepthSource::File(depth_dir.join(format!("{stem}.png"))),
            rgb: RgbSource::File(rgb_path),
            depth_cache: OnceLock::new(),
            rgb_cache: OnceLock::new(),
        });
    }
    if frames.is_empty() {
        return Err(SceneError::NoValidFrames(dir.to_path_buf()));
    }
    let scene_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("scene")
        .to_string();
    Ok(Scene { scene_id, intrinsics, frames })
}

/// Sort key that orders numeric ids numerically and everything else
/// lexicographically (numeric ids first).
#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
enum IdKey {
    Num(u64),
    Text(String),
}

impl From<&str> for IdKey {
    fn from(s: &str) -> Self {
        match s.parse::<u64>() {
            Ok(n) => IdKey::Num(n),
            Err(_) => IdKey::Text(s.to_string()),
        }
    }
}

/// Writes a scene (and its ground truth) in the directory layout that
/// [`load_scene`] reads. Output is deterministic: rendering the same spec
/// twice produces byte-identical trees.
pub fn save_scene(scene: &Scene, gt: &GroundTruth, dir: &Path) -> Result<(), SceneError> {
    std::fs::create_dir_all(dir.join("color"))?;
    std::fs::create_dir_all(dir.join("depth"))?;
    std::fs::create_dir_all(dir.join("pose"))?;
    write_intrinsics(&scene.intrinsics, &dir.join("intrinsics.txt"))?;
    for frame in &scene.frames {
        let id = &frame.source_id;
        frame.rgb()?.save(dir.join("color").join(format!("{id}.png")))?;
        let depth = frame.depth()?;
        write_depth(&depth, &dir.join("depth").join(format!("{id}.png")))?;
        write_pose(&frame.pose, &dir.join("pose").join(format!("{id}.txt")))?;
    }
    gt.save(&GroundTruth::default_path(dir))?;
    Ok(())
}
