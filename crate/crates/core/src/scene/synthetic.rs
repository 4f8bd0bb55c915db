//! Deterministic synthetic RGB-D renderer.
//!
//! Scenes are a handful of labelled axis-aligned boxes observed by a camera
//! orbiting a point of interest. Rendering is plain ray casting with the
//! slab test, parametrised so the ray parameter *is* optical-axis depth;
//! depth is quantised to millimetres exactly like the on-disk encoding, so
//! an in-memory scene and its saved copy behave identically.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::geometry::{Bitmap, DepthMap, Intrinsics, Point3, Pose, Vec3};
use crate::pointcloud::Bbox3D;
use crate::scene::{GroundTruth, GtBox, Scene, SceneError, SceneFrame};

/// Camera orbit: the eye circles `center` at `radius`, raised by `height`,
/// always looking at `center`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitSpec {
    pub center: [f64; 3],
    pub radius: f64,
    #[serde(default)]
    pub height: f64,
    #[serde(default)]
    pub start_deg: f64,
    #[serde(default = "default_sweep")]
    pub sweep_deg: f64,
}

fn default_sweep() -> f64 {
    360.0
}

/// One labelled box of the synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxSpec {
    pub class: String,
    pub center: [f64; 3],
    pub extent: [f64; 3],
    #[serde(default)]
    pub color: Option<[u8; 3]>,
}

/// Declarative description of a synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(default = "default_scene_id")]
    pub scene_id: String,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    /// Horizontal field of view, degrees.
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    pub frames: usize,
    pub orbit: OrbitSpec,
    pub boxes: Vec<BoxSpec>,
}

fn default_scene_id() -> String {
    "synthetic".to_string()
}
fn default_width() -> usize {
    320
}
fn default_height() -> usize {
    240
}
fn default_fov() -> f64 {
    60.0
}

const PALETTE: [[u8; 3]; 6] = [
    [204, 64, 52],
    [58, 121, 189],
    [82, 157, 62],
    [196, 154, 48],
    [132, 78, 163],
    [64, 160, 158],
];

impl SyntheticSpec {
    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let spec: SyntheticSpec =
            serde_json::from_str(text).map_err(|e| SceneError::BadSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.frames == 0 {
            return Err(SceneError::BadSpec("frames must be >= 1".into()));
        }
        if self.boxes.is_empty() {
            return Err(SceneError::BadSpec("at least one box is required".into()));
        }
        if !(self.orbit.radius > 0.0) {
            return Err(SceneError::BadSpec("orbit radius must be positive".into()));
        }
        if !(10.0..=170.0).contains(&self.fov_deg) {
            return Err(SceneError::BadSpec("fov_deg must be in [10, 170]".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(SceneError::BadSpec("image must be at least 8x8".into()));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.extent.iter().any(|&e| !(e > 0.0)) {
                return Err(SceneError::BadSpec(format!("box {i}: extents must be positive")));
            }
            if b.class.trim().is_empty() {
                return Err(SceneError::BadSpec(format!("box {i}: empty class")));
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let fx = 0.5 * self.width as f64 / (self.fov_deg.to_radians() * 0.5).tan();
        Intrinsics::new(
            fx,
            fx,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
        .expect("validated spec yields valid intrinsics")
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            boxes: self
                .boxes
                .iter()
                .enumerate()
                .map(|(i, b)| GtBox {
                    id: i as u32,
                    class: b.class.clone(),
                    bbox: Bbox3D::new(
                        Point3::new(b.center[0], b.center[1], b.center[2]),
                        Vec3::new(b.extent[0], b.extent[1], b.extent[2]),
                    ),
                    color: b.color.unwrap_or(PALETTE[i % PALETTE.len()]),
                })
                .collect(),
        }
    }
}

/// Camera-to-world pose looking from `eye` towards `target`, world `+z` up
/// (falling back to `+y` up when the view direction is vertical). The camera
/// frame is x-right, y-down, z-forward.
pub fn look_at_pose(eye: &Point3, target: &Point3) -> Result<Pose, SceneError> {
    let forward = target - eye;
    if forward.norm() < 1e-9 {
        return Err(SceneError::BadSpec("look-at eye and target coincide".into()));
    }
    let z = forward.normalize();
    let mut up = Vec3::new(0.0, 0.0, 1.0);
    if z.cross(&up).norm() < 1e-6 {
        up = Vec3::new(0.0, 1.0, 0.0);
    }
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    let r = nalgebra::Matrix3::from_columns(&[x, y, z]);
    Ok(Pose::new(r, eye.coords)?)
}

/// Pose of orbit step `i` of `n`.
pub fn orbit_pose(orbit: &OrbitSpec, i: usize, n: usize) -> Result<Pose, SceneError> {
    let theta = (orbit.start_deg + orbit.sweep_deg * i as f64 / n as f64).to_radians();
    let center = Point3::new(orbit.center[0], orbit.center[1], orbit.center[2]);
    let eye = Point3::new(
        center.x + orbit.radius * theta.cos(),
        center.y + orbit.radius * theta.sin(),
        center.z + orbit.height,
    );
    look_at_pose(&eye, &center)
}

/// Slab-method ray/box intersection. The ray is `origin + t * dir` with an
/// *unnormalised* direction whose camera-frame z component is 1, so `t` is
/// optical-axis depth directly. Returns `(t, entry_axis)` of the nearest
/// positive hit.
fn ray_box(origin: &Point3, dir: &Vec3, bbox: &Bbox3D) -> Option<(f64, usize)> {
    let (lo, hi) = (bbox.min(), bbox.max());
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let mut t0 = (lo[a] - origin[a]) / dir[a];
        let mut t1 = (hi[a] - origin[a]) / dir[a];
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            axis = a;
        }
        t_far = t_far.min(t1);
    }
    if t_near > t_far || t_far <= 1e-9 {
        return None;
    }
    let t = if t_near > 1e-9 { t_near } else { t_far };
    Some((t, axis))
}

/// Renders depth and per-box visibility masks for one camera. A pixel
/// belongs to the mask of the box that owns its nearest surface; ties go to
/// the lower box id. Depth is quantised to millimetres (zero where no box is
/// hit) to mirror the on-disk encoding.
pub fn render_frame(k: &Intrinsics, pose: &Pose, boxes: &[GtBox]) -> (DepthMap, Vec<Bitmap>) {
    let mut depth = DepthMap::zeros(k.width, k.height);
    let mut masks: Vec<Bitmap> = boxes.iter().map(|_| Bitmap::new(k.width, k.height)).collect();
    let origin = pose.center();
    let rot = *pose.rotation();
    for v in 0..k.height {
        for u in 0..k.width {
            let dir_c = Vec3::new(
                (u as f64 - k.cx) / k.fx,
                (v as f64 - k.cy) / k.fy,
                1.0,
            );
            let dir_w = rot * dir_c;
            let mut best: Option<(f64, usize)> = None;
            for (b, gt) in boxes.iter().enumerate() {
                if let Some((t, _)) = ray_box(&origin, &dir_w, &gt.bbox) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, b));
                    }
                }
            }
            if let Some((t, b)) = best {
                let mm = (t * 1000.0).round();
                if mm >= 1.0 && mm <= u16::MAX as f64 {
                    depth.set(u, v, (mm / 1000.0) as f32);
                    masks[b].set(u, v, true);
                }
            }
        }
    }
    (depth, masks)
}

/// Renders the colour image for one camera: flat background, per-box colour
/// shaded by the face the ray enters (x/y/z faces at 78%, 90%, 100%).
pub fn render_rgb(k: &Intrinsics, pose: &Pose, boxes: &[GtBox]) -> RgbImage {
    let mut img: RgbImage =
        image::ImageBuffer::from_pixel(k.width as u32, k.height as u32, image::Rgb([226, 226, 226]));
    let origin = pose.center();
    let rot = *pose.rotation();
    for v in 0..k.height {
        for u in 0..k.width {
            let dir_c = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let dir_w = rot * dir_c;
            let mut best: Option<(f64, usize, usize)> = None;
            for (b, gt) in boxes.iter().enumerate() {
                if let Some((t, axis)) = ray_box(&origin, &dir_w, &gt.bbox) {
                    if best.map_or(true, |(bt, _, _)| t < bt) {
                        best = Some((t, b, axis));
                    }
                }
            }
            if let Some((_, b, axis)) = best {
                let shade = [0.78, 0.90, 1.0][axis];
                let c = boxes[b].color;
                img.put_pixel(
                    u as u32,
                    v as u32,
                    image::Rgb([
                        (c[0] as f64 * shade) as u8,
                        (c[1] as f64 * shade) as u8,
                        (c[2] as f64 * shade) as u8,
                    ]),
                );
            }
        }
    }
    img
}

/// Renders the whole orbit into an in-memory [`Scene`] plus its ground
/// truth. Purely deterministic; rendering twice gives identical data.
pub fn render_synthetic(spec: &SyntheticSpec) -> Result<(Scene, GroundTruth), SceneError> {
    spec.validate()?;
    let k = spec.intrinsics();
    let gt = spec.ground_truth();
    let mut frames = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let pose = orbit_pose(&spec.orbit, i, spec.frames)?;
        let (depth, _masks) = render_frame(&k, &pose, &gt.boxes);
        let rgb = render_rgb(&k, &pose, &gt.boxes);
        frames.push(SceneFrame::from_memory(
            i,
            format!("{i:05}"),
            pose,
            std::sync::Arc::new(depth),
            std::sync::Arc::new(rgb),
        ));
    }
    Ok((
        Scene { scene_id: spec.scene_id.clone(), intrinsics: k, frames },
        gt,
    ))
}
