//! Pinhole camera model: unprojection, rigid transforms and the visibility
//! predicate used to decide whether a world point is observed by a frame.
//!
//! Conventions: pixel `(u, v)` has `u` growing rightwards and `v` downwards,
//! the camera looks along `+z` in its own frame, and depth is the `z`
//! coordinate of a point in the camera frame (metres), not the ray length.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// World- or camera-frame point, metres.
pub type Point3 = nalgebra::Point3<f64>;
/// 3-vector alias used for translations and extents.
pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("pixel ({u}, {v}) outside image domain {width}x{height}")]
    PixelOutOfBounds { u: f64, v: f64, width: usize, height: usize },
    #[error("point projects onto the camera plane (|z| < {eps}): z = {z}")]
    DegenerateProjection { z: f64, eps: f64 },
    #[error("intrinsics invalid: {0}")]
    BadIntrinsics(String),
    #[error("pose is not a rigid transform: {0}")]
    NotRigid(String),
    #[error("mask is {mask_w}x{mask_h} but depth map is {depth_w}x{depth_h}")]
    MaskShapeMismatch { mask_w: usize, mask_h: usize, depth_w: usize, depth_h: usize },
    #[error("run-length mask invalid: {0}")]
    BadRle(String),
}

/// Pinhole intrinsics plus the image domain they are valid for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::BadIntrinsics(format!(
                "fx={} fy={} cx={} cy={}",
                self.fx, self.fy, self.cx, self.cy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::BadIntrinsics(format!(
                "empty image domain {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// The 3x3 calibration matrix `K`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// True iff the (possibly fractional) pixel lies in `[0, W) x [0, H)`.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Rigid camera-to-world transform: `p_w = R * p_c + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

/// Orthonormality tolerance accepted by [`Pose::new`].
const RIGID_TOL: f64 = 1e-6;

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        if !rotation.iter().all(|v| v.is_finite()) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NotRigid("non-finite entries".into()));
        }
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        let det_err = (rotation.determinant() - 1.0).abs();
        if ortho_err > RIGID_TOL || det_err > RIGID_TOL {
            return Err(GeometryError::NotRigid(format!(
                "orthonormality error {ortho_err:.2e}, det error {det_err:.2e}"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    /// Builds a pose from a 4x4 homogeneous camera-to-world matrix.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        let expected = [0.0, 0.0, 0.0, 1.0];
        for (got, want) in bottom.iter().zip(expected) {
            if !got.is_finite() || (got - want).abs() > 1e-9 {
                return Err(GeometryError::NotRigid(format!("bottom row {bottom:?}")));
            }
        }
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = Vec3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
        Self::new(rotation, translation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// World-to-camera inverse; exact because the pose is rigid.
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Camera centre in world coordinates (equals the translation).
    pub fn center(&self) -> Point3 {
        Point3::from(self.translation)
    }
}

/// Projection result: fractional pixel plus predicted camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelDepth {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

/// Outcome of testing whether a frame observes a world point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    /// In front of the camera, inside the image, and not hidden by the
    /// observed surface (within the occlusion tolerance).
    Visible,
    /// Projects behind the camera plane (`z <= 0`).
    BehindCamera,
    /// Projects outside the image domain.
    OutOfFov,
    /// The depth map has no reading (`z <= 0`) at the projected pixel.
    InvalidDepth,
    /// The observed surface is closer than the point by more than `eps`.
    Occluded,
}

/// Dense per-pixel depth in metres, row-major; `<= 0` means "no reading".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "depth buffer size mismatch");
        Self { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, z: f32) {
        self.data[v * self.width + u] = z;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Binary pixel mask, row-major, same indexing as [`DepthMap`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height, "mask buffer size mismatch");
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, on: bool) {
        self.bits[v * self.width + u] = on;
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Set pixels in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| (i % w, i / w))
    }

    /// Tight pixel bounding box `(u0, v0, u1, v1)` inclusive, if non-empty.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (u, v) in self.iter_set() {
            bb = Some(match bb {
                None => (u, v, u, v),
                Some((u0, v0, u1, v1)) => (u0.min(u), v0.min(v), u1.max(u), v1.max(v)),
            });
        }
        bb
    }

    /// Run-length encodes the mask (see [`RleMask`]).
    pub fn to_rle(&self) -> RleMask {
        let mut counts = Vec::new();
        let mut current = false; // runs start counting zeros
        let mut run = 0usize;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        if run > 0 || counts.is_empty() {
            counts.push(run);
        }
        RleMask { width: self.width, height: self.height, counts }
    }

    /// Decodes a run-length mask, checking that the runs cover exactly
    /// `width * height` pixels.
    pub fn from_rle(rle: &RleMask) -> Result<Self, GeometryError> {
        let expected = rle.width * rle.height;
        let total: usize = rle.counts.iter().sum();
        if total != expected {
            return Err(GeometryError::BadRle(format!(
                "runs cover {total} pixels, mask is {}x{} = {expected}",
                rle.width, rle.height
            )));
        }
        let mut bits = Vec::with_capacity(expected);
        let mut value = false;
        for &run in &rle.counts {
            bits.extend(std::iter::repeat(value).take(run));
            value = !value;
        }
        Ok(Bitmap { width: rle.width, height: rle.height, bits })
    }
}

/// Row-major run-length encoding of a [`Bitmap`]: `counts` alternates runs of
/// zeros and ones, starting with zeros (a leading `0` count encodes a mask
/// that begins with a set pixel). This is the on-disk and on-wire form for
/// masks; it keeps fixtures readable and diffs small.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<usize>,
}

/// Lifts pixel `(u, v)` with a metric depth into the camera frame.
///
/// This is the closed form of `depth * K^-1 * (u, v, 1)^T`; the returned `z`
/// equals `depth` exactly.
pub fn unproject_pixel(
    u: f64,
    v: f64,
    depth: f64,
    k: &Intrinsics,
) -> Result<Point3, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    if !k.contains(u, v) {
        return Err(GeometryError::PixelOutOfBounds { u, v, width: k.width, height: k.height });
    }
    Ok(Point3::new((u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth))
}

/// Maps a camera-frame point into the world frame: `R * p + t`.
pub fn camera_to_world(p_c: &Point3, pose: &Pose) -> Point3 {
    Point3::from(pose.rotation * p_c.coords + pose.translation)
}

/// Threshold below which a camera-frame `z` counts as degenerate.
const DEGENERATE_Z: f64 = 1e-9;

/// Projects a world point into a frame, returning the fractional pixel and
/// the predicted depth `z` (which may be negative for points behind the
/// camera — callers decide what that means).
pub fn world_to_pixel(
    p_w: &Point3,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<PixelDepth, GeometryError> {
    let inv = pose.inverse();
    let p_c = inv.rotation * p_w.coords + inv.translation;
    if p_c.z.abs() < DEGENERATE_Z {
        return Err(GeometryError::DegenerateProjection { z: p_c.z, eps: DEGENERATE_Z });
    }
    Ok(PixelDepth {
        u: k.fx * p_c.x / p_c.z + k.cx,
        v: k.fy * p_c.y / p_c.z + k.cy,
        z: p_c.z,
    })
}

/// Decides whether `p_w` is observed by a frame with the given depth map and
/// pose. `eps` (metres) absorbs sensor noise when comparing predicted depth
/// against the recorded surface: the point survives while
/// `z_predict <= z_actual + eps`.
///
/// The projected pixel is rounded to the nearest integer before the bounds
/// check and the depth lookup, so a pixel that rounds past the image edge is
/// `OutOfFov` even though its fractional coordinate was inside.
pub fn visibility_check(
    p_w: &Point3,
    depth: &DepthMap,
    pose: &Pose,
    k: &Intrinsics,
    eps: f64,
) -> (Visibility, PixelDepth) {
    let inv = pose.inverse();
    let p_c = inv.rotation() * p_w.coords + inv.translation();
    if p_c.z.abs() < DEGENERATE_Z {
        return (Visibility::BehindCamera, PixelDepth { u: f64::NAN, v: f64::NAN, z: p_c.z });
    }
    let pd = PixelDepth {
        u: k.fx * p_c.x / p_c.z + k.cx,
        v: k.fy * p_c.y / p_c.z + k.cy,
        z: p_c.z,
    };
    if pd.z <= 0.0 {
        return (Visibility::BehindCamera, pd);
    }
    let (iu, iv) = (pd.u.round(), pd.v.round());
    if iu < 0.0 || iv < 0.0 || iu >= depth.width() as f64 || iv >= depth.height() as f64 {
        return (Visibility::OutOfFov, pd);
    }
    let z_actual = depth.get(iu as usize, iv as usize) as f64;
    if z_actual <= 0.0 {
        return (Visibility::InvalidDepth, pd);
    }
    if pd.z <= z_actual + eps {
        (Visibility::Visible, pd)
    } else {
        (Visibility::Occluded, pd)
    }
}

/// Lifts a subsample of the masked pixels into a world-frame point cloud.
///
/// Masked pixels are enumerated row-major and thinned by `stride`: only
/// every `stride²`-th one is lifted, so the output never exceeds
/// `ceil(mask.count() / stride²)` points — the same density reduction a
/// 2D pixel stride would give, without boundary excess. Selected pixels with
/// an invalid reading (`z <= 0`) are skipped silently, so the result may be
/// empty even for a non-empty mask.
pub fn lift_mask(
    depth: &DepthMap,
    mask: &Bitmap,
    k: &Intrinsics,
    pose: &Pose,
    stride: usize,
) -> Result<Vec<Point3>, GeometryError> {
    assert!(stride >= 1, "stride must be >= 1");
    if mask.width() != depth.width() || mask.height() != depth.height() {
        return Err(GeometryError::MaskShapeMismatch {
            mask_w: mask.width(),
            mask_h: mask.height(),
            depth_w: depth.width(),
            depth_h: depth.height(),
        });
    }
    let step = stride * stride;
    let mut points = Vec::new();
    for (rank, (u, v)) in mask.iter_set().enumerate() {
        if rank % step != 0 {
            continue;
        }
        let z = depth.get(u, v) as f64;
        if z <= 0.0 {
            continue;
        }
        let p_c = unproject_pixel(u as f64, v as f64, z, k)?;
        points.push(camera_to_world(&p_c, pose));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn k_kinect() -> Intrinsics {
        Intrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480).unwrap()
    }

    /// 90 degrees about +z plus a translation; entries are exact.
    fn pose_z90() -> Pose {
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        Pose::new(r, Vec3::new(1.0, 2.0, 3.0)).unwrap()
    }

    #[test]
    fn unproject_principal_point_lands_on_axis() {
        let k = k_kinect();
        let p = unproject_pixel(319.5, 239.5, 2.0, &k).unwrap();
        assert_eq!(p, Point3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn unproject_one_focal_length_off_center() {
        // (cx + fx, cy, 1) must land at x = 1 exactly.
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 400, 400).unwrap();
        let p = unproject_pixel(150.0, 50.0, 1.0, &k).unwrap();
        assert_eq!(p, Point3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn unproject_matches_inverse_calibration_matrix() {
        // Oracle: z * K^-1 * (u, v, 1)^T with a numerically inverted K.
        let k = k_kinect();
        let (u, v, z) = (100.0, 200.0, 2.0);
        let k_inv = k.matrix().try_inverse().unwrap();
        let oracle = k_inv * Vector3::new(u, v, 1.0) * z;
        let p = unproject_pixel(u, v, z, &k).unwrap();
        assert_relative_eq!(p.x, oracle.x, epsilon = 1e-12);
        assert_relative_eq!(p.y, oracle.y, epsilon = 1e-12);
        assert_relative_eq!(p.z, oracle.z, epsilon = 1e-12);
        // Frozen oracle output for this sample.
        assert_relative_eq!(p.x, -0.836_190_476_190_476_2, epsilon = 1e-12);
        assert_relative_eq!(p.y, -0.150_476_190_476_190_48, epsilon = 1e-12);
        assert_eq!(p.z, 2.0);
    }

    #[test]
    fn unproject_rejects_bad_inputs() {
        let k = k_kinect();
        assert!(matches!(
            unproject_pixel(10.0, 10.0, 0.0, &k),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(matches!(
            unproject_pixel(10.0, 10.0, -1.0, &k),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(matches!(
            unproject_pixel(640.0, 10.0, 1.0, &k),
            Err(GeometryError::PixelOutOfBounds { .. })
        ));
        assert!(matches!(
            unproject_pixel(-0.1, 10.0, 1.0, &k),
            Err(GeometryError::PixelOutOfBounds { .. })
        ));
    }

    #[test]
    fn camera_to_world_identity_and_translation() {
        let p = Point3::new(0.5, -0.25, 2.0);
        assert_eq!(camera_to_world(&p, &Pose::identity()), p);
        let shift = Pose::new(Matrix3::identity(), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(camera_to_world(&p, &shift), Point3::new(1.5, 1.75, 5.0));
    }

    #[test]
    fn camera_to_world_quarter_turn_matches_matrix_oracle() {
        // Oracle: explicit 4x4 homogeneous multiply.
        let pose = pose_z90();
        let p = Point3::new(1.0, 0.0, 0.0);
        let h = pose.to_matrix() * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
        let got = camera_to_world(&p, &pose);
        assert_relative_eq!(got.x, h.x, epsilon = 1e-15);
        assert_relative_eq!(got.y, h.y, epsilon = 1e-15);
        assert_relative_eq!(got.z, h.z, epsilon = 1e-15);
        // (1,0,0) rotated to (0,1,0), then shifted by (1,2,3).
        assert_eq!(got, Point3::new(1.0, 3.0, 3.0));
    }

    #[test]
    fn world_to_pixel_reprojects_on_axis_point() {
        let k = k_kinect();
        let p = Point3::new(0.0, 0.0, 3.0);
        let pd = world_to_pixel(&p, &Pose::identity(), &k).unwrap();
        assert_eq!((pd.u, pd.v, pd.z), (319.5, 239.5, 3.0));
    }

    #[test]
    fn world_to_pixel_matches_homogeneous_inverse_oracle() {
        // Oracle: numerically invert the full 4x4, multiply, divide by z,
        // apply K. Independent of Pose::inverse.
        let k = k_kinect();
        let pose = pose_z90();
        let p = Point3::new(0.75, 3.5, 4.0);
        let inv = pose.to_matrix().try_inverse().unwrap();
        let hc = inv * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
        let (xc, yc, zc) = (hc.x / hc.w, hc.y / hc.w, hc.z / hc.w);
        let oracle_u = k.fx * xc / zc + k.cx;
        let oracle_v = k.fy * yc / zc + k.cy;
        let pd = world_to_pixel(&p, &pose, &k).unwrap();
        assert_relative_eq!(pd.u, oracle_u, epsilon = 1e-9);
        assert_relative_eq!(pd.v, oracle_v, epsilon = 1e-9);
        assert_relative_eq!(pd.z, zc, epsilon = 1e-9);
    }

    #[test]
    fn world_to_pixel_degenerate_plane() {
        let k = k_kinect();
        let p = Point3::new(1.0, 1.0, 0.0); // exactly on the camera plane
        assert!(matches!(
            world_to_pixel(&p, &Pose::identity(), &k),
            Err(GeometryError::DegenerateProjection { .. })
        ));
    }

    #[test]
    fn round_trip_unproject_project_is_exact_enough() {
        let k = k_kinect();
        let pose = pose_z90();
        for (u, v, z) in [(12.0, 400.0, 0.3), (319.5, 239.5, 5.0), (600.25, 3.75, 2.2)] {
            let p_w = camera_to_world(&unproject_pixel(u, v, z, &k).unwrap(), &pose);
            let pd = world_to_pixel(&p_w, &pose, &k).unwrap();
            assert_relative_eq!(pd.u, u, epsilon = 1e-9);
            assert_relative_eq!(pd.v, v, epsilon = 1e-9);
            assert_relative_eq!(pd.z, z, epsilon = 1e-9);
        }
    }

    fn flat_depth(w: usize, h: usize, z: f32) -> DepthMap {
        DepthMap::new(w, h, vec![z; w * h])
    }

    #[test]
    fn visibility_boundary_cases() {
        let k = k_kinect();
        let pose = Pose::identity();
        let eps = 0.4;

        // Out of view: projects far left of the image.
        let depth = flat_depth(640, 480, 2.0);
        let p = unproject_pixel(0.0, 100.0, 1.0, &k).unwrap();
        let p = Point3::new(p.x - 1.0, p.y, p.z);
        let (vis, _) = visibility_check(&p, &depth, &pose, &k, eps);
        assert_eq!(vis, Visibility::OutOfFov);

        // Occluded: point at 2.0 m, surface at 1.5 m, 2.0 > 1.5 + 0.4.
        let depth = flat_depth(640, 480, 1.5);
        let (vis, pd) = visibility_check(&Point3::new(0.0, 0.0, 2.0), &depth, &pose, &k, eps);
        assert_eq!(vis, Visibility::Occluded);
        assert_eq!(pd.z, 2.0);

        // Visible: point slightly in front of the recorded surface.
        let depth = flat_depth(640, 480, 1.9);
        let (vis, _) = visibility_check(&Point3::new(0.0, 0.0, 1.8), &depth, &pose, &k, eps);
        assert_eq!(vis, Visibility::Visible);

        // Invalid depth reading at the projected pixel.
        let depth = flat_depth(640, 480, 0.0);
        let (vis, _) = visibility_check(&Point3::new(0.0, 0.0, 1.8), &depth, &pose, &k, eps);
        assert_eq!(vis, Visibility::InvalidDepth);

        // Behind the camera.
        let depth = flat_depth(640, 480, 2.0);
        let (vis, _) = visibility_check(&Point3::new(0.0, 0.0, -1.0), &depth, &pose, &k, eps);
        assert_eq!(vis, Visibility::BehindCamera);
    }

    #[test]
    fn visibility_tolerance_boundary_is_inclusive() {
        // z_predict == z_actual + eps stays visible; one ulp-ish more flips.
        let k = k_kinect();
        let pose = Pose::identity();
        let depth = flat_depth(640, 480, 1.0);
        let (vis, _) = visibility_check(&Point3::new(0.0, 0.0, 1.4), &depth, &pose, &k, 0.4);
        assert_eq!(vis, Visibility::Visible);
        let (vis, _) =
            visibility_check(&Point3::new(0.0, 0.0, 1.4 + 1e-6), &depth, &pose, &k, 0.4);
        assert_eq!(vis, Visibility::Occluded);
    }

    #[test]
    fn visibility_rounds_to_nearest_pixel() {
        let k = Intrinsics::new(100.0, 100.0, 2.0, 2.0, 5, 5).unwrap();
        let mut depth = DepthMap::zeros(5, 5);
        depth.set(3, 2, 1.0); // only this pixel has a reading
        // Aim between pixels 2 and 3: u = 2.6 rounds to 3.
        let p = unproject_pixel(2.6, 2.0, 1.0, &k).unwrap();
        let (vis, pd) = visibility_check(&p, &depth, &Pose::identity(), &k, 0.4);
        assert_eq!(vis, Visibility::Visible);
        assert_relative_eq!(pd.u, 2.6, epsilon = 1e-12);
        // u = 4.6 rounds to 5 which is out of the 5-wide domain.
        let q = Point3::new((4.6 - 2.0) / 100.0, 0.0, 1.0);
        let (vis, _) = visibility_check(&q, &depth, &Pose::identity(), &k, 0.4);
        assert_eq!(vis, Visibility::OutOfFov);
    }

    #[test]
    fn lift_mask_basic_and_errors() {
        let k = Intrinsics::new(100.0, 100.0, 2.0, 2.0, 5, 4).unwrap();
        let mut depth = DepthMap::zeros(5, 4);
        let mut mask = Bitmap::new(5, 4);

        // Empty mask lifts to an empty cloud.
        assert!(lift_mask(&depth, &mask, &k, &Pose::identity(), 1).unwrap().is_empty());

        // One masked pixel with valid depth.
        depth.set(2, 2, 1.5);
        mask.set(2, 2, true);
        let pts = lift_mask(&depth, &mask, &k, &Pose::identity(), 1).unwrap();
        assert_eq!(pts, vec![Point3::new(0.0, 0.0, 1.5)]);

        // Masked pixel without depth is skipped.
        mask.set(1, 1, true);
        let pts = lift_mask(&depth, &mask, &k, &Pose::identity(), 1).unwrap();
        assert_eq!(pts.len(), 1);

        // Shape mismatch is an error.
        let bad = Bitmap::new(4, 4);
        assert!(matches!(
            lift_mask(&depth, &bad, &k, &Pose::identity(), 1),
            Err(GeometryError::MaskShapeMismatch { .. })
        ));
    }

    #[test]
    fn lift_mask_stride_thins_by_square() {
        let k = Intrinsics::new(100.0, 100.0, 3.0, 3.0, 8, 8).unwrap();
        let mut depth = DepthMap::zeros(8, 8);
        let mut mask = Bitmap::new(8, 8);
        for v in 0..8 {
            for u in 0..8 {
                depth.set(u, v, 2.0);
                mask.set(u, v, true);
            }
        }
        let dense = lift_mask(&depth, &mask, &k, &Pose::identity(), 1).unwrap();
        let coarse = lift_mask(&depth, &mask, &k, &Pose::identity(), 2).unwrap();
        assert_eq!(dense.len(), 64);
        assert_eq!(coarse.len(), 16); // every 4th masked pixel
        // First selected pixel is the first masked pixel.
        assert_eq!(coarse[0], dense[0]);
        // Stride selection counts masked pixels, not emitted points: killing
        // the depth under selected pixels empties the cloud without shifting
        // selection onto the live ones.
        let mut holes = depth.clone();
        for (rank, (u, v)) in mask.iter_set().enumerate() {
            if rank % 4 == 0 {
                holes.set(u, v, 0.0);
            }
        }
        let lifted = lift_mask(&holes, &mask, &k, &Pose::identity(), 2).unwrap();
        assert!(lifted.is_empty());
    }

    #[test]
    fn rle_round_trip_and_validation() {
        // 3x2 mask: set pixels at (1,0), (2,0), (0,1) => bits 011 100,
        // runs: one zero, two ones, one one (contiguous across the row
        // boundary: 0 1 1 | 1 0 0 => [1, 3, 2]).
        let mut m = Bitmap::new(3, 2);
        m.set(1, 0, true);
        m.set(2, 0, true);
        m.set(0, 1, true);
        let rle = m.to_rle();
        assert_eq!(rle.counts, vec![1, 3, 2]);
        assert_eq!(Bitmap::from_rle(&rle).unwrap(), m);

        // Leading set pixel => explicit zero-length first run.
        let mut lead = Bitmap::new(2, 1);
        lead.set(0, 0, true);
        assert_eq!(lead.to_rle().counts, vec![0, 1, 1]);
        assert_eq!(Bitmap::from_rle(&lead.to_rle()).unwrap(), lead);

        // Empty and full masks.
        let empty = Bitmap::new(4, 4);
        assert_eq!(empty.to_rle().counts, vec![16]);
        let mut full = Bitmap::new(2, 2);
        for v in 0..2 {
            for u in 0..2 {
                full.set(u, v, true);
            }
        }
        assert_eq!(full.to_rle().counts, vec![0, 4]);
        assert_eq!(Bitmap::from_rle(&full.to_rle()).unwrap(), full);

        // Run total must match the pixel count.
        let bad = RleMask { width: 3, height: 2, counts: vec![1, 3] };
        assert!(matches!(Bitmap::from_rle(&bad), Err(GeometryError::BadRle(_))));
    }

    #[test]
    fn pose_rejects_non_rigid_matrices() {
        let scaled = Matrix3::identity() * 2.0;
        assert!(Pose::new(scaled, Vec3::zeros()).is_err());
        let reflection = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Pose::new(reflection, Vec3::zeros()).is_err());
        let mut bad_bottom = Matrix4::identity();
        bad_bottom[(3, 0)] = 0.5;
        assert!(Pose::from_matrix(&bad_bottom).is_err());
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let pose = pose_z90();
        let inv = pose.inverse();
        let p = Point3::new(0.2, -1.0, 4.0);
        let back = camera_to_world(&camera_to_world(&p, &pose), &inv);
        assert_relative_eq!(back.x, p.x, epsilon = 1e-12);
        assert_relative_eq!(back.y, p.y, epsilon = 1e-12);
        assert_relative_eq!(back.z, p.z, epsilon = 1e-12);
    }

    #[test]
    fn bitmap_bounds_and_count() {
        let mut m = Bitmap::new(10, 6);
        assert!(m.is_empty());
        assert_eq!(m.bounds(), None);
        m.set(3, 1, true);
        m.set(7, 4, true);
        assert_eq!(m.count(), 2);
        assert_eq!(m.bounds(), Some((3, 1, 7, 4)));
        assert_eq!(m.iter_set().collect::<Vec<_>>(), vec![(3, 1), (7, 4)]);
    }
}
