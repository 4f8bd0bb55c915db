//! Property tests for the camera model: projection round trips, exactness of
//! unprojection depth, and the occlusion boundary.

use nalgebra::{Quaternion, UnitQuaternion};
use proptest::prelude::*;
use tab3d_core::geometry::{
    self, Bitmap, DepthMap, Intrinsics, Point3, Pose, Vec3, Visibility,
};

fn arb_pose() -> impl Strategy<Value = Pose> {
    (
        [-1.0f64..1.0, -1.0..1.0, -1.0..1.0, -1.0..1.0],
        [-5.0f64..5.0, -5.0..5.0, -5.0..5.0],
    )
        .prop_filter_map("quaternion too small", |(q, t)| {
            let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
            if quat.norm() < 1e-3 {
                return None;
            }
            let rot = UnitQuaternion::from_quaternion(quat).to_rotation_matrix();
            Pose::new(rot.into_inner(), Vec3::new(t[0], t[1], t[2])).ok()
        })
}

fn arb_intrinsics() -> impl Strategy<Value = Intrinsics> {
    (100.0f64..1200.0, 100.0f64..1200.0, 160usize..=800, 120usize..=600).prop_map(
        |(fx, fy, w, h)| {
            Intrinsics::new(fx, fy, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)
                .unwrap()
        },
    )
}

proptest! {
    /// Unproject -> world -> reproject returns to the same pixel and depth.
    #[test]
    fn project_round_trip(
        pose in arb_pose(),
        k in arb_intrinsics(),
        uf in 0.0f64..1.0,
        vf in 0.0f64..1.0,
        depth in 0.05f64..20.0,
    ) {
        let u = uf * (k.width as f64 - 1.0);
        let v = vf * (k.height as f64 - 1.0);
        let p_c = geometry::unproject_pixel(u, v, depth, &k).unwrap();
        prop_assert_eq!(p_c.z, depth); // z is preserved exactly
        let p_w = geometry::camera_to_world(&p_c, &pose);
        let pd = geometry::world_to_pixel(&p_w, &pose, &k).unwrap();
        prop_assert!((pd.u - u).abs() < 1e-6, "u {} vs {}", pd.u, u);
        prop_assert!((pd.v - v).abs() < 1e-6, "v {} vs {}", pd.v, v);
        prop_assert!((pd.z - depth).abs() < 1e-6, "z {} vs {}", pd.z, depth);
    }

    /// The occlusion predicate flips exactly at z_actual + eps.
    #[test]
    fn occlusion_boundary_is_sharp(
        z_actual in 0.2f64..8.0,
        eps in 0.01f64..1.0,
    ) {
        let k = Intrinsics::new(500.0, 500.0, 31.5, 31.5, 64, 64).unwrap();
        let depth = DepthMap::new(64, 64, vec![z_actual as f32; 64 * 64]);
        // Use the recorded reading (post f32 rounding) as the exact surface.
        let surface = depth.get(32, 32) as f64;
        let at = Point3::new(0.0, 0.0, surface + eps);
        let (vis, _) = geometry::visibility_check(&at, &depth, &Pose::identity(), &k, eps);
        prop_assert_eq!(vis, Visibility::Visible);
        let past = Point3::new(0.0, 0.0, surface + eps + 1e-9);
        let (vis, _) = geometry::visibility_check(&past, &depth, &Pose::identity(), &k, eps);
        prop_assert_eq!(vis, Visibility::Occluded);
    }

    /// Every lifted point reprojects into its own source pixel.
    #[test]
    fn lift_mask_points_reproject_home(
        pose in arb_pose(),
        pixels in proptest::collection::hash_set((0usize..32, 0usize..24), 1..24),
        depth_val in 0.3f32..6.0,
    ) {
        let k = Intrinsics::new(80.0, 80.0, 15.5, 11.5, 32, 24).unwrap();
        let mut depth = DepthMap::zeros(32, 24);
        let mut mask = Bitmap::new(32, 24);
        let mut expected = Vec::new();
        for &(u, v) in &pixels {
            depth.set(u, v, depth_val);
            mask.set(u, v, true);
            expected.push((u, v));
        }
        let pts = geometry::lift_mask(&depth, &mask, &k, &pose, 1).unwrap();
        prop_assert_eq!(pts.len(), expected.len());
        for p in &pts {
            let pd = geometry::world_to_pixel(p, &pose, &k).unwrap();
            let (ru, rv) = (pd.u.round() as usize, pd.v.round() as usize);
            prop_assert!(mask.get(ru, rv), "({}, {}) not in source mask", ru, rv);
            prop_assert!((pd.u - pd.u.round()).abs() < 0.5);
        }
    }

    /// Stride-s lifting never exceeds ceil(masked / s^2) points, and meets
    /// the bound exactly when every selected pixel has valid depth.
    #[test]
    fn lift_mask_stride_bound(
        stride in 1usize..5,
        pixels in proptest::collection::hash_set((0usize..32, 0usize..32), 1..400),
    ) {
        let k = Intrinsics::new(80.0, 80.0, 15.5, 15.5, 32, 32).unwrap();
        let depth = DepthMap::new(32, 32, vec![1.0; 32 * 32]);
        let mut mask = Bitmap::new(32, 32);
        for &(u, v) in &pixels {
            mask.set(u, v, true);
        }
        let pts = geometry::lift_mask(&depth, &mask, &k, &Pose::identity(), stride).unwrap();
        let bound = (mask.count() + stride * stride - 1) / (stride * stride);
        prop_assert_eq!(pts.len(), bound);
    }
}
