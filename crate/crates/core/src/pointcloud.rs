//! Point cloud containers and the denoising chain used before the final box
//! fit: statistical outlier removal, density clustering, largest-cluster
//! selection and axis-aligned bounding boxes.
//!
//! All operations are deterministic: outputs depend only on the input order
//! of points, never on hashing or thread scheduling.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geometry::{Point3, Vec3};

pub mod ply;

/// Cluster id assigned to points that belong to no cluster.
pub const NOISE: i32 = -1;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("operation needs a non-empty point cloud")]
    EmptyCloud,
    #[error("need more than {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("no cluster survived: every point is noise")]
    NoCluster,
    #[error("labels length {labels} does not match cloud size {points}")]
    LabelMismatch { labels: usize, points: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed PLY: {0}")]
    MalformedPly(String),
    #[error("unsupported PLY encoding: {0}")]
    UnsupportedEncoding(String),
}

/// A set of 3D points with optional per-point RGB colours.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Point3>) -> Self {
        Self { points, colors: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points (and colours) at the given indices, in index order.
    fn select(&self, keep: &[usize]) -> PointCloud {
        PointCloud {
            points: keep.iter().map(|&i| self.points[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| keep.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Axis-aligned box described by its centre and full (not half) extents.
///
/// Serializes as the flat array `[cx, cy, cz, dx, dy, dz]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox3D {
    pub center: Point3,
    pub extent: Vec3,
}

impl Bbox3D {
    pub fn new(center: Point3, extent: Vec3) -> Self {
        Self { center, extent }
    }

    pub fn from_min_max(min: Point3, max: Point3) -> Self {
        Self {
            center: Point3::from((min.coords + max.coords) * 0.5),
            extent: max - min,
        }
    }

    pub fn min(&self) -> Point3 {
        Point3::from(self.center.coords - self.extent * 0.5)
    }

    pub fn max(&self) -> Point3 {
        Point3::from(self.center.coords + self.extent * 0.5)
    }

    pub fn volume(&self) -> f64 {
        self.extent.x * self.extent.y * self.extent.z
    }

    pub fn contains(&self, p: &Point3, tol: f64) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| p[a] >= lo[a] - tol && p[a] <= hi[a] + tol)
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.center.x, self.center.y, self.center.z,
            self.extent.x, self.extent.y, self.extent.z,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            center: Point3::new(a[0], a[1], a[2]),
            extent: Vec3::new(a[3], a[4], a[5]),
        }
    }
}

impl Serialize for Bbox3D {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Bbox3D {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let a = <[f64; 6]>::deserialize(deserializer)?;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(D::Error::custom("bbox entries must be finite"));
        }
        if a[3] < 0.0 || a[4] < 0.0 || a[5] < 0.0 {
            return Err(D::Error::custom("bbox extents must be non-negative"));
        }
        Ok(Self::from_array(a))
    }
}

/// Arithmetic mean of the points. Errs on an empty cloud, which downstream
/// code treats as the "invalid centroid" condition and works around.
pub fn centroid(cloud: &PointCloud) -> Result<Point3, CloudError> {
    if cloud.is_empty() {
        return Err(CloudError::EmptyCloud);
    }
    let mut acc = Vec3::zeros();
    for p in &cloud.points {
        acc += p.coords;
    }
    Ok(Point3::from(acc / cloud.len() as f64))
}

/// Removes points whose mean distance to their `k` nearest neighbours is
/// more than `std_ratio` population standard deviations above the cloud-wide
/// mean. Survivors keep their input order. Needs strictly more than `k`
/// points so every point has `k` real neighbours.
pub fn statistical_outlier_removal(
    cloud: &PointCloud,
    k: usize,
    std_ratio: f64,
) -> Result<PointCloud, CloudError> {
    assert!(k >= 1, "k must be >= 1");
    assert!(std_ratio >= 0.0 && std_ratio.is_finite(), "std_ratio must be finite and >= 0");
    let n = cloud.len();
    if n <= k {
        return Err(CloudError::TooFewPoints { needed: k, got: n });
    }
    let grid = GridIndex::build(&cloud.points);
    let stats: Vec<f64> = (0..n)
        .map(|i| {
            let dists = grid.knn_distances(&cloud.points, i, k);
            dists.iter().sum::<f64>() / k as f64
        })
        .collect();
    let mean = stats.iter().sum::<f64>() / n as f64;
    let var = stats.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
    let threshold = mean + std_ratio * var.sqrt();
    let keep: Vec<usize> = (0..n).filter(|&i| stats[i] <= threshold).collect();
    Ok(cloud.select(&keep))
}

/// Density clustering. A point is a core point when at least `min_pts`
/// points (itself included) lie within `eps` of it; clusters are the
/// connected components of core points plus the border points they reach.
/// Returns one label per point: `0, 1, ...` in order of discovery (seeded
/// from the lowest-index core of each cluster), or [`NOISE`].
pub fn dbscan(cloud: &PointCloud, eps: f64, min_pts: usize) -> Vec<i32> {
    assert!(eps > 0.0 && eps.is_finite(), "eps must be positive");
    assert!(min_pts >= 1, "min_pts must be >= 1");
    let n = cloud.len();
    let mut labels = vec![NOISE; n];
    if n == 0 {
        return labels;
    }
    let grid = GridIndex::build_with_cell(&cloud.points, eps);
    // Neighbour lists are sorted by index so traversal order (and therefore
    // border-point ownership) is reproducible.
    let neighborhoods: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut nb = grid.radius(&cloud.points, i, eps);
            nb.sort_unstable();
            nb
        })
        .collect();
    let core: Vec<bool> = neighborhoods.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut next_label = 0;
    let mut queue = std::collections::VecDeque::new();
    for seed in 0..n {
        if !core[seed] || labels[seed] != NOISE {
            continue;
        }
        labels[seed] = next_label;
        queue.push_back(seed);
        while let Some(i) = queue.pop_front() {
            for &j in &neighborhoods[i] {
                if labels[j] == NOISE {
                    labels[j] = next_label;
                    if core[j] {
                        queue.push_back(j);
                    }
                }
            }
        }
        next_label += 1;
    }
    labels
}

/// Extracts the most populated cluster; ties go to the smallest label.
/// Errs with [`CloudError::NoCluster`] when every point is noise.
pub fn largest_cluster(cloud: &PointCloud, labels: &[i32]) -> Result<PointCloud, CloudError> {
    if labels.len() != cloud.len() {
        return Err(CloudError::LabelMismatch { labels: labels.len(), points: cloud.len() });
    }
    let max_label = labels.iter().copied().max().unwrap_or(NOISE);
    if max_label < 0 {
        return Err(CloudError::NoCluster);
    }
    let mut counts = vec![0usize; (max_label + 1) as usize];
    for &l in labels {
        if l >= 0 {
            counts[l as usize] += 1;
        }
    }
    // max_by_key keeps the later maximum, so scan in reverse label order to
    // land on the smallest label among ties.
    let best = (0..counts.len())
        .rev()
        .max_by_key(|&l| counts[l])
        .expect("at least one cluster") as i32;
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == best).collect();
    Ok(cloud.select(&keep))
}

/// Tight axis-aligned bounding box: `center = (min + max) / 2`,
/// `extent = max - min`.
pub fn axis_aligned_bbox(cloud: &PointCloud) -> Result<Bbox3D, CloudError> {
    if cloud.is_empty() {
        return Err(CloudError::EmptyCloud);
    }
    let mut lo = cloud.points[0];
    let mut hi = cloud.points[0];
    for p in &cloud.points[1..] {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    Ok(Bbox3D::from_min_max(lo, hi))
}

/// Keeps the first point of every occupied `voxel`-sized cell, in input
/// order. Used to bound cluster sizes on very dense clouds.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> PointCloud {
    assert!(voxel > 0.0 && voxel.is_finite(), "voxel size must be positive");
    let mut seen = std::collections::HashSet::new();
    let mut keep = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        if seen.insert(key) {
            keep.push(i);
        }
    }
    cloud.select(&keep)
}

// ---------------------------------------------------------------------------
// Uniform-grid neighbour index. Exact queries; the grid only prunes.

struct GridIndex {
    cell: f64,
    cells: std::collections::HashMap<(i64, i64, i64), Vec<usize>>,
}

impl GridIndex {
    /// Cell size heuristic: mean spacing of a uniform cloud with the same
    /// bounding volume, clamped away from zero for degenerate clouds.
    fn build(points: &[Point3]) -> Self {
        let n = points.len().max(1);
        let mut lo = points.first().copied().unwrap_or_else(Point3::origin);
        let mut hi = lo;
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let diag = hi - lo;
        let volume = diag.x.max(1e-9) * diag.y.max(1e-9) * diag.z.max(1e-9);
        let cell = (volume / n as f64).cbrt().max(1e-6);
        Self::build_with_cell(points, cell)
    }

    fn build_with_cell(points: &[Point3], cell: f64) -> Self {
        let mut cells: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
            std::collections::HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(p: &Point3, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Indices within `radius` of point `i`, excluding `i` itself is NOT
    /// done here: the point itself is included (callers decide).
    fn radius(&self, points: &[Point3], i: usize, radius: f64) -> Vec<usize> {
        let p = &points[i];
        let r_cells = (radius / self.cell).ceil() as i64;
        let (kx, ky, kz) = Self::key(p, self.cell);
        let mut out = Vec::new();
        let r2 = radius * radius;
        for dx in -r_cells..=r_cells {
            for dy in -r_cells..=r_cells {
                for dz in -r_cells..=r_cells {
                    if let Some(bucket) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &j in bucket {
                            if (points[j] - p).norm_squared() <= r2 {
                                out.push(j);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Distances to the `k` nearest neighbours of point `i` (self excluded),
    /// ascending. Expands search rings until no closer point can exist.
    fn knn_distances(&self, points: &[Point3], i: usize, k: usize) -> Vec<f64> {
        let p = &points[i];
        let (kx, ky, kz) = Self::key(p, self.cell);
        let mut dists: Vec<f64> = Vec::new();
        let mut ring = 0i64;
        let max_ring = self.occupancy_span() + 1;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        // Only the shell of the current ring.
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(bucket) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                            for &j in bucket {
                                if j != i {
                                    dists.push((points[j] - p).norm());
                                }
                            }
                        }
                    }
                }
            }
            dists.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            // Points in unprocessed shells are at least `ring * cell` away,
            // so once the k-th candidate is closer the set is final.
            let guaranteed = ring as f64 * self.cell;
            if dists.len() >= k && dists[k - 1] <= guaranteed {
                break;
            }
            ring += 1;
            if ring > max_ring {
                break; // every occupied cell has been visited
            }
        }
        dists.truncate(k);
        dists
    }

    /// Chebyshev span of the occupied cells; rings beyond it are empty.
    fn occupancy_span(&self) -> i64 {
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for key in self.cells.keys() {
            lo = (lo.0.min(key.0), lo.1.min(key.1), lo.2.min(key.2));
            hi = (hi.0.max(key.0), hi.1.max(key.1), hi.2.max(key.2));
        }
        if self.cells.is_empty() {
            return 0;
        }
        (hi.0 - lo.0).max(hi.1 - lo.1).max(hi.2 - lo.2)
    }
}
