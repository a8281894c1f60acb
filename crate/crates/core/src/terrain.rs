//! Radar point clouds to a simplified terrain grid (DTM).
//!
//! Pipeline: transform into the world frame, voxel downsample, statistical
//! outlier removal, per-cell height percentile, IDW fill of empty cells.
//! Heights are then queried bilinearly between cell-center control points.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Frame, GeometryError, RigidTransform};
use crate::kdtree::{KdTree, SearchLimit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TerrainError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("voxel size must be positive, got {0}")]
    NonPositiveVoxel(f64),
    #[error("cloud has {points} points, need more than k = {k}")]
    CloudTooSmall { points: usize, k: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("grid has no valid cells")]
    NoValidCells,
    #[error("query ({x:.3}, {y:.3}) is more than one cell outside the grid")]
    OutOfBounds { x: f64, y: f64 },
    #[error("camera is not above the terrain (altitude {0:.3} m)")]
    BelowTerrain(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub frame: Frame,
    pub points: Vec<Vector3<f64>>,
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(frame: Frame, points: Vec<Vector3<f64>>) -> Self {
        Self {
            frame,
            points,
            intensity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Appends another cloud in the same frame.
    pub fn extend(&mut self, other: PointCloud) -> Result<(), TerrainError> {
        if other.frame != self.frame {
            return Err(GeometryError::FrameMismatch {
                outer_from: self.frame,
                inner_to: other.frame,
            }
            .into());
        }
        if self.points.is_empty() {
            self.intensity = other.intensity;
        } else {
            match (&mut self.intensity, other.intensity) {
                (Some(a), Some(b)) => a.extend(b),
                (a, _) => *a = None,
            }
        }
        self.points.extend(other.points);
        Ok(())
    }

    /// (min, max) corners.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }
}

/// Terrain-stage settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerrainParams {
    pub voxel: f64,
    pub outlier_k: usize,
    pub std_ratio: f64,
    pub cell_size: f64,
    pub percentile: f64,
    pub fill_k: usize,
}

impl Default for TerrainParams {
    fn default() -> Self {
        Self {
            voxel: 0.5,
            outlier_k: 10,
            std_ratio: 2.0,
            cell_size: 1.0,
            percentile: 0.25,
            fill_k: 5,
        }
    }
}

pub fn transform_cloud(cloud: &PointCloud, pose: &RigidTransform) -> Result<PointCloud, TerrainError> {
    if pose.from_frame() != cloud.frame {
        return Err(GeometryError::FrameMismatch {
            outer_from: pose.from_frame(),
            inner_to: cloud.frame,
        }
        .into());
    }
    Ok(PointCloud {
        frame: pose.to_frame(),
        points: cloud.points.iter().map(|p| pose.transform_point(p)).collect(),
        intensity: cloud.intensity.clone(),
    })
}

/// One centroid per occupied voxel, in voxel-key order.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud, TerrainError> {
    if !(voxel > 0.0) {
        return Err(TerrainError::NonPositiveVoxel(voxel));
    }
    let mut buckets: BTreeMap<(i64, i64, i64), (Vector3<f64>, f64, usize)> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        let e = buckets.entry(key).or_insert((Vector3::zeros(), 0.0, 0));
        e.0 += p;
        e.1 += cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        e.2 += 1;
    }
    let mut points = Vec::with_capacity(buckets.len());
    let mut intensity = Vec::with_capacity(buckets.len());
    for (sum, isum, n) in buckets.into_values() {
        points.push(sum / n as f64);
        intensity.push(isum / n as f64);
    }
    Ok(PointCloud {
        frame: cloud.frame,
        points,
        intensity: cloud.intensity.as_ref().map(|_| intensity),
    })
}

/// Mean distance from each point to its `k` nearest other points.
pub fn mean_knn_distances(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    let items: Vec<(usize, &[f64])> = points.iter().enumerate().map(|(i, p)| (i, p.as_slice())).collect();
    let tree = KdTree::build(3, items, 8);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = tree.knn_filtered(p.as_slice(), k, SearchLimit::Exact, |id| id != i);
            nn.iter().map(|(d2, _)| d2.sqrt()).sum::<f64>() / nn.len() as f64
        })
        .collect()
}

/// Keeps points whose mean k-NN distance is within `mean + std_ratio·std`
/// of the cloud-wide statistic.
pub fn remove_outliers(cloud: &PointCloud, k: usize, std_ratio: f64) -> Result<PointCloud, TerrainError> {
    if k == 0 {
        return Err(TerrainError::InvalidParameter("outlier k must be >= 1".into()));
    }
    if cloud.len() <= k {
        return Err(TerrainError::CloudTooSmall {
            points: cloud.len(),
            k,
        });
    }
    let d = mean_knn_distances(&cloud.points, k);
    let keep = outlier_mask(&d, std_ratio);
    let points = cloud
        .points
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(p, _)| *p)
        .collect();
    let intensity = cloud.intensity.as_ref().map(|v| {
        v.iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(x, _)| *x)
            .collect()
    });
    Ok(PointCloud {
        frame: cloud.frame,
        points,
        intensity,
    })
}

/// Keep-mask for the statistic `d`. A relative slack of 1e-12 keeps points
/// of a perfectly regular cloud whose statistics differ only by roundoff.
pub fn outlier_mask(d: &[f64], std_ratio: f64) -> Vec<bool> {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let threshold = mean + std_ratio * var.sqrt();
    let slack = 1e-12 * threshold.abs().max(1.0);
    d.iter().map(|&x| x <= threshold + slack).collect()
}

/// Control-point raster. Row 0 is the southern (min-y) row.
#[derive(Clone, Debug, PartialEq)]
pub struct TerrainGrid {
    pub origin: Vector2<f64>,
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
    pub heights: Vec<f64>,
    pub valid: Vec<bool>,
    /// Percentile used to pick control heights, when built from a cloud.
    pub percentile: Option<f64>,
}

impl TerrainGrid {
    pub fn from_heights(
        origin: Vector2<f64>,
        cell_size: f64,
        rows: usize,
        cols: usize,
        heights: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self, TerrainError> {
        if !(cell_size > 0.0) || rows == 0 || cols == 0 {
            return Err(TerrainError::InvalidParameter(format!(
                "grid needs positive cell size and extent (cell {cell_size}, {rows}x{cols})"
            )));
        }
        if heights.len() != rows * cols || valid.len() != rows * cols {
            return Err(TerrainError::InvalidParameter("grid buffers do not match extent".into()));
        }
        Ok(Self {
            origin,
            cell_size,
            rows,
            cols,
            heights,
            valid,
            percentile: None,
        })
    }

    /// Fully valid grid sampling `f` at cell centers.
    pub fn from_fn(
        origin: Vector2<f64>,
        cell_size: f64,
        rows: usize,
        cols: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, TerrainError> {
        let mut heights = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let p = origin + Vector2::new((c as f64 + 0.5) * cell_size, (r as f64 + 0.5) * cell_size);
                heights.push(f(p.x, p.y));
            }
        }
        Self::from_heights(origin, cell_size, rows, cols, heights, vec![true; rows * cols])
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Vector2<f64> {
        self.origin
            + Vector2::new(
                (col as f64 + 0.5) * self.cell_size,
                (row as f64 + 0.5) * self.cell_size,
            )
    }

    /// (min, max) corners of the covered area.
    pub fn extent(&self) -> (Vector2<f64>, Vector2<f64>) {
        (
            self.origin,
            self.origin + Vector2::new(self.cols as f64, self.rows as f64) * self.cell_size,
        )
    }

    pub fn height(&self, row: usize, col: usize) -> Option<f64> {
        let i = self.index(row, col);
        self.valid[i].then(|| self.heights[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|v| *v)
    }

    /// Bilinear height between control points. Queries up to one cell
    /// outside the grid clamp to the edge.
    pub fn query_height(&self, x: f64, y: f64) -> Result<f64, TerrainError> {
        query_height(self, x, y)
    }

    /// Mean of valid heights.
    pub fn mean_height(&self) -> Option<f64> {
        let (s, n) = self
            .heights
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .fold((0.0, 0usize), |(s, n), (h, _)| (s + h, n + 1));
        (n > 0).then(|| s / n as f64)
    }
}

/// Per-cell height at sorted index `floor(p·(m−1))`; empty cells invalid.
pub fn build_grid(cloud: &PointCloud, cell_size: f64, percentile: f64) -> Result<TerrainGrid, TerrainError> {
    if !(cell_size > 0.0) {
        return Err(TerrainError::InvalidParameter(format!("cell size must be positive, got {cell_size}")));
    }
    if !(0.0..=1.0).contains(&percentile) {
        return Err(TerrainError::InvalidParameter(format!("percentile must be in [0, 1], got {percentile}")));
    }
    let (lo, hi) = cloud.bounds().ok_or(TerrainError::EmptyCloud)?;
    let cols = ((hi.x - lo.x) / cell_size).floor() as usize + 1;
    let rows = ((hi.y - lo.y) / cell_size).floor() as usize + 1;
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); rows * cols];
    for p in &cloud.points {
        let c = (((p.x - lo.x) / cell_size).floor() as usize).min(cols - 1);
        let r = (((p.y - lo.y) / cell_size).floor() as usize).min(rows - 1);
        members[r * cols + c].push(p.z);
    }
    let mut heights = vec![0.0; rows * cols];
    let mut valid = vec![false; rows * cols];
    for (i, m) in members.iter_mut().enumerate() {
        if let Some(h) = percentile_member(m, percentile) {
            heights[i] = h;
            valid[i] = true;
        }
    }
    let mut grid = TerrainGrid::from_heights(Vector2::new(lo.x, lo.y), cell_size, rows, cols, heights, valid)?;
    grid.percentile = Some(percentile);
    Ok(grid)
}

/// Member at index `floor(p·(m−1))` of the ascending order.
pub fn percentile_member(values: &mut [f64], percentile: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let idx = (percentile * (values.len() - 1) as f64).floor() as usize;
    let (_, v, _) = values.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    Some(*v)
}

/// Fills invalid cells with the inverse-square-distance mean of the
/// `k_neighbors` nearest valid cell centers.
pub fn fill_invalid(grid: &TerrainGrid, k_neighbors: usize) -> Result<TerrainGrid, TerrainError> {
    if k_neighbors == 0 {
        return Err(TerrainError::InvalidParameter("fill k must be >= 1".into()));
    }
    let centers: Vec<(usize, [f64; 2])> = (0..grid.rows)
        .flat_map(|r| (0..grid.cols).map(move |c| (r, c)))
        .filter(|&(r, c)| grid.valid[grid.index(r, c)])
        .map(|(r, c)| {
            let p = grid.cell_center(r, c);
            (grid.index(r, c), [p.x, p.y])
        })
        .collect();
    if centers.is_empty() {
        return Err(TerrainError::NoValidCells);
    }
    let tree = KdTree::build(2, centers.iter().map(|(i, p)| (*i, &p[..])), 4);
    let mut out = grid.clone();
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let i = grid.index(r, c);
            if grid.valid[i] {
                continue;
            }
            let q = grid.cell_center(r, c);
            let nn = tree.knn(&[q.x, q.y], k_neighbors, SearchLimit::Exact);
            out.heights[i] = idw(nn.iter().map(|&(d2, j)| (d2, grid.heights[j])));
            out.valid[i] = true;
        }
    }
    Ok(out)
}

/// Inverse-distance (power 2) weighting from `(distance², value)` pairs.
pub fn idw(neighbors: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut wsum, mut vsum) = (0.0, 0.0);
    for (d2, v) in neighbors {
        if d2 == 0.0 {
            return v;
        }
        let w = 1.0 / d2;
        wsum += w;
        vsum += w * v;
    }
    vsum / wsum
}

pub fn query_height(grid: &TerrainGrid, x: f64, y: f64) -> Result<f64, TerrainError> {
    let fx = (x - grid.origin.x) / grid.cell_size - 0.5;
    let fy = (y - grid.origin.y) / grid.cell_size - 0.5;
    let outside = |f: f64, n: usize| !(f >= -1.5 && f <= n as f64 + 0.5);
    if outside(fx, grid.cols) || outside(fy, grid.rows) {
        return Err(TerrainError::OutOfBounds { x, y });
    }
    let (c0, tx) = split_axis(fx, grid.cols);
    let (r0, ty) = split_axis(fy, grid.rows);
    let c1 = (c0 + 1).min(grid.cols - 1);
    let r1 = (r0 + 1).min(grid.rows - 1);
    let corners = [
        (r0, c0, (1.0 - tx) * (1.0 - ty)),
        (r0, c1, tx * (1.0 - ty)),
        (r1, c0, (1.0 - tx) * ty),
        (r1, c1, tx * ty),
    ];
    let (mut wsum, mut hsum) = (0.0, 0.0);
    for (r, c, w) in corners {
        if let Some(h) = grid.height(r, c) {
            wsum += w;
            hsum += w * h;
        }
    }
    if wsum > 0.0 {
        Ok(hsum / wsum)
    } else {
        // all four corners invalid or zero-weight ones only: nearest valid corner
        corners
            .iter()
            .max_by(|a, b| a.2.total_cmp(&b.2))
            .and_then(|&(r, c, _)| grid.height(r, c))
            .ok_or(TerrainError::NoValidCells)
    }
}

fn split_axis(f: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let f = f.clamp(0.0, (n - 1) as f64);
    let i = (f.floor() as usize).min(n - 2);
    (i, f - i as f64)
}

/// Height of a camera above the terrain directly below it.
pub fn altitude_above_ground(cam_pose: &RigidTransform, grid: &TerrainGrid) -> Result<f64, TerrainError> {
    let c = cam_pose.translation();
    let alt = c.z - query_height(grid, c.x, c.y)?;
    if !(alt > 0.0) {
        return Err(TerrainError::BelowTerrain(alt));
    }
    Ok(alt)
}

/// Intersects a world ray with the terrain by fixed-point iteration on the
/// ground height. Exact after one iteration on flat ground.
pub fn intersect_ray(
    grid: &TerrainGrid,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    iterations: usize,
) -> Result<Vector3<f64>, TerrainError> {
    if !(dir.z < 0.0) {
        return Err(TerrainError::InvalidParameter("ray does not point downward".into()));
    }
    let mut h = query_height(grid, origin.x, origin.y)?;
    if !(origin.z > h) {
        return Err(TerrainError::BelowTerrain(origin.z - h));
    }
    let mut p = *origin;
    for _ in 0..iterations.max(1) {
        let t = (origin.z - h) / -dir.z;
        p = origin + dir * t;
        h = query_height(grid, p.x, p.y)?;
    }
    Ok(Vector3::new(p.x, p.y, h))
}

/// Full preprocessing chain on a world-frame cloud.
pub fn terrain_from_cloud(cloud: &PointCloud, params: &TerrainParams) -> Result<TerrainGrid, TerrainError> {
    if cloud.is_empty() {
        return Err(TerrainError::EmptyCloud);
    }
    let down = voxel_downsample(cloud, params.voxel)?;
    let clean = if down.len() > params.outlier_k {
        remove_outliers(&down, params.outlier_k, params.std_ratio)?
    } else {
        down
    };
    let grid = build_grid(&clean, params.cell_size, params.percentile)?;
    fill_invalid(&grid, params.fill_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, frame: Frame) -> PointCloud {
        PointCloud::new(
            frame,
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(0.0..20.0),
                        rng.random_range(0.0..20.0),
                        rng.random_range(0.0..3.0),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn transform_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 50, Frame::Radar);
        let id = RigidTransform::identity(Frame::Radar, Frame::World);
        let out = transform_cloud(&cloud, &id).unwrap();
        assert_eq!(out.points, cloud.points);
        assert_eq!(out.frame, Frame::World);

        let up = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 10.0), Frame::Radar, Frame::World);
        let out = transform_cloud(&cloud, &up).unwrap();
        for (a, b) in out.points.iter().zip(&cloud.points) {
            assert_relative_eq!(a.z, b.z + 10.0);
        }

        let pose = RigidTransform::new(
            UnitQuaternion::from_euler_angles(0.2, 0.5, -1.0),
            Vector3::new(3.0, -4.0, 20.0),
            Frame::Radar,
            Frame::World,
        );
        let out = transform_cloud(&cloud, &pose).unwrap();
        let m = pose.to_homogeneous();
        for (a, b) in out.points.iter().zip(&cloud.points) {
            let o = m * b.push(1.0);
            assert!((a - o.xyz()).norm() < 1e-12);
        }

        let wrong = RigidTransform::identity(Frame::Camera, Frame::World);
        assert!(transform_cloud(&cloud, &wrong).is_err());
    }

    #[test]
    fn voxel_single_bucket_centroid() {
        let cloud = PointCloud::new(
            Frame::World,
            vec![Vector3::new(0.1, 0.1, 0.1), Vector3::new(0.3, 0.2, 0.4), Vector3::new(0.2, 0.0, 0.1)],
        );
        let out = voxel_downsample(&cloud, 0.5).unwrap();
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out.points[0], Vector3::new(0.2, 0.1, 0.2), epsilon = 1e-12);
        assert!(voxel_downsample(&cloud, 0.0).is_err());
    }

    #[test]
    fn voxel_spaced_points_unchanged() {
        let pts: Vec<_> = (0..5)
            .flat_map(|i| (0..5).map(move |j| Vector3::new(i as f64 + 0.25, j as f64 + 0.25, 0.25)))
            .collect();
        let cloud = PointCloud::new(Frame::World, pts.clone());
        let out = voxel_downsample(&cloud, 1.0).unwrap();
        let mut a: Vec<_> = out.points.iter().map(|p| (p.x.to_bits(), p.y.to_bits())).collect();
        let mut b: Vec<_> = pts.iter().map(|p| (p.x.to_bits(), p.y.to_bits())).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn voxel_matches_hash_bucket_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = random_cloud(&mut rng, 2000, Frame::World);
        let out = voxel_downsample(&cloud, 0.7).unwrap();
        let mut oracle: std::collections::HashMap<(i64, i64, i64), Vec<Vector3<f64>>> = Default::default();
        for p in &cloud.points {
            let key = ((p.x / 0.7).floor() as i64, (p.y / 0.7).floor() as i64, (p.z / 0.7).floor() as i64);
            oracle.entry(key).or_default().push(*p);
        }
        assert_eq!(out.len(), oracle.len());
        let mut seen = std::collections::HashSet::new();
        for p in &out.points {
            let key = ((p.x / 0.7).floor() as i64, (p.y / 0.7).floor() as i64, (p.z / 0.7).floor() as i64);
            assert!(seen.insert(key), "voxel occupied twice");
            let members = &oracle[&key];
            let c = members.iter().sum::<Vector3<f64>>() / members.len() as f64;
            assert!((c - p).norm() < 1e-9);
        }
        let (lo, hi) = cloud.bounds().unwrap();
        let (olo, ohi) = out.bounds().unwrap();
        assert!(olo >= lo && ohi <= hi);
    }

    #[test]
    fn outlier_far_point_removed() {
        let mut pts: Vec<_> = (0..10)
            .flat_map(|i| (0..10).map(move |j| Vector3::new(i as f64, j as f64, 0.0)))
            .collect();
        pts.push(Vector3::new(100.0, 100.0, 100.0));
        let out = remove_outliers(&PointCloud::new(Frame::World, pts), 5, 1.0).unwrap();
        assert_eq!(out.len(), 100);
        assert!(out.points.iter().all(|p| p.z == 0.0));
    }

    #[test]
    fn outlier_regular_ring_kept() {
        let pts: Vec<_> = (0..60)
            .map(|i| {
                let a = i as f64 / 60.0 * std::f64::consts::TAU;
                Vector3::new(10.0 * a.cos(), 10.0 * a.sin(), 2.0)
            })
            .collect();
        let out = remove_outliers(&PointCloud::new(Frame::World, pts), 2, 1.0).unwrap();
        assert_eq!(out.len(), 60);
    }

    #[test]
    fn outlier_matches_exhaustive_knn() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut cloud = random_cloud(&mut rng, 400, Frame::World);
        for _ in 0..10 {
            cloud.points.push(Vector3::new(rng.random_range(-30.0..50.0), rng.random_range(-30.0..50.0), 20.0));
        }
        let k = 6;
        let out = remove_outliers(&cloud, k, 1.5).unwrap();
        let stats: Vec<f64> = cloud
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut d: Vec<f64> = cloud
                    .points
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| (p - q).norm())
                    .collect();
                d.sort_by(f64::total_cmp);
                d[..k].iter().sum::<f64>() / k as f64
            })
            .collect();
        let n = stats.len() as f64;
        let mean = stats.iter().sum::<f64>() / n;
        let std = (stats.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expect: Vec<_> = cloud
            .points
            .iter()
            .zip(&stats)
            .filter(|(_, s)| **s <= mean + 1.5 * std)
            .map(|(p, _)| *p)
            .collect();
        assert_eq!(out.points, expect);
        assert!(out.len() < cloud.len());
    }

    #[test]
    fn outlier_requires_enough_points() {
        let cloud = PointCloud::new(Frame::World, vec![Vector3::zeros(); 3]);
        assert!(matches!(remove_outliers(&cloud, 3, 1.0), Err(TerrainError::CloudTooSmall { .. })));
    }

    fn column_cloud(heights: &[f64]) -> PointCloud {
        PointCloud::new(Frame::World, heights.iter().map(|&z| Vector3::new(0.5, 0.5, z)).collect())
    }

    #[test]
    fn percentile_selection() {
        let g = build_grid(&column_cloud(&[5.0, 1.0, 4.0, 2.0, 3.0]), 1.0, 0.5).unwrap();
        assert_eq!(g.height(0, 0), Some(3.0));
        let g = build_grid(&column_cloud(&[5.0, 1.0, 4.0, 2.0, 3.0]), 1.0, 0.0).unwrap();
        assert_eq!(g.height(0, 0), Some(1.0));
        let g = build_grid(&column_cloud(&[5.0, 1.0, 4.0, 2.0, 3.0]), 1.0, 1.0).unwrap();
        assert_eq!(g.height(0, 0), Some(5.0));
        assert!(matches!(
            build_grid(&PointCloud::new(Frame::World, vec![]), 1.0, 0.5),
            Err(TerrainError::EmptyCloud)
        ));
    }

    #[test]
    fn flat_plane_grid_within_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vector3<f64>> = (0..5000)
            .map(|_| Vector3::new(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0), 7.0 + rng.random_range(-0.1..0.1)))
            .collect();
        for p in [0.0, 0.25, 0.5, 1.0] {
            let g = build_grid(&PointCloud::new(Frame::World, pts.clone()), 1.0, p).unwrap();
            for (h, v) in g.heights.iter().zip(&g.valid) {
                if *v {
                    assert!((6.9..=7.1).contains(h));
                }
            }
        }
    }

    fn grid_with_mask(h: impl Fn(usize, usize) -> f64, valid: impl Fn(usize, usize) -> bool, rows: usize, cols: usize) -> TerrainGrid {
        let mut heights = vec![];
        let mut mask = vec![];
        for r in 0..rows {
            for c in 0..cols {
                heights.push(h(r, c));
                mask.push(valid(r, c));
            }
        }
        TerrainGrid::from_heights(Vector2::new(0.0, 0.0), 1.0, rows, cols, heights, mask).unwrap()
    }

    #[test]
    fn fill_constant_field_exact() {
        let g = grid_with_mask(|_, _| 4.5, |r, c| !(r == 2 && c == 2), 5, 5);
        let f = fill_invalid(&g, 5).unwrap();
        assert_eq!(f.height(2, 2), Some(4.5));
        assert!(f.all_valid());
    }

    #[test]
    fn fill_symmetric_pair() {
        let g = grid_with_mask(|_, c| if c == 0 { 1.0 } else { 3.0 }, |_, c| c != 1, 1, 3);
        let f = fill_invalid(&g, 2).unwrap();
        assert_relative_eq!(f.height(0, 1).unwrap(), 2.0);
    }

    #[test]
    fn fill_matches_brute_force_idw() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (rows, cols) = (30, 40);
        let heights: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.0..10.0)).collect();
        let valid: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.4)).collect();
        let g = TerrainGrid::from_heights(Vector2::new(-3.0, 2.0), 1.0, rows, cols, heights, valid).unwrap();
        let f = fill_invalid(&g, 5).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                if g.valid[g.index(r, c)] {
                    assert_eq!(f.heights[g.index(r, c)], g.heights[g.index(r, c)]);
                    continue;
                }
                let q = g.cell_center(r, c);
                let mut cand: Vec<(f64, usize)> = (0..rows * cols)
                    .filter(|&i| g.valid[i])
                    .map(|i| {
                        let p = g.cell_center(i / cols, i % cols);
                        let d = p - q;
                        (d.x * d.x + d.y * d.y, i)
                    })
                    .collect();
                cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let (ws, vs) = cand[..5].iter().fold((0.0, 0.0), |(ws, vs), &(d2, i)| (ws + 1.0 / d2, vs + g.heights[i] / d2));
                assert!((f.heights[g.index(r, c)] - vs / ws).abs() < 1e-9);
            }
        }
        let again = fill_invalid(&f, 5).unwrap();
        assert_eq!(again, f);
    }

    #[test]
    fn fill_requires_valid_cells() {
        let g = grid_with_mask(|_, _| 0.0, |_, _| false, 2, 2);
        assert_eq!(fill_invalid(&g, 3), Err(TerrainError::NoValidCells));
    }

    #[test]
    fn query_cases() {
        let ramp = |x: f64, y: f64| 0.3 * x - 0.2 * y + 5.0;
        let g = TerrainGrid::from_fn(Vector2::new(10.0, 20.0), 1.0, 20, 30, ramp).unwrap();
        let c = g.cell_center(4, 7);
        assert_eq!(g.query_height(c.x, c.y).unwrap(), g.height(4, 7).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let x = rng.random_range(10.5..39.5);
            let y = rng.random_range(20.5..39.5);
            assert!((g.query_height(x, y).unwrap() - ramp(x, y)).abs() < 1e-9);
        }
        let flat = TerrainGrid::from_fn(Vector2::new(0.0, 0.0), 1.0, 5, 5, |_, _| 2.0).unwrap();
        assert_eq!(flat.query_height(-0.9, 5.8).unwrap(), 2.0);
        assert!(matches!(flat.query_height(-1.1, 2.0), Err(TerrainError::OutOfBounds { .. })));
        assert!(matches!(flat.query_height(2.0, 6.1), Err(TerrainError::OutOfBounds { .. })));
    }

    #[test]
    fn query_is_continuous() {
        let f = |x: f64, y: f64| (x * 0.3).sin() * 3.0 + (y * 0.2).cos() * 2.0;
        let g = TerrainGrid::from_fn(Vector2::new(0.0, 0.0), 1.0, 30, 30, f).unwrap();
        let slope = 3.0 * 0.3 + 2.0 * 0.2 + 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let x = rng.random_range(0.0..29.0);
            let y = rng.random_range(0.0..29.0);
            let a = g.query_height(x, y).unwrap();
            let b = g.query_height(x + 1e-6, y).unwrap();
            assert!((a - b).abs() <= slope * 1e-6 + 1e-9);
        }
    }

    #[test]
    fn altitude_cases() {
        let g = TerrainGrid::from_fn(Vector2::new(0.0, 0.0), 1.0, 10, 10, |_, _| 10.0).unwrap();
        let cam = RigidTransform::from_translation(Vector3::new(5.0, 5.0, 50.0), Frame::Camera, Frame::World);
        assert_relative_eq!(altitude_above_ground(&cam, &g).unwrap(), 40.0);
        let on = RigidTransform::from_translation(Vector3::new(5.0, 5.0, 10.0), Frame::Camera, Frame::World);
        assert!(matches!(altitude_above_ground(&on, &g), Err(TerrainError::BelowTerrain(_))));
    }

    #[test]
    fn ray_hits_plane_and_ramp() {
        let flat = TerrainGrid::from_fn(Vector2::new(0.0, 0.0), 1.0, 40, 40, |_, _| 3.0).unwrap();
        let o = Vector3::new(20.0, 20.0, 43.0);
        let d = Vector3::new(0.2, -0.1, -1.0);
        let p = intersect_ray(&flat, &o, &d, 1).unwrap();
        assert_relative_eq!(p, Vector3::new(28.0, 16.0, 3.0), epsilon = 1e-12);

        // gentle ramp: fixed point converges geometrically with rate slope * |d_xy| / |d_z|
        let ramp = TerrainGrid::from_fn(Vector2::new(0.0, 0.0), 1.0, 40, 40, |x, _| 0.1 * x).unwrap();
        let p = intersect_ray(&ramp, &o, &d, 20).unwrap();
        // analytic: z = 43 - t, x = 20 + 0.2 t, z = 0.1 x  =>  t = 41 / 1.02
        let t = 41.0 / 1.02;
        assert_relative_eq!(p, Vector3::new(20.0 + 0.2 * t, 20.0 - 0.1 * t, 43.0 - t), epsilon = 1e-9);
        assert!(intersect_ray(&flat, &o, &Vector3::new(1.0, 0.0, 0.0), 3).is_err());
    }

    #[test]
    fn planar_scene_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let c = 12.0;
        let pts: Vec<_> = (0..20000)
            .map(|_| Vector3::new(rng.random_range(0.0..60.0), rng.random_range(0.0..40.0), c + noise.sample(&mut rng)))
            .collect();
        let grid = terrain_from_cloud(&PointCloud::new(Frame::World, pts), &TerrainParams::default()).unwrap();
        for r in 0..grid.rows {
            for col in 0..grid.cols {
                let p = grid.cell_center(r, col);
                assert!((grid.query_height(p.x, p.y).unwrap() - c).abs() <= 0.2);
            }
        }
    }
}
