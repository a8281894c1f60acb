//! Feature detection and pairwise matching.
//!
//! Four matchers share one acceptance policy (ratio test, optional mutual
//! cross-check, one-to-one output):
//!
//! * [`match_bf`]: exhaustive all-pairs distances.
//! * [`match_kdtree`]: best-bin-first kd-tree over the B descriptors.
//! * [`match_block`]: candidates restricted to a square window around the
//!   location predicted from the prior poses and terrain depth.
//! * [`match_kdtree_block`]: the same window restriction, searched with
//!   per-block kd-trees.
//!
//! Candidate scores are squared L2 distances computed by
//! [`squared_distance`](crate::kdtree::squared_distance) in every matcher, so
//! equal candidate sets give bitwise-equal results. For binary descriptors
//! stored as 0/1 components the squared distance is the Hamming distance.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::{Matrix2x6, Matrix6, Vector2, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    transfer_pixel, CameraIntrinsics, Frame, GeometryError, PixelPoint, RigidTransform,
};
use crate::kdtree::{neighbor_cmp, squared_distance, KdTree, SearchLimit};
use crate::raster::GrayF32;
use crate::terrain::{altitude_above_ground, intersect_ray, TerrainError, TerrainGrid};

pub const DESCRIPTOR_LEN: usize = 64;
pub const MIN_IMAGE_SIDE: usize = 16;
pub const NMS_RADIUS: i64 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("image is {width}x{height}, need at least 16x16")]
    ImageTooSmall { width: usize, height: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("kd-tree search needs the L2 metric, got {0:?}")]
    MetricMismatch(Metric),
    #[error("descriptor has length {got}, set uses {expected}")]
    DescriptorLength { expected: usize, got: usize },
    #[error("keypoint ({x:.2}, {y:.2}) lies outside the {width}x{height} image")]
    KeypointOutside { x: f64, y: f64, width: u32, height: u32 },
    #[error("feature sets differ in metric or descriptor length")]
    IncompatibleSets,
    #[error("pose refinement needs at least 6 matches, got {0}")]
    InsufficientMatches(usize),
    #[error("pose refinement diverged: cost rose on {0} consecutive iterations")]
    Divergence(usize),
    #[error("pose refinement normal equations are singular")]
    Singular,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L2,
    Hamming,
}

impl Metric {
    /// Converts a squared-distance score into metric units.
    #[inline]
    pub fn distance(self, score: f32) -> f32 {
        match self {
            Metric::L2 => score.sqrt(),
            Metric::Hamming => score,
        }
    }

    /// Lowe test on scores: `d1 < ratio * d2` in metric units.
    #[inline]
    fn ratio_ok(self, s1: f32, s2: f32, ratio: f32) -> bool {
        match self {
            Metric::L2 => s1 < ratio * ratio * s2,
            Metric::Hamming => s1 < ratio * s2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub position: PixelPoint,
    pub response: f32,
}

/// Keypoints with parallel fixed-length descriptors, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    metric: Metric,
    desc_len: usize,
    keypoints: Vec<Keypoint>,
    descriptors: Vec<f32>,
}

impl FeatureSet {
    pub fn new(image_id: impl Into<String>, width: u32, height: u32, metric: Metric, desc_len: usize) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            metric,
            desc_len,
            keypoints: Vec::new(),
            descriptors: Vec::new(),
        }
    }

    pub fn push(&mut self, kp: Keypoint, descriptor: &[f32]) -> Result<(), MatchError> {
        if descriptor.len() != self.desc_len {
            return Err(MatchError::DescriptorLength {
                expected: self.desc_len,
                got: descriptor.len(),
            });
        }
        let p = kp.position;
        let inside = p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width as f64 - 1.0) && p.y <= (self.height as f64 - 1.0);
        if !inside {
            return Err(MatchError::KeypointOutside {
                x: p.x,
                y: p.y,
                width: self.width,
                height: self.height,
            });
        }
        self.keypoints.push(kp);
        self.descriptors.extend_from_slice(descriptor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn desc_len(&self) -> usize {
        self.desc_len
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    pub fn position(&self, i: usize) -> PixelPoint {
        self.keypoints[i].position
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.desc_len..(i + 1) * self.desc_len]
    }

    pub fn truncate(&mut self, n: usize) {
        self.keypoints.truncate(n);
        self.descriptors.truncate(n * self.desc_len);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f32,
}

/// Acceptance policy shared by all matchers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchParams {
    pub ratio: f32,
    pub cross_check: bool,
    /// Absolute distance bound applied when a query has a single candidate.
    pub max_distance: f32,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            cross_check: true,
            max_distance: 0.5,
        }
    }
}

// ---------------------------------------------------------------------------
// detection

/// Harris corners with non-maximum suppression and normalized 8x8 patch
/// descriptors. Deterministic for identical input.
pub fn detect_and_describe(image: &GrayF32, image_id: &str, max_features: usize) -> Result<FeatureSet, MatchError> {
    let (w, h) = (image.width, image.height);
    if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
        return Err(MatchError::ImageTooSmall { width: w, height: h });
    }
    if max_features == 0 {
        return Err(MatchError::InvalidParameter("max_features must be at least 1".into()));
    }
    let smooth = image.gaussian_blur(1.0);
    let response = harris_response(&smooth);

    let max_r = response.data.iter().cloned().fold(0.0f32, f32::max);
    let mut set = FeatureSet::new(image_id, w as u32, h as u32, Metric::L2, DESCRIPTOR_LEN);
    if max_r <= 0.0 {
        return Ok(set);
    }
    let threshold = (max_r * 1e-4).max(1e-3);
    let margin = 6usize;
    let mut peaks = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let r = response.get(x, y);
            if r > threshold && is_local_max(&response, x, y, r) {
                peaks.push((r, y, x));
            }
        }
    }
    // strongest first, ties by raster order
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut desc = [0.0f32; DESCRIPTOR_LEN];
    for &(r, y, x) in &peaks {
        if set.len() == max_features {
            break;
        }
        let p = subpixel_peak(&response, x, y);
        if !patch_descriptor(&smooth, &p, &mut desc) {
            continue;
        }
        set.push(Keypoint { position: p, response: r }, &desc)?;
    }
    Ok(set)
}

fn harris_response(img: &GrayF32) -> GrayF32 {
    let (w, h) = (img.width, img.height);
    let mut ixx = GrayF32::new(w, h);
    let mut iyy = GrayF32::new(w, h);
    let mut ixy = GrayF32::new(w, h);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let g = |dx: i64, dy: i64| img.get((x as i64 + dx) as usize, (y as i64 + dy) as usize);
            let gx = (g(1, -1) + 2.0 * g(1, 0) + g(1, 1) - g(-1, -1) - 2.0 * g(-1, 0) - g(-1, 1)) / 8.0;
            let gy = (g(-1, 1) + 2.0 * g(0, 1) + g(1, 1) - g(-1, -1) - 2.0 * g(0, -1) - g(1, -1)) / 8.0;
            ixx.set(x, y, gx * gx);
            iyy.set(x, y, gy * gy);
            ixy.set(x, y, gx * gy);
        }
    }
    let (ixx, iyy, ixy) = (ixx.gaussian_blur(1.5), iyy.gaussian_blur(1.5), ixy.gaussian_blur(1.5));
    let mut r = GrayF32::new(w, h);
    for i in 0..w * h {
        let (a, b, c) = (ixx.data[i], iyy.data[i], ixy.data[i]);
        let tr = a + b;
        r.data[i] = a * b - c * c - 0.04 * tr * tr;
    }
    r
}

fn is_local_max(r: &GrayF32, x: usize, y: usize, v: f32) -> bool {
    let (w, h) = (r.width as i64, r.height as i64);
    for dy in -NMS_RADIUS..=NMS_RADIUS {
        for dx in -NMS_RADIUS..=NMS_RADIUS {
            if (dx == 0 && dy == 0) || dx * dx + dy * dy > NMS_RADIUS * NMS_RADIUS {
                continue;
            }
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= w || ny >= h {
                continue;
            }
            let n = r.get(nx as usize, ny as usize);
            // plateau ties resolve to the earliest pixel in raster order
            if n > v || (n == v && (ny, nx) < (y as i64, x as i64)) {
                return false;
            }
        }
    }
    true
}

fn subpixel_peak(r: &GrayF32, x: usize, y: usize) -> PixelPoint {
    let offset = |m: f32, c: f32, p: f32| {
        let den = m - 2.0 * c + p;
        if den < 0.0 {
            (0.5 * (m - p) / den).clamp(-0.5, 0.5) as f64
        } else {
            0.0
        }
    };
    let c = r.get(x, y);
    let dx = offset(r.get(x - 1, y), c, r.get(x + 1, y));
    let dy = offset(r.get(x, y - 1), c, r.get(x, y + 1));
    Vector2::new(x as f64 + dx, y as f64 + dy)
}

/// 8x8 bilinear patch centered on `p`, mean-subtracted and unit-normalized.
/// Returns `false` for a flat patch.
fn patch_descriptor(img: &GrayF32, p: &PixelPoint, out: &mut [f32; DESCRIPTOR_LEN]) -> bool {
    for j in 0..8 {
        for i in 0..8 {
            out[j * 8 + i] = img.sample_clamped(p.x + i as f64 - 3.5, p.y + j as f64 - 3.5);
        }
    }
    let mean = out.iter().sum::<f32>() / DESCRIPTOR_LEN as f32;
    out.iter_mut().for_each(|v| *v -= mean);
    let norm = out.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm < 1e-3 {
        return false;
    }
    out.iter_mut().for_each(|v| *v /= norm);
    true
}

// ---------------------------------------------------------------------------
// prediction and block grid

/// Where a feature of image A should appear in image B, assuming depth `z_w`
/// below camera A. May fall outside image B.
pub fn predict_location(
    kp: &Keypoint,
    k: &CameraIntrinsics,
    pose_a: &RigidTransform,
    pose_b: &RigidTransform,
    z_w: f64,
) -> Result<PixelPoint, MatchError> {
    if !(z_w > 0.0) {
        return Err(MatchError::InvalidParameter(format!("depth must be positive, got {z_w}")));
    }
    Ok(transfer_pixel(&kp.position, k, pose_a, pose_b, z_w)?)
}

/// Predicts every A keypoint into image B; points behind camera B are skipped.
pub fn predict_all(
    features_a: &FeatureSet,
    k: &CameraIntrinsics,
    pose_a: &RigidTransform,
    pose_b: &RigidTransform,
    z_w: f64,
) -> Result<Vec<(usize, PixelPoint)>, MatchError> {
    let mut out = Vec::with_capacity(features_a.len());
    for (i, kp) in features_a.keypoints().iter().enumerate() {
        match predict_location(kp, k, pose_a, pose_b, z_w) {
            Ok(p) => out.push((i, p)),
            Err(MatchError::Geometry(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Spatial buckets over image B.
///
/// Every point has one home block `floor(position / blocksize)`; A-points
/// predicted into the padding margin outside image B are clamped into edge
/// blocks. The candidate window of a predicted A-point is the closed square
/// of side `blocksize + 2 * padding` centered on the prediction.
#[derive(Clone, Debug)]
pub struct BlockGrid {
    blocksize: f64,
    padding: f64,
    width: u32,
    height: u32,
    cols: usize,
    rows: usize,
    a_points: Vec<(usize, PixelPoint)>,
    a_buckets: Vec<Vec<usize>>,
    b_positions: Vec<PixelPoint>,
    b_buckets: Vec<Vec<usize>>,
}

pub fn build_block_grid(
    predicted_a: &[(usize, PixelPoint)],
    features_b: &FeatureSet,
    blocksize: f64,
    padding: f64,
    image_size: (u32, u32),
) -> BlockGrid {
    let blocksize = blocksize.max(1.0);
    let padding = padding.max(0.0);
    let (width, height) = image_size;
    let cols = ((width as f64 / blocksize).ceil() as usize).max(1);
    let rows = ((height as f64 / blocksize).ceil() as usize).max(1);
    let mut grid = BlockGrid {
        blocksize,
        padding,
        width,
        height,
        cols,
        rows,
        a_points: Vec::new(),
        a_buckets: vec![Vec::new(); cols * rows],
        b_positions: Vec::with_capacity(features_b.len()),
        b_buckets: vec![Vec::new(); cols * rows],
    };
    for (i, kp) in features_b.keypoints().iter().enumerate() {
        grid.b_positions.push(kp.position);
        let home = grid.home_block(&kp.position);
        grid.b_buckets[home].push(i);
    }
    let (lo_u, hi_u) = (-padding, width as f64 - 1.0 + padding);
    let (lo_v, hi_v) = (-padding, height as f64 - 1.0 + padding);
    for &(idx, p) in predicted_a {
        if p.x >= lo_u && p.x <= hi_u && p.y >= lo_v && p.y <= hi_v {
            let home = grid.home_block(&p);
            grid.a_buckets[home].push(grid.a_points.len());
            grid.a_points.push((idx, p));
        }
    }
    grid
}

impl BlockGrid {
    pub fn blocksize(&self) -> f64 {
        self.blocksize
    }

    pub fn padding(&self) -> f64 {
        self.padding
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }

    /// Half side of the candidate window.
    pub fn half_window(&self) -> f64 {
        0.5 * self.blocksize + self.padding
    }

    /// Retained A-points as `(index into A, predicted position)`.
    pub fn a_points(&self) -> &[(usize, PixelPoint)] {
        &self.a_points
    }

    pub fn home_block(&self, p: &PixelPoint) -> usize {
        let c = block_coord(p.x, self.blocksize, self.cols);
        let r = block_coord(p.y, self.blocksize, self.rows);
        r * self.cols + c
    }

    /// Block index range `[lo, hi]` per axis intersecting `[center - half, center + half]`.
    fn block_span(&self, center: &PixelPoint, half: f64) -> Option<((usize, usize), (usize, usize))> {
        let span = |c: f64, n: usize| -> Option<(usize, usize)> {
            let lo = ((c - half) / self.blocksize).floor();
            let hi = ((c + half) / self.blocksize).floor();
            if hi < 0.0 || lo > (n - 1) as f64 {
                return None;
            }
            Some((lo.max(0.0) as usize, (hi as usize).min(n - 1)))
        };
        Some((span(center.x, self.cols)?, span(center.y, self.rows)?))
    }

    fn in_window(&self, center: &PixelPoint, p: &PixelPoint, half: f64) -> bool {
        (p.x - center.x).abs() <= half && (p.y - center.y).abs() <= half
    }

    /// Calls `f` with every B index inside the window centered at `center`.
    pub fn for_each_candidate(&self, center: &PixelPoint, mut f: impl FnMut(usize)) {
        let half = self.half_window();
        let Some(((c0, c1), (r0, r1))) = self.block_span(center, half) else {
            return;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                for &b in &self.b_buckets[r * self.cols + c] {
                    if self.in_window(center, &self.b_positions[b], half) {
                        f(b);
                    }
                }
            }
        }
    }

    /// B candidates of a window, sorted ascending.
    pub fn candidates(&self, center: &PixelPoint) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_candidate(center, |b| out.push(b));
        out.sort_unstable();
        out
    }

    /// Total candidate evaluations [`match_block`] performs on this grid.
    pub fn candidate_count(&self) -> usize {
        let mut n = 0;
        for (_, p) in &self.a_points {
            self.for_each_candidate(p, |_| n += 1);
        }
        n
    }

    fn b_home_groups(&self) -> Vec<(usize, &[usize])> {
        self.b_buckets
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(i, v)| (i, v.as_slice()))
            .collect()
    }

    fn a_home_groups(&self) -> Vec<(usize, &[usize])> {
        self.a_buckets
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(i, v)| (i, v.as_slice()))
            .collect()
    }
}

fn block_coord(v: f64, blocksize: f64, n: usize) -> usize {
    let b = (v / blocksize).floor();
    if b <= 0.0 {
        0
    } else {
        (b as usize).min(n - 1)
    }
}

// ---------------------------------------------------------------------------
// matching core

type Cand = (f32, usize);

#[derive(Clone, Copy, Debug, Default)]
struct Forward {
    best: Option<Cand>,
    second: Option<Cand>,
}

impl Forward {
    #[inline]
    fn offer(&mut self, c: Cand) {
        match self.best {
            None => self.best = Some(c),
            Some(b) if neighbor_cmp(&c, &b) == Ordering::Less => {
                self.second = self.best;
                self.best = Some(c);
            }
            _ => match self.second {
                Some(s) if neighbor_cmp(&c, &s) != Ordering::Less => {}
                _ => self.second = Some(c),
            },
        }
    }

    fn from_knn(r: &[Cand]) -> Self {
        Self {
            best: r.first().copied(),
            second: r.get(1).copied(),
        }
    }
}

#[inline]
fn offer_min(slot: &mut Option<Cand>, c: Cand) {
    match slot {
        Some(s) if neighbor_cmp(&c, s) != Ordering::Less => {}
        _ => *slot = Some(c),
    }
}

const CHUNK: usize = 64;

/// Best/second per query and best per B over a candidate relation given by
/// `visit(a, sink)`. Returns the number of distance evaluations.
fn accumulate<V>(
    fa: &FeatureSet,
    fb: &FeatureSet,
    queries: &[usize],
    visit: V,
) -> (Vec<Forward>, Vec<Option<Cand>>, usize)
where
    V: Fn(usize, &mut dyn FnMut(usize)) + Sync,
{
    let na = fa.len();
    let nb = fb.len();
    let parts: Vec<(Vec<(usize, Forward)>, Vec<Option<Cand>>, usize)> = queries
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut fwd = Vec::with_capacity(chunk.len());
            let mut back: Vec<Option<Cand>> = vec![None; nb];
            let mut evals = 0usize;
            for &a in chunk {
                let da = fa.descriptor(a);
                let mut f = Forward::default();
                visit(a, &mut |b| {
                    let s = squared_distance(da, fb.descriptor(b));
                    evals += 1;
                    f.offer((s, b));
                    offer_min(&mut back[b], (s, a));
                });
                fwd.push((a, f));
            }
            (fwd, back, evals)
        })
        .collect();
    let mut forward = vec![Forward::default(); na];
    let mut back: Vec<Option<Cand>> = vec![None; nb];
    let mut evals = 0;
    for (fwd, part_back, e) in parts {
        for (a, f) in fwd {
            forward[a] = f;
        }
        for (slot, c) in back.iter_mut().zip(part_back) {
            if let Some(c) = c {
                offer_min(slot, c);
            }
        }
        evals += e;
    }
    (forward, back, evals)
}

/// Applies the ratio / single-candidate / cross-check policy and enforces a
/// one-to-one result, sorted by `index_a`.
fn finalize(forward: &[Forward], back: &[Option<Cand>], metric: Metric, params: &MatchParams) -> Vec<MatchPair> {
    let mut kept: Vec<Option<Cand>> = vec![None; back.len()];
    for (a, f) in forward.iter().enumerate() {
        let Some((s1, b)) = f.best else { continue };
        if params.cross_check && back[b].map(|c| c.1) != Some(a) {
            continue;
        }
        let accept = match f.second {
            Some((s2, _)) => metric.ratio_ok(s1, s2, params.ratio),
            None => metric.distance(s1) <= params.max_distance,
        };
        if accept {
            offer_min(&mut kept[b], (s1, a));
        }
    }
    let mut out: Vec<MatchPair> = kept
        .iter()
        .enumerate()
        .filter_map(|(b, c)| {
            c.map(|(s, a)| MatchPair {
                index_a: a,
                index_b: b,
                distance: metric.distance(s),
            })
        })
        .collect();
    out.sort_by_key(|m| m.index_a);
    out
}

fn check_compatible(fa: &FeatureSet, fb: &FeatureSet) -> Result<(), MatchError> {
    if fa.metric != fb.metric || fa.desc_len != fb.desc_len {
        return Err(MatchError::IncompatibleSets);
    }
    Ok(())
}

pub fn match_bf(fa: &FeatureSet, fb: &FeatureSet, params: &MatchParams) -> Result<Vec<MatchPair>, MatchError> {
    check_compatible(fa, fb)?;
    let queries: Vec<usize> = (0..fa.len()).collect();
    let nb = fb.len();
    let (fwd, back, _) = accumulate(fa, fb, &queries, |_, sink| {
        for b in 0..nb {
            sink(b);
        }
    });
    Ok(finalize(&fwd, &back, fa.metric, params))
}

/// Window-restricted matching; returns the matches and the number of
/// descriptor distance evaluations.
pub fn match_block_counted(
    fa: &FeatureSet,
    fb: &FeatureSet,
    grid: &BlockGrid,
    params: &MatchParams,
) -> Result<(Vec<MatchPair>, usize), MatchError> {
    check_compatible(fa, fb)?;
    let mut pred: Vec<Option<PixelPoint>> = vec![None; fa.len()];
    for &(a, p) in &grid.a_points {
        pred[a] = Some(p);
    }
    let queries: Vec<usize> = grid.a_points.iter().map(|&(a, _)| a).collect();
    let (fwd, back, evals) = accumulate(fa, fb, &queries, |a, sink| {
        if let Some(p) = pred[a] {
            grid.for_each_candidate(&p, |b| sink(b));
        }
    });
    Ok((finalize(&fwd, &back, fa.metric, params), evals))
}

pub fn match_block(
    fa: &FeatureSet,
    fb: &FeatureSet,
    grid: &BlockGrid,
    params: &MatchParams,
) -> Result<Vec<MatchPair>, MatchError> {
    match_block_counted(fa, fb, grid, params).map(|r| r.0)
}

/// Search settings for the kd-tree matchers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdParams {
    pub limit: SearchLimit,
    pub leaf_size: usize,
}

impl Default for KdParams {
    fn default() -> Self {
        Self {
            limit: SearchLimit::Checks(64),
            leaf_size: 8,
        }
    }
}

pub fn match_kdtree(
    fa: &FeatureSet,
    fb: &FeatureSet,
    params: &MatchParams,
    kd: &KdParams,
) -> Result<Vec<MatchPair>, MatchError> {
    check_compatible(fa, fb)?;
    if fa.metric != Metric::L2 {
        return Err(MatchError::MetricMismatch(fa.metric));
    }
    let dim = fa.desc_len;
    let tree_b = KdTree::build(dim, (0..fb.len()).map(|i| (i, fb.descriptor(i))), kd.leaf_size);
    let forward: Vec<Forward> = (0..fa.len())
        .into_par_iter()
        .map(|a| Forward::from_knn(&tree_b.knn(fa.descriptor(a), 2, kd.limit)))
        .collect();
    let back: Vec<Option<Cand>> = if params.cross_check {
        let tree_a = KdTree::build(dim, (0..fa.len()).map(|i| (i, fa.descriptor(i))), kd.leaf_size);
        (0..fb.len())
            .into_par_iter()
            .map(|b| tree_a.knn(fb.descriptor(b), 1, kd.limit).first().copied())
            .collect()
    } else {
        Vec::new()
    };
    let back = if params.cross_check { back } else { vec![None; fb.len()] };
    Ok(finalize(&forward, &back, fa.metric, params))
}

/// Window-restricted kd-tree matching. One tree per occupied home block,
/// holding the far-side points that can fall in any window of that block;
/// each query then filters by its own window. Trees are built only for
/// blocks that have a query whose window outgrows the search budget.
pub fn match_kdtree_block(
    fa: &FeatureSet,
    fb: &FeatureSet,
    grid: &BlockGrid,
    params: &MatchParams,
    kd: &KdParams,
) -> Result<Vec<MatchPair>, MatchError> {
    check_compatible(fa, fb)?;
    if fa.metric != Metric::L2 {
        return Err(MatchError::MetricMismatch(fa.metric));
    }
    let dim = fa.desc_len;
    let half = grid.half_window();
    // A limited search examines about `checks * leaf_size` points; windows
    // with fewer candidates are scanned exactly instead.
    let budget = match kd.limit {
        SearchLimit::Exact => usize::MAX,
        SearchLimit::Checks(c) => c.max(1).saturating_mul(kd.leaf_size.max(1)),
    };
    let mut pred: Vec<Option<PixelPoint>> = vec![None; fa.len()];
    for &(a, p) in &grid.a_points {
        pred[a] = Some(p);
    }

    // forward: A queries against B trees
    let groups = grid.a_home_groups();
    let parts: Vec<Vec<(usize, Forward)>> = groups
        .par_iter()
        .map(|&(_, members)| {
            let mut tree = None;
            let mut window = Vec::new();
            members
                .iter()
                .map(|&s| {
                    let (a, p) = grid.a_points[s];
                    let da = fa.descriptor(a);
                    window.clear();
                    grid.for_each_candidate(&p, |b| window.push(b));
                    if window.len() <= budget {
                        let mut f = Forward::default();
                        for &b in &window {
                            f.offer((squared_distance(da, fb.descriptor(b)), b));
                        }
                        return (a, f);
                    }
                    let tree = tree.get_or_insert_with(|| {
                        let centers: Vec<PixelPoint> = members.iter().map(|&s| grid.a_points[s].1).collect();
                        let pool = points_near(&centers, half, &grid.b_positions, |b| {
                            grid.b_buckets[b].iter().copied().collect()
                        }, grid);
                        KdTree::build(dim, pool.iter().map(|&b| (b, fb.descriptor(b))), kd.leaf_size)
                    });
                    let r = tree.knn_filtered(da, 2, kd.limit, |b| grid.in_window(&p, &grid.b_positions[b], half));
                    (a, Forward::from_knn(&r))
                })
                .collect()
        })
        .collect();
    let mut forward = vec![Forward::default(); fa.len()];
    for (a, f) in parts.into_iter().flatten() {
        forward[a] = f;
    }

    // reverse: B queries against A trees over the same window relation
    let mut back: Vec<Option<Cand>> = vec![None; fb.len()];
    if params.cross_check {
        let a_positions: Vec<PixelPoint> = grid.a_points.iter().map(|&(_, p)| p).collect();
        let groups = grid.b_home_groups();
        let parts: Vec<Vec<(usize, Option<Cand>)>> = groups
            .par_iter()
            .map(|&(_, members)| {
                let mut tree = None;
                members
                    .iter()
                    .map(|&b| {
                        let pb = grid.b_positions[b];
                        let db = fb.descriptor(b);
                        let window = points_near(&[pb], half, &a_positions, |blk| grid.a_buckets[blk].clone(), grid);
                        if window.len() <= budget {
                            let mut best = None;
                            for &s in &window {
                                let a = grid.a_points[s].0;
                                offer_min(&mut best, (squared_distance(db, fa.descriptor(a)), a));
                            }
                            return (b, best);
                        }
                        let tree = tree.get_or_insert_with(|| {
                            let centers: Vec<PixelPoint> = members.iter().map(|&b| grid.b_positions[b]).collect();
                            let pool = points_near(&centers, half, &a_positions, |blk| grid.a_buckets[blk].clone(), grid);
                            KdTree::build(
                                dim,
                                pool.iter().map(|&s| (grid.a_points[s].0, fa.descriptor(grid.a_points[s].0))),
                                kd.leaf_size,
                            )
                        });
                        let r = tree.knn_filtered(db, 1, kd.limit, |a| pred[a].is_some_and(|pa| grid.in_window(&pa, &pb, half)));
                        (b, r.first().copied())
                    })
                    .collect()
            })
            .collect();
        for (b, c) in parts.into_iter().flatten() {
            back[b] = c;
        }
    }
    Ok(finalize(&forward, &back, fa.metric, params))
}

/// Members of `positions` (looked up through the block buckets returned by
/// `bucket`) inside the bounding box of `centers` grown by `half`.
fn points_near(
    centers: &[PixelPoint],
    half: f64,
    positions: &[PixelPoint],
    bucket: impl Fn(usize) -> Vec<usize>,
    grid: &BlockGrid,
) -> Vec<usize> {
    let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in centers {
        lo = lo.inf(c);
        hi = hi.sup(c);
    }
    let mid = (lo + hi) * 0.5;
    let ext = (hi - lo) * 0.5 + Vector2::new(half, half);
    let span = |c: f64, e: f64, n: usize| -> Option<(usize, usize)> {
        let l = ((c - e) / grid.blocksize).floor();
        let h = ((c + e) / grid.blocksize).floor();
        if h < 0.0 || l > (n - 1) as f64 {
            return None;
        }
        Some((l.max(0.0) as usize, (h as usize).min(n - 1)))
    };
    let (Some((c0, c1)), Some((r0, r1))) = (span(mid.x, ext.x, grid.cols), span(mid.y, ext.y, grid.rows)) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for r in r0..=r1 {
        for c in c0..=c1 {
            for i in bucket(r * grid.cols + c) {
                let p = positions[i];
                if (p.x - mid.x).abs() <= ext.x && (p.y - mid.y).abs() <= ext.y {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// Keeps at most `max_per_block` matches per A-keypoint home block, choosing
/// the smallest distances (ties by lower `index_a`). Input order is kept.
pub fn homogenize(
    matches: &[MatchPair],
    features_a: &FeatureSet,
    blocksize: f64,
    max_per_block: usize,
) -> Result<Vec<MatchPair>, MatchError> {
    if max_per_block == 0 {
        return Err(MatchError::InvalidParameter("max_per_block must be at least 1".into()));
    }
    if !(blocksize >= 1.0) {
        return Err(MatchError::InvalidParameter("blocksize must be at least 1".into()));
    }
    let mut groups: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, m) in matches.iter().enumerate() {
        let p = features_a.position(m.index_a);
        let key = ((p.x / blocksize).floor() as i64, (p.y / blocksize).floor() as i64);
        groups.entry(key).or_default().push(i);
    }
    let mut keep = vec![false; matches.len()];
    for members in groups.values_mut() {
        members.sort_by(|&i, &j| {
            matches[i]
                .distance
                .total_cmp(&matches[j].distance)
                .then(matches[i].index_a.cmp(&matches[j].index_a))
        });
        for &i in members.iter().take(max_per_block) {
            keep[i] = true;
        }
    }
    Ok(matches
        .iter()
        .zip(keep)
        .filter_map(|(m, k)| k.then_some(*m))
        .collect())
}

/// Image pairs `(i, j)` with `i < j <= i + overlap`.
pub fn sequential_pairs(n_frames: usize, overlap: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..n_frames {
        for j in i + 1..=(i + overlap).min(n_frames.saturating_sub(1)) {
            out.push((i, j));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// matcher selection

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatcherKind {
    #[serde(rename = "bf")]
    Bf,
    #[serde(rename = "bf-opt")]
    BfOpt,
    #[serde(rename = "kd")]
    Kd,
    #[serde(rename = "kd-opt")]
    KdOpt,
}

impl MatcherKind {
    pub const ALL: [MatcherKind; 4] = [MatcherKind::Bf, MatcherKind::BfOpt, MatcherKind::Kd, MatcherKind::KdOpt];

    pub fn name(self) -> &'static str {
        match self {
            MatcherKind::Bf => "bf",
            MatcherKind::BfOpt => "bf-opt",
            MatcherKind::Kd => "kd",
            MatcherKind::KdOpt => "kd-opt",
        }
    }

    pub fn uses_prior(self) -> bool {
        matches!(self, MatcherKind::BfOpt | MatcherKind::KdOpt)
    }
}

impl std::str::FromStr for MatcherKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown matcher '{s}' (expected bf, bf-opt, kd, kd-opt)"))
    }
}

impl std::fmt::Display for MatcherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub matcher: MatcherKind,
    pub ratio: f32,
    pub cross_check: bool,
    pub max_distance: f32,
    pub blocksize: f64,
    /// Defaults to `blocksize / 4`.
    pub padding: Option<f64>,
    pub checks: usize,
    pub leaf_size: usize,
    /// Keep at most this many pairs per block after matching.
    pub homogenize: Option<usize>,
    pub overlap: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        let p = MatchParams::default();
        Self {
            matcher: MatcherKind::BfOpt,
            ratio: p.ratio,
            cross_check: p.cross_check,
            max_distance: p.max_distance,
            blocksize: 120.0,
            padding: None,
            checks: 64,
            leaf_size: 8,
            homogenize: None,
            overlap: 4,
        }
    }
}

impl MatchConfig {
    pub fn params(&self) -> MatchParams {
        MatchParams {
            ratio: self.ratio,
            cross_check: self.cross_check,
            max_distance: self.max_distance,
        }
    }

    pub fn padding(&self) -> f64 {
        self.padding.unwrap_or(self.blocksize / 4.0)
    }

    pub fn kd(&self) -> KdParams {
        KdParams {
            limit: SearchLimit::Checks(self.checks),
            leaf_size: self.leaf_size,
        }
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        let bad = |m: &str| Err(MatchError::InvalidParameter(m.into()));
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad("ratio must be in (0, 1]");
        }
        if !(self.blocksize >= 1.0) {
            return bad("blocksize must be at least 1");
        }
        if !(self.padding() >= 0.0) {
            return bad("padding must be non-negative");
        }
        if self.checks == 0 || self.leaf_size == 0 {
            return bad("checks and leaf_size must be at least 1");
        }
        if self.homogenize == Some(0) {
            return bad("homogenize limit must be at least 1");
        }
        Ok(())
    }
}

/// Pose inputs for prior-guided matchers.
pub struct PairPrior<'a> {
    pub k: &'a CameraIntrinsics,
    pub pose_a: &'a RigidTransform,
    pub pose_b: &'a RigidTransform,
    pub terrain: &'a TerrainGrid,
}

/// Matches one image pair with the configured matcher.
pub fn match_pair(
    cfg: &MatchConfig,
    fa: &FeatureSet,
    fb: &FeatureSet,
    prior: Option<&PairPrior<'_>>,
) -> Result<Vec<MatchPair>, MatchError> {
    let params = cfg.params();
    let grid = |prior: Option<&PairPrior<'_>>| -> Result<BlockGrid, MatchError> {
        let prior = prior.ok_or_else(|| MatchError::InvalidParameter("prior poses required".into()))?;
        let z_w = altitude_above_ground(prior.pose_a, prior.terrain)?;
        let pred = predict_all(fa, prior.k, prior.pose_a, prior.pose_b, z_w)?;
        Ok(build_block_grid(&pred, fb, cfg.blocksize, cfg.padding(), (fb.width, fb.height)))
    };
    let matches = match cfg.matcher {
        MatcherKind::Bf => match_bf(fa, fb, &params)?,
        MatcherKind::Kd => match_kdtree(fa, fb, &params, &cfg.kd())?,
        MatcherKind::BfOpt => match_block(fa, fb, &grid(prior)?, &params)?,
        MatcherKind::KdOpt => match_kdtree_block(fa, fb, &grid(prior)?, &params, &cfg.kd())?,
    };
    match cfg.homogenize {
        Some(n) => homogenize(&matches, fa, cfg.blocksize, n),
        None => Ok(matches),
    }
}

// ---------------------------------------------------------------------------
// pose refinement

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineParams {
    pub huber: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub lift_iterations: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            huber: 2.0,
            max_iterations: 20,
            step_tolerance: 1e-8,
            lift_iterations: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseRefinement {
    /// Refined `Camera -> World` pose of image B.
    pub pose: RigidTransform,
    /// Root-mean-square reprojection residual, pixels.
    pub rms: f64,
    pub iterations: usize,
    /// Robust cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Lifts the A keypoints of `matches` onto the terrain, then refines pose B
/// by Gauss-Newton on the reprojection error with a Huber kernel.
#[allow(clippy::too_many_arguments)]
pub fn refine_pose(
    matches: &[MatchPair],
    fa: &FeatureSet,
    fb: &FeatureSet,
    terrain: &TerrainGrid,
    k: &CameraIntrinsics,
    pose_a: &RigidTransform,
    initial_pose_b: &RigidTransform,
    params: &RefineParams,
) -> Result<PoseRefinement, MatchError> {
    if matches.len() < 6 {
        return Err(MatchError::InsufficientMatches(matches.len()));
    }
    let origin = *pose_a.translation();
    let mut world = Vec::with_capacity(matches.len());
    let mut observed = Vec::with_capacity(matches.len());
    for m in matches {
        let dir = pose_a.transform_vector(&k.ray(&fa.position(m.index_a)));
        world.push(intersect_ray(terrain, &origin, &dir, params.lift_iterations)?);
        observed.push(fb.position(m.index_b));
    }
    refine_from_points(&world, &observed, k, initial_pose_b, params)
}

/// Gauss-Newton refinement of a `Camera -> World` pose from known world
/// points and their observed pixels.
pub fn refine_from_points(
    world: &[Vector3<f64>],
    observed: &[PixelPoint],
    k: &CameraIntrinsics,
    initial: &RigidTransform,
    params: &RefineParams,
) -> Result<PoseRefinement, MatchError> {
    if world.len() < 6 || world.len() != observed.len() {
        return Err(MatchError::InsufficientMatches(world.len().min(observed.len())));
    }
    // world -> camera
    let mut rot = initial.rotation().inverse();
    let mut trans = -(rot * initial.translation());
    let mut cost = robust_cost(world, observed, k, &rot, &trans, params.huber).ok_or_else(|| {
        MatchError::InvalidParameter("a lifted point lies behind the initial camera".into())
    })?;
    let mut history = vec![cost];
    let mut rises = 0usize;
    let mut iterations = 0usize;

    for _ in 0..params.max_iterations {
        iterations += 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (pw, obs) in world.iter().zip(observed) {
            let pc = rot * pw + trans;
            let (r, j) = residual_jacobian(k, &pc, obs);
            let e = r.norm();
            let w = if e <= params.huber { 1.0 } else { params.huber / e };
            h += w * j.transpose() * j;
            g += w * j.transpose() * r;
        }
        let step = h.cholesky().ok_or(MatchError::Singular)?.solve(&(-g));
        if step.norm() < params.step_tolerance {
            break;
        }
        let mut scale = 1.0;
        let mut accepted = false;
        let mut rose = false;
        for attempt in 0..8 {
            let (r2, t2) = apply_step(&rot, &trans, &(step * scale));
            match robust_cost(world, observed, k, &r2, &t2, params.huber) {
                Some(c) if c <= cost => {
                    rot = r2;
                    trans = t2;
                    cost = c;
                    accepted = true;
                    break;
                }
                _ => {
                    if attempt == 0 {
                        rose = true;
                    }
                    scale *= 0.5;
                }
            }
        }
        rises = if rose { rises + 1 } else { 0 };
        if rises >= 3 {
            return Err(MatchError::Divergence(rises));
        }
        if accepted {
            history.push(cost);
        } else {
            break;
        }
    }

    let mut sq = 0.0;
    for (pw, obs) in world.iter().zip(observed) {
        let pc = rot * pw + trans;
        sq += (project(k, &pc) - obs).norm_squared();
    }
    let inv_rot = rot.inverse();
    let pose = RigidTransform::new(inv_rot, -(inv_rot * trans), Frame::Camera, Frame::World);
    Ok(PoseRefinement {
        pose,
        rms: (sq / world.len() as f64).sqrt(),
        iterations,
        cost_history: history,
    })
}

/// Refines every frame that has at least six matches with earlier frames:
/// A keypoints are lifted with the prior pose of their own frame, and the
/// later frame's pose is solved against all of them at once. Frames without
/// enough support (including the first) yield `None`.
pub fn refine_trajectory(
    features: &[FeatureSet],
    pairs: &[(usize, usize)],
    matches: &[Vec<MatchPair>],
    priors: &[RigidTransform],
    k: &CameraIntrinsics,
    terrain: &TerrainGrid,
    params: &RefineParams,
) -> Vec<Option<PoseRefinement>> {
    (0..features.len())
        .into_par_iter()
        .map(|b| {
            let mut world = Vec::new();
            let mut observed = Vec::new();
            for (&(ia, ib), ms) in pairs.iter().zip(matches) {
                if ib != b {
                    continue;
                }
                let pose_a = &priors[ia];
                let origin = *pose_a.translation();
                for m in ms {
                    let dir = pose_a.transform_vector(&k.ray(&features[ia].position(m.index_a)));
                    if let Ok(p) = intersect_ray(terrain, &origin, &dir, params.lift_iterations) {
                        world.push(p);
                        observed.push(features[b].position(m.index_b));
                    }
                }
            }
            if world.len() < 6 {
                return None;
            }
            refine_from_points(&world, &observed, k, &priors[b], params).ok()
        })
        .collect()
}

#[inline]
fn project(k: &CameraIntrinsics, pc: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy)
}

/// Residual and its Jacobian w.r.t. the left perturbation `[dt, dtheta]`
/// of the world-to-camera transform.
fn residual_jacobian(k: &CameraIntrinsics, pc: &Vector3<f64>, obs: &PixelPoint) -> (Vector2<f64>, Matrix2x6<f64>) {
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let r = project(k, pc) - obs;
    let du = [k.fx / z, 0.0, -k.fx * x / (z * z)];
    let dv = [0.0, k.fy / z, -k.fy * y / (z * z)];
    // d pc / d theta = -[pc]x
    let skew = nalgebra::Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let mut j = Matrix2x6::zeros();
    for c in 0..3 {
        j[(0, c)] = du[c];
        j[(1, c)] = dv[c];
    }
    for c in 0..3 {
        let col = -skew.column(c);
        j[(0, 3 + c)] = du[0] * col[0] + du[1] * col[1] + du[2] * col[2];
        j[(1, 3 + c)] = dv[0] * col[0] + dv[1] * col[1] + dv[2] * col[2];
    }
    (r, j)
}

fn apply_step(
    rot: &nalgebra::UnitQuaternion<f64>,
    trans: &Vector3<f64>,
    step: &Vector6<f64>,
) -> (nalgebra::UnitQuaternion<f64>, Vector3<f64>) {
    let dt = Vector3::new(step[0], step[1], step[2]);
    let dr = nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(step[3], step[4], step[5]));
    (dr * rot, dr * trans + dt)
}

/// Huber cost; `None` if a point falls behind the camera.
fn robust_cost(
    world: &[Vector3<f64>],
    observed: &[PixelPoint],
    k: &CameraIntrinsics,
    rot: &nalgebra::UnitQuaternion<f64>,
    trans: &Vector3<f64>,
    delta: f64,
) -> Option<f64> {
    let mut c = 0.0;
    for (pw, obs) in world.iter().zip(observed) {
        let pc = rot * pw + trans;
        if !(pc.z > 0.0) {
            return None;
        }
        let e = (project(k, &pc) - obs).norm();
        c += if e <= delta { 0.5 * e * e } else { delta * (e - 0.5 * delta) };
    }
    Some(c)
}
