//! Trajectory error, match quality and benchmark tables.

use std::collections::HashSet;
use std::time::Instant;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Frame, RigidTransform};
use crate::matching::{
    match_pair, refine_trajectory, FeatureSet, MatchConfig, MatchError, MatchPair, MatcherKind, PairPrior,
    RefineParams,
};
use crate::ortho::OrthoRaster;
use crate::terrain::TerrainGrid;
use crate::CameraIntrinsics;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("timestamps must be strictly increasing (index {0})")]
    UnsortedTimestamps(usize),
    #[error("trajectory has {poses} poses but {stamps} timestamps")]
    LengthMismatch { stamps: usize, poses: usize },
    #[error("max_dt must be positive")]
    NonPositiveDt,
    #[error("trajectories share no timestamps within the tolerance")]
    NoOverlap,
    #[error("alignment is degenerate (need at least 3 non-collinear points)")]
    Degenerate,
    #[error("no labels to evaluate against")]
    EmptyLabels,
    #[error(transparent)]
    Match(#[from] MatchError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    stamps: Vec<f64>,
    poses: Vec<RigidTransform>,
}

impl Trajectory {
    pub fn new(stamps: Vec<f64>, poses: Vec<RigidTransform>) -> Result<Self, EvalError> {
        if stamps.len() != poses.len() {
            return Err(EvalError::LengthMismatch {
                stamps: stamps.len(),
                poses: poses.len(),
            });
        }
        if let Some(i) = stamps.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(EvalError::UnsortedTimestamps(i + 1));
        }
        Ok(Self { stamps, poses })
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn poses(&self) -> &[RigidTransform] {
        &self.poses
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| *p.translation()).collect()
    }

    /// Applies `t` on the left of every pose.
    pub fn transformed(&self, t: &Alignment) -> Self {
        Self {
            stamps: self.stamps.clone(),
            poses: self.poses.iter().map(|p| t.apply_pose(p)).collect(),
        }
    }
}

/// Greedy nearest-timestamp association; each pose is used at most once and
/// pairs are returned in order of `a`.
pub fn associate(a: &Trajectory, b: &Trajectory, max_dt: f64) -> Result<Vec<(usize, usize)>, EvalError> {
    if !(max_dt > 0.0) {
        return Err(EvalError::NonPositiveDt);
    }
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    let mut lo = 0usize;
    for (i, &ta) in a.stamps.iter().enumerate() {
        while lo < b.stamps.len() && b.stamps[lo] < ta - max_dt {
            lo += 1;
        }
        let mut j = lo;
        while j < b.stamps.len() && b.stamps[j] <= ta + max_dt {
            cands.push(((b.stamps[j] - ta).abs(), i, j));
            j += 1;
        }
    }
    cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut out = Vec::new();
    for (_, i, j) in cands {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    if out.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    out.sort_unstable();
    Ok(out)
}

/// Similarity `x -> scale * R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Alignment {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_pose(&self, p: &RigidTransform) -> RigidTransform {
        RigidTransform::new(self.rotation * p.rotation(), self.apply(p.translation()), p.from_frame(), p.to_frame())
    }

    pub fn as_rigid(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.translation, Frame::World, Frame::World)
    }
}

/// Closed-form least squares `ref ≈ s R est + t` (Umeyama). With
/// `with_scale = false` the scale is fixed to 1.
pub fn umeyama_align(est: &[Vector3<f64>], reference: &[Vector3<f64>], with_scale: bool) -> Result<Alignment, EvalError> {
    let n = est.len();
    if n < 3 || n != reference.len() {
        return Err(EvalError::Degenerate);
    }
    let inv = 1.0 / n as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() * inv;
    let mu_r = reference.iter().sum::<Vector3<f64>>() * inv;
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let (de, dr) = (e - mu_e, r - mu_r);
        cov += dr * de.transpose();
        var_e += de.norm_squared();
    }
    cov *= inv;
    var_e *= inv;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.ok_or(EvalError::Degenerate)?, svd.v_t.ok_or(EvalError::Degenerate)?);
    let mut sv: Vec<(f64, usize)> = svd.singular_values.iter().cloned().zip(0..3).collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0));
    if !(sv[0].0 > 0.0) || sv[1].0 <= 1e-12 * sv[0].0 {
        return Err(EvalError::Degenerate);
    }
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // flip the axis of the smallest singular value
        s[(sv[2].1, sv[2].1)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = if with_scale {
        let d = Matrix3::from_diagonal(&svd.singular_values);
        (d * s).trace() / var_e
    } else {
        1.0
    };
    let rotation = UnitQuaternion::from_matrix(&r);
    Ok(Alignment {
        rotation,
        translation: mu_r - rotation * mu_e * scale,
        scale,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn from_errors(e: &[f64]) -> Self {
        if e.is_empty() {
            return Self {
                rmse: 0.0,
                mean: 0.0,
                median: 0.0,
                max: 0.0,
            };
        }
        let n = e.len() as f64;
        let mut sorted = e.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        Self {
            rmse: (e.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
            mean: e.iter().sum::<f64>() / n,
            median: if m % 2 == 1 { sorted[m / 2] } else { 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) },
            max: sorted[m - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub translation: ErrorStats,
    /// Degrees.
    pub rotation: ErrorStats,
    pub alignment: Alignment,
    pub pairs: usize,
}

/// How the estimate is aligned before errors are taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    Rigid,
    Similarity,
    /// Centroid shift only; well defined for collinear trajectories.
    Translation,
}

/// Absolute trajectory error after aligning `est` onto `gt`.
pub fn compute_ate(est: &Trajectory, gt: &Trajectory, max_dt: f64, with_scale: bool) -> Result<AteResult, EvalError> {
    let mode = if with_scale { AlignMode::Similarity } else { AlignMode::Rigid };
    compute_ate_with(est, gt, max_dt, mode)
}

pub fn compute_ate_with(est: &Trajectory, gt: &Trajectory, max_dt: f64, mode: AlignMode) -> Result<AteResult, EvalError> {
    let pairs = associate(est, gt, max_dt)?;
    let e: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| *est.poses[i].translation()).collect();
    let g: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| *gt.poses[j].translation()).collect();
    let align = match mode {
        AlignMode::Rigid => umeyama_align(&e, &g, false)?,
        AlignMode::Similarity => umeyama_align(&e, &g, true)?,
        AlignMode::Translation => {
            let inv = 1.0 / e.len() as f64;
            Alignment {
                translation: (g.iter().sum::<Vector3<f64>>() - e.iter().sum::<Vector3<f64>>()) * inv,
                ..Alignment::identity()
            }
        }
    };
    let mut terr = Vec::with_capacity(pairs.len());
    let mut rerr = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        let p = align.apply_pose(&est.poses[i]);
        terr.push((gt.poses[j].translation() - p.translation()).norm());
        rerr.push(gt.poses[j].rotation().angle_to(p.rotation()).to_degrees());
    }
    Ok(AteResult {
        translation: ErrorStats::from_errors(&terr),
        rotation: ErrorStats::from_errors(&rerr),
        alignment: align,
        pairs: pairs.len(),
    })
}

/// Root-mean-square distance between paired positions, no alignment.
pub fn position_rmse(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / n as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchQuality {
    /// 1.0 by convention when there are no matches.
    pub precision: f64,
    pub recall: f64,
    pub correct: usize,
    pub matches: usize,
    pub labels: usize,
}

/// Precision and recall of `matches` against true `(index_a, index_b)` pairs.
pub fn eval_matches(matches: &[MatchPair], labels: &[(usize, usize)]) -> Result<MatchQuality, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::EmptyLabels);
    }
    let truth: HashSet<(usize, usize)> = labels.iter().copied().collect();
    let correct = matches.iter().filter(|m| truth.contains(&(m.index_a, m.index_b))).count();
    Ok(MatchQuality {
        precision: if matches.is_empty() { 1.0 } else { correct as f64 / matches.len() as f64 },
        recall: correct as f64 / truth.len() as f64,
        correct,
        matches: matches.len(),
        labels: truth.len(),
    })
}

// ---------------------------------------------------------------------------
// benchmark

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "opt")]
    Opt,
    #[serde(rename = "opt+hom")]
    OptHom,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::None, Variant::Opt, Variant::OptHom];

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Opt => "opt",
            Variant::OptHom => "opt+hom",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatcherFamily {
    #[serde(rename = "bf")]
    Bf,
    #[serde(rename = "kd")]
    Kd,
}

impl MatcherFamily {
    pub fn name(self) -> &'static str {
        match self {
            MatcherFamily::Bf => "bf",
            MatcherFamily::Kd => "kd",
        }
    }

    pub fn kind(self, variant: Variant) -> MatcherKind {
        match (self, variant) {
            (MatcherFamily::Bf, Variant::None) => MatcherKind::Bf,
            (MatcherFamily::Bf, _) => MatcherKind::BfOpt,
            (MatcherFamily::Kd, Variant::None) => MatcherKind::Kd,
            (MatcherFamily::Kd, _) => MatcherKind::KdOpt,
        }
    }
}

pub const BENCH_CSV_HEADER: &str = "scene,matcher,variant,extract_s,match_s,refine_s,total_s,matches,points3d";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scene: String,
    pub matcher: MatcherFamily,
    pub variant: Variant,
    pub extract_s: f64,
    pub match_s: f64,
    pub refine_s: f64,
    pub total_s: f64,
    pub matches: usize,
    pub points3d: usize,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.scene,
            self.matcher.name(),
            self.variant.name(),
            self.extract_s,
            self.match_s,
            self.refine_s,
            self.total_s,
            self.matches,
            self.points3d
        )
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Everything a benchmark cell needs; features are shared by all cells.
pub struct BenchInput<'a> {
    pub scene: String,
    pub features: &'a [FeatureSet],
    /// Prior `Camera -> World` poses per frame.
    pub priors: &'a [RigidTransform],
    pub k: &'a CameraIntrinsics,
    pub terrain: &'a TerrainGrid,
    pub pairs: &'a [(usize, usize)],
    /// Time already spent producing `features`.
    pub extract_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchCell {
    pub row: BenchRow,
    pub matches: Vec<Vec<MatchPair>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn rows(&self) -> Vec<BenchRow> {
        self.cells.iter().map(|c| c.row.clone()).collect()
    }

    pub fn cell(&self, family: MatcherFamily, variant: Variant) -> Option<&BenchCell> {
        self.cells
            .iter()
            .find(|c| c.row.matcher == family && c.row.variant == variant)
    }

    /// Matching-time ratio `none / opt` for one matcher family.
    pub fn speedup(&self, family: MatcherFamily) -> Option<f64> {
        let none = self.cell(family, Variant::None)?.row.match_s;
        let opt = self.cell(family, Variant::Opt)?.row.match_s;
        (opt > 0.0).then(|| none / opt)
    }
}

/// Matches every pair with one matcher configuration; returns per-pair
/// matches and the wall-clock time.
pub fn run_matching(
    cfg: &MatchConfig,
    input: &BenchInput<'_>,
) -> Result<(Vec<Vec<MatchPair>>, f64), EvalError> {
    let t0 = Instant::now();
    let mut out = Vec::with_capacity(input.pairs.len());
    for &(a, b) in input.pairs {
        let prior = PairPrior {
            k: input.k,
            pose_a: &input.priors[a],
            pose_b: &input.priors[b],
            terrain: input.terrain,
        };
        out.push(match_pair(cfg, &input.features[a], &input.features[b], Some(&prior))?);
    }
    Ok((out, t0.elapsed().as_secs_f64()))
}

/// Runs `{bf, kd} x {none, opt, opt+hom}` sequentially on shared inputs.
pub fn run_benchmark(input: &BenchInput<'_>, base: &MatchConfig, max_per_block: usize) -> Result<BenchReport, EvalError> {
    let mut cells = Vec::new();
    for family in [MatcherFamily::Bf, MatcherFamily::Kd] {
        for variant in Variant::ALL {
            let cfg = MatchConfig {
                matcher: family.kind(variant),
                homogenize: (variant == Variant::OptHom).then_some(max_per_block),
                ..base.clone()
            };
            let (matches, match_s) = run_matching(&cfg, input)?;
            let t1 = Instant::now();
            let _refined = refine_trajectory(
                input.features,
                input.pairs,
                &matches,
                input.priors,
                input.k,
                input.terrain,
                &RefineParams::default(),
            );
            let refine_s = t1.elapsed().as_secs_f64();
            let count = matches.iter().map(Vec::len).sum();
            let points3d = count_tracks(input.features, input.pairs, &matches);
            cells.push(BenchCell {
                row: BenchRow {
                    scene: input.scene.clone(),
                    matcher: family,
                    variant,
                    extract_s: input.extract_s,
                    match_s,
                    refine_s,
                    total_s: input.extract_s + match_s + refine_s,
                    matches: count,
                    points3d,
                },
                matches,
            });
        }
    }
    Ok(BenchReport { cells })
}

/// Feature tracks (connected components of matched keypoints across all
/// frames) with at least two observations.
pub fn count_tracks(features: &[FeatureSet], pairs: &[(usize, usize)], matches: &[Vec<MatchPair>]) -> usize {
    let mut offset = Vec::with_capacity(features.len() + 1);
    offset.push(0usize);
    for f in features {
        offset.push(offset.last().unwrap() + f.len());
    }
    let mut parent: Vec<usize> = (0..*offset.last().unwrap()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut size = vec![1usize; parent.len()];
    for (&(a, b), ms) in pairs.iter().zip(matches) {
        for m in ms {
            let (x, y) = (find(&mut parent, offset[a] + m.index_a), find(&mut parent, offset[b] + m.index_b));
            if x != y {
                let (big, small) = if size[x] >= size[y] { (x, y) } else { (y, x) };
                parent[small] = big;
                size[big] += size[small];
            }
        }
    }
    (0..parent.len())
        .filter(|&i| find(&mut parent, i) == i && size[i] >= 2)
        .count()
}

// ---------------------------------------------------------------------------
// markers

/// Centroid of strongly red cells within `radius` metres of `approx`, in
/// world coordinates through the raster georeference.
pub fn locate_marker(raster: &OrthoRaster, approx: &Vector2<f64>, radius: f64) -> Option<Vector2<f64>> {
    let (mut sum, mut n) = (Vector2::zeros(), 0usize);
    let reach = (radius / raster.gsd).ceil() as i64;
    let center = raster.world_to_pixel(approx.x, approx.y);
    let (c0, r0) = (center.x.round() as i64, center.y.round() as i64);
    for r in (r0 - reach).max(0)..=(r0 + reach).min(raster.rows as i64 - 1) {
        for c in (c0 - reach).max(0)..=(c0 + reach).min(raster.cols as i64 - 1) {
            let cell = raster.cell(r as usize, c as usize);
            if cell.source.is_none() {
                continue;
            }
            let [red, g, b] = cell.rgb;
            if red - g.max(b) > 100.0 {
                let p = raster.cell_center(r as usize, c as usize);
                if (p - approx).norm() <= radius {
                    sum += p;
                    n += 1;
                }
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}
