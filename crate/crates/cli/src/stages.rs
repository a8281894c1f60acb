//! Pipeline stages. Each reads its inputs from the scene and output
//! directories, so stages can be run one at a time or chained by
//! [`cmd_run_all`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use orthofuse::eval::{
    bench_csv, compute_ate_with, count_tracks, eval_matches, locate_marker, position_rmse, run_benchmark, AlignMode, AteResult, BenchInput, EvalError, BenchReport, BenchRow, ErrorStats, MatchQuality, MatcherFamily,
    Trajectory, Variant,
};
use orthofuse::fusion::{body_pose, interpolate_gps, run_filter, NavState, StateCovariance};
use orthofuse::io;
use orthofuse::matching::{
    detect_and_describe, match_pair, refine_trajectory, sequential_pairs, FeatureSet, MatchPair, MatcherKind,
    PairPrior,
};
use orthofuse::ortho::{render, seam_energy, write_orthoimage, FrameRecord, OrthoCell, OrthoFiles, OrthoRaster};
use orthofuse::synth::{gen_feature_truth, gen_scene, FeatureParams};
use orthofuse::terrain::{terrain_from_cloud, PointCloud, TerrainGrid};
use orthofuse::{Frame, RigidTransform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{FeatureSource, PipelineConfig, PoseSource};
use crate::layout::{self, FrameMeta};
use crate::CliError;

pub type StampedPoses = Vec<(f64, RigidTransform)>;

fn out(cfg: &PipelineConfig, parts: &[&str]) -> PathBuf {
    parts.iter().fold(cfg.output.clone(), |p, s| p.join(s))
}

fn require(path: &Path, hint: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{} not found; {hint}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Clone, Debug)]
pub struct SimulateReport {
    pub dir: PathBuf,
    pub frames: usize,
    pub manifest: layout::Manifest,
}

pub fn cmd_simulate(cfg: &PipelineConfig) -> Result<SimulateReport, CliError> {
    let spec = cfg.scene_spec()?;
    let dir = cfg.scene_dir();
    if dir.exists() {
        let is_scene = dir.join("manifest.json").exists();
        let empty = fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?.next().is_none();
        if is_scene {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        } else if !empty {
            return Err(CliError::Config(format!(
                "{} exists and is not a scene directory; refusing to overwrite",
                dir.display()
            )));
        }
    }
    layout::create_dir(&dir)?;
    let scene = gen_scene(&spec)?;
    let features = gen_feature_truth(&scene, &FeatureParams::from_spec(&spec))?;
    layout::write_scene(&dir, &scene, &features)?;
    let manifest = layout::build_manifest(&dir, &spec)?;
    layout::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(SimulateReport {
        dir,
        frames: scene.frames.len(),
        manifest,
    })
}

// ---------------------------------------------------------------------------
// fuse

#[derive(Clone, Debug)]
pub struct FuseReport {
    /// Body poses at every IMU sample.
    pub body: StampedPoses,
    /// Camera poses at frame times.
    pub cameras: StampedPoses,
}

pub fn cmd_fuse(cfg: &PipelineConfig) -> Result<FuseReport, CliError> {
    let dir = cfg.scene_dir();
    let imu_path = dir.join("imu.csv");
    let gps_path = dir.join("gps.csv");
    let gps_only = "GPS-only fusion is not supported: the filter propagates with IMU samples and corrects with GPS fixes";
    if !imu_path.exists() {
        return Err(CliError::Data(format!("IMU stream {} is missing. {gps_only}", imu_path.display())));
    }
    let imu = io::read_imu_csv(&imu_path)?;
    if imu.is_empty() {
        return Err(CliError::Data(format!("IMU stream {} has no samples. {gps_only}", imu_path.display())));
    }
    require(&gps_path, "the filter needs a GPS stream")?;
    let gps = io::read_gps_csv(&gps_path)?;
    let first = gps
        .first()
        .ok_or_else(|| CliError::Data(format!("GPS stream {} has no fixes", gps_path.display())))?;
    let rig = layout::read_rig(&dir)?;
    let f = &cfg.fusion;
    let initial = NavState {
        p: first.position,
        v: Vector3::zeros(),
        q: rig.initial_attitude()?,
        ..NavState::default()
    };
    let pos_std = first.noise.diagonal().max().sqrt();
    let cov0 = StateCovariance::from_std(
        pos_std,
        f.init_velocity_std,
        f.init_attitude_std_deg.to_radians(),
        f.init_accel_bias_std,
        f.init_gyro_bias_std,
    );
    let states = run_filter(&imu, &gps, initial, cov0, &f.process)?;
    let body: StampedPoses = states.iter().map(|s| (s.t, body_pose(&s.state))).collect();
    let mount = rig.camera_mount()?;
    let cameras = layout::read_frames(&dir)?
        .iter()
        .map(|fm| Ok((fm.t, layout::pose_at(&body, fm.t)?.compose(&mount).map_err(orthofuse::Error::from)?)))
        .collect::<Result<StampedPoses, CliError>>()?;
    let fused = out(cfg, &["fused"]);
    layout::create_dir(&fused)?;
    io::write_tum(&fused.join("body.tum"), &body)?;
    io::write_tum(&fused.join("cameras.tum"), &cameras)?;
    Ok(FuseReport { body, cameras })
}

// ---------------------------------------------------------------------------
// terrain

pub fn cmd_terrain(cfg: &PipelineConfig) -> Result<TerrainGrid, CliError> {
    let dir = cfg.scene_dir();
    let radar_path = dir.join("radar.csv");
    require(&radar_path, "the terrain stage needs a radar stream")?;
    let scans = io::read_radar_csv(&radar_path)?;
    let body_path = out(cfg, &["fused", "body.tum"]);
    require(&body_path, "run `fuse` first")?;
    let body = io::read_tum(&body_path, Frame::Body)?;
    let mount = layout::read_rig(&dir)?.radar_mount()?;
    let mut points = Vec::new();
    for scan in &scans {
        let pose = layout::pose_at(&body, scan.t)?.compose(&mount).map_err(orthofuse::Error::from)?;
        points.extend(scan.points.iter().map(|p| pose.transform_point(p)));
    }
    let cloud = PointCloud::new(Frame::World, points);
    let grid = terrain_from_cloud(&cloud, &cfg.terrain)?;
    let tdir = out(cfg, &["terrain"]);
    layout::create_dir(&tdir)?;
    io::write_cloud_bin(&tdir.join("cloud.rpc"), &cloud)?;
    io::write_esri_grid(&tdir.join("dtm.asc"), &grid)?;
    Ok(grid)
}

// ---------------------------------------------------------------------------
// match (and refine)

#[derive(Clone, Debug)]
pub struct MatchReport {
    pub pairs: Vec<(usize, usize)>,
    pub matches: Vec<Vec<MatchPair>>,
    pub row: BenchRow,
    pub quality: Option<MatchQuality>,
    /// Camera poses after refinement (priors where refinement was not possible).
    pub refined: StampedPoses,
    pub refined_frames: usize,
}

/// Bench family and variant a matcher configuration corresponds to.
pub fn family_variant(kind: MatcherKind, homogenize: bool) -> (MatcherFamily, Variant) {
    let family = match kind {
        MatcherKind::Bf | MatcherKind::BfOpt => MatcherFamily::Bf,
        MatcherKind::Kd | MatcherKind::KdOpt => MatcherFamily::Kd,
    };
    let variant = match (kind.uses_prior(), homogenize) {
        (false, _) => Variant::None,
        (true, false) => Variant::Opt,
        (true, true) => Variant::OptHom,
    };
    (family, variant)
}

/// Loads or extracts features; returns them with the extraction time.
pub fn load_features(cfg: &PipelineConfig, frames: &[FrameMeta]) -> Result<(Vec<FeatureSet>, f64), CliError> {
    let dir = cfg.scene_dir();
    let t0 = Instant::now();
    let sets = match cfg.features.source {
        FeatureSource::Synthetic => layout::read_scene_features(&dir, frames)?,
        FeatureSource::Detect => frames
            .par_iter()
            .map(|f| {
                let img = layout::read_frame_image(&dir, &f.id)?;
                Ok(detect_and_describe(&img.to_gray(), &f.id, cfg.features.max_features)?)
            })
            .collect::<Result<Vec<_>, CliError>>()?,
    };
    Ok((sets, t0.elapsed().as_secs_f64()))
}

fn read_priors(cfg: &PipelineConfig, n: usize) -> Result<Vec<RigidTransform>, CliError> {
    let path = out(cfg, &["fused", "cameras.tum"]);
    require(&path, "run `fuse` first")?;
    let poses: Vec<RigidTransform> = io::read_tum(&path, Frame::Camera)?.into_iter().map(|(_, p)| p).collect();
    if poses.len() != n {
        return Err(CliError::Data(format!("{} has {} poses for {n} frames", path.display(), poses.len())));
    }
    Ok(poses)
}

fn read_dtm(cfg: &PipelineConfig) -> Result<TerrainGrid, CliError> {
    let path = out(cfg, &["terrain", "dtm.asc"]);
    require(&path, "run `terrain` first")?;
    Ok(io::read_esri_grid(&path)?)
}

fn pair_file(frames: &[FrameMeta], a: usize, b: usize) -> String {
    format!("{}__{}.csv", frames[a].id, frames[b].id)
}

/// Pools precision and recall over all pairs that have labels.
pub fn pooled_quality(
    pairs: &[(usize, usize)],
    matches: &[Vec<MatchPair>],
    ids: &[Vec<Option<usize>>],
) -> Result<Option<MatchQuality>, CliError> {
    let (mut correct, mut total, mut labels) = (0usize, 0usize, 0usize);
    for (&(a, b), ms) in pairs.iter().zip(matches) {
        let l = layout::pair_labels(&ids[a], &ids[b]);
        if l.is_empty() {
            total += ms.len();
            continue;
        }
        let q = eval_matches(ms, &l)?;
        correct += q.correct;
        total += q.matches;
        labels += q.labels;
    }
    if labels == 0 {
        return Ok(None);
    }
    Ok(Some(MatchQuality {
        precision: if total == 0 { 1.0 } else { correct as f64 / total as f64 },
        recall: correct as f64 / labels as f64,
        correct,
        matches: total,
        labels,
    }))
}

pub fn cmd_match(cfg: &PipelineConfig) -> Result<MatchReport, CliError> {
    let dir = cfg.scene_dir();
    let frames = layout::read_frames(&dir)?;
    let rig = layout::read_rig(&dir)?;
    let k = rig.intrinsics;
    let priors = read_priors(cfg, frames.len())?;
    let dtm = read_dtm(cfg)?;
    let (features, extract_s) = load_features(cfg, &frames)?;
    let mdir = out(cfg, &["match"]);
    if mdir.exists() {
        fs::remove_dir_all(&mdir).map_err(|e| CliError::io(&mdir, e))?;
    }
    layout::create_dir(&mdir.join("pairs"))?;
    if cfg.features.source == FeatureSource::Detect {
        layout::create_dir(&mdir.join("features"))?;
        for (f, set) in frames.iter().zip(&features) {
            io::write_features(&mdir.join("features").join(format!("{}.feat", f.id)), set)?;
        }
    }

    let mc = &cfg.matching;
    let pairs = sequential_pairs(frames.len(), mc.overlap);
    let t0 = Instant::now();
    let matches = pairs
        .iter()
        .map(|&(a, b)| {
            let prior = PairPrior {
                k: &k,
                pose_a: &priors[a],
                pose_b: &priors[b],
                terrain: &dtm,
            };
            match_pair(mc, &features[a], &features[b], Some(&prior))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let match_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let refinements = if cfg.refine.enabled {
        refine_trajectory(&features, &pairs, &matches, &priors, &k, &dtm, &cfg.refine.params)
    } else {
        vec![None; frames.len()]
    };
    let refine_s = t1.elapsed().as_secs_f64();
    let refined: StampedPoses = frames
        .iter()
        .zip(&priors)
        .zip(&refinements)
        .map(|((f, prior), r)| (f.t, r.as_ref().map_or(*prior, |r| r.pose)))
        .collect();
    let refined_frames = refinements.iter().filter(|r| r.is_some()).count();

    for (&(a, b), ms) in pairs.iter().zip(&matches) {
        io::write_matches_csv(&mdir.join("pairs").join(pair_file(&frames, a, b)), ms)?;
    }
    io::write_tum(&mdir.join("refined.tum"), &refined)?;

    let (family, variant) = family_variant(mc.matcher, mc.homogenize.is_some());
    let spec = layout::read_spec(&dir)?;
    let row = BenchRow {
        scene: spec.name,
        matcher: family,
        variant,
        extract_s,
        match_s,
        refine_s,
        total_s: extract_s + match_s + refine_s,
        matches: matches.iter().map(Vec::len).sum(),
        points3d: count_tracks(&features, &pairs, &matches),
    };
    fs::write(mdir.join("bench.csv"), bench_csv(std::slice::from_ref(&row)))
        .map_err(|e| CliError::io(&mdir.join("bench.csv"), e))?;

    let quality = match (cfg.features.source, layout::read_feature_labels(&dir, frames.len())?) {
        (FeatureSource::Synthetic, Some(ids)) => pooled_quality(&pairs, &matches, &ids)?,
        _ => None,
    };
    if let Some(q) = &quality {
        layout::write_json(&mdir.join("quality.json"), q)?;
    }
    Ok(MatchReport {
        pairs,
        matches,
        row,
        quality,
        refined,
        refined_frames,
    })
}

// ---------------------------------------------------------------------------
// ortho

#[derive(Clone, Debug)]
pub struct OrthoReport {
    pub raster: OrthoRaster,
    pub files: OrthoFiles,
    pub poses: PoseSource,
}

pub fn cmd_ortho(cfg: &PipelineConfig) -> Result<OrthoReport, CliError> {
    let dir = cfg.scene_dir();
    let frames = layout::read_frames(&dir)?;
    if frames.is_empty() {
        return Err(CliError::Data(format!("{} lists no frames", dir.join("frames.csv").display())));
    }
    let k = layout::read_rig(&dir)?.intrinsics;
    let refined_path = out(cfg, &["match", "refined.tum"]);
    let (poses, used) = if cfg.ortho.poses == PoseSource::Refined && refined_path.exists() {
        let p: Vec<RigidTransform> = io::read_tum(&refined_path, Frame::Camera)?.into_iter().map(|(_, p)| p).collect();
        (p, PoseSource::Refined)
    } else {
        (read_priors(cfg, frames.len())?, PoseSource::Fused)
    };
    if poses.len() != frames.len() {
        return Err(CliError::Data(format!("{} poses for {} frames", poses.len(), frames.len())));
    }
    let dtm = read_dtm(cfg)?;
    let records = frames
        .par_iter()
        .zip(poses.par_iter())
        .map(|(f, pose)| {
            Ok(FrameRecord {
                id: f.id.clone(),
                image: layout::read_frame_image(&dir, &f.id)?,
                pose: *pose,
                intrinsics: k,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let raster = render(&records, &dtm, &cfg.ortho.params())?;
    let files = write_orthoimage(&raster, &out(cfg, &["ortho", "orthoimage.png"]), cfg.ortho.transparent)?;
    Ok(OrthoReport {
        raster,
        files,
        poses: used,
    })
}

/// Rebuilds a color raster from a written orthoimage. Black (or fully
/// transparent) pixels count as uncovered.
pub fn load_orthoimage(png: &Path) -> Result<OrthoRaster, CliError> {
    let wf = orthofuse::ortho::read_world_file(&png.with_extension("pgw"))?;
    let img = image::open(png).map_err(|e| CliError::Data(format!("{}: {e}", png.display())))?.to_rgba8();
    let gsd = wf[0];
    let origin = Vector2::new(wf[4] - 0.5 * gsd, wf[5] + 0.5 * gsd);
    let mut raster = OrthoRaster::new(origin, gsd, img.width() as usize, img.height() as usize)?;
    for (x, y, p) in img.enumerate_pixels() {
        let covered = p[3] > 0 && (p[0], p[1], p[2]) != (0, 0, 0);
        let i = raster.index(y as usize, x as usize);
        raster.cells[i] = OrthoCell {
            rgb: [p[0] as f32, p[1] as f32, p[2] as f32],
            score: if covered { 1.0 } else { f64::NEG_INFINITY },
            source: covered.then_some(0),
        };
    }
    Ok(raster)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSummary {
    pub gps_sigma: f64,
    pub alignment: AlignMode,
    /// Aligned body trajectory at 10 Hz.
    pub ate_translation: ErrorStats,
    pub ate_rotation_deg: ErrorStats,
    /// Unaligned position error of the fused and the GPS-only trajectory,
    /// over the time span covered by GPS fixes.
    pub ekf_position_rmse: f64,
    pub gps_only_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSummary {
    pub frames: usize,
    pub refined_frames: usize,
    pub alignment: AlignMode,
    pub prior_ate_translation: ErrorStats,
    pub refined_ate_translation: ErrorStats,
    pub refined_ate_rotation_deg: ErrorStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub matcher: String,
    pub homogenize: Option<usize>,
    pub pairs: usize,
    pub matches: usize,
    pub points3d: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerCheck {
    pub id: usize,
    pub truth: [f64; 2],
    pub located: [f64; 2],
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthoSummary {
    pub gsd: f64,
    pub width: usize,
    pub height: usize,
    pub covered_fraction: f64,
    pub seam_energy: Option<f64>,
    pub markers: Vec<MarkerCheck>,
    pub marker_max_error: Option<f64>,
    /// Every checked marker lies within one gsd of its true position.
    pub markers_pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scene: String,
    pub seed: u64,
    pub frames: usize,
    pub fusion: FusionSummary,
    pub poses: PoseSummary,
    pub matching: MatchSummary,
    pub ortho: OrthoSummary,
    pub timings: Vec<StageTiming>,
    pub total_seconds: f64,
}

impl Summary {
    /// The summary with timing fields zeroed, for determinism checks.
    pub fn without_timings(&self) -> Self {
        let mut s = self.clone();
        for t in &mut s.timings {
            t.seconds = 0.0;
        }
        s.total_seconds = 0.0;
        s
    }
}

fn trajectory(poses: &StampedPoses) -> Result<Trajectory, CliError> {
    Ok(Trajectory::new(
        poses.iter().map(|(t, _)| *t).collect(),
        poses.iter().map(|(_, p)| *p).collect(),
    )?)
}

/// Rigid alignment, or a translation-only shift when the trajectory is too
/// close to a straight line for the rotation to be determined.
pub fn ate(est: &StampedPoses, gt: &StampedPoses) -> Result<(AteResult, AlignMode), CliError> {
    let (e, g) = (trajectory(est)?, trajectory(gt)?);
    match compute_ate_with(&e, &g, 1e-4, AlignMode::Rigid) {
        Err(EvalError::Degenerate) => Ok((compute_ate_with(&e, &g, 1e-4, AlignMode::Translation)?, AlignMode::Translation)),
        r => Ok((r?, AlignMode::Rigid)),
    }
}

/// Markers fully inside the covered area, located by color.
pub fn check_markers(raster: &OrthoRaster, markers: &[orthofuse::synth::Marker]) -> Vec<MarkerCheck> {
    markers
        .iter()
        .filter_map(|m| {
            let c = Vector2::new(m.center[0], m.center[1]);
            let reach = m.size;
            let inside = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0), (0.0, 0.0)].iter().all(|(dx, dy)| {
                raster
                    .cell_of(c.x + dx * reach, c.y + dy * reach)
                    .is_some_and(|(r, col)| raster.cell(r, col).source.is_some())
            });
            if !inside {
                return None;
            }
            let loc = locate_marker(raster, &c, reach)?;
            Some(MarkerCheck {
                id: m.id,
                truth: m.center,
                located: [loc.x, loc.y],
                error: (loc - c).norm(),
            })
        })
        .collect()
}

/// Evaluates stage outputs against the scene's ground truth.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<Summary, CliError> {
    let dir = cfg.scene_dir();
    let spec = layout::read_spec(&dir)?;
    let frames = layout::read_frames(&dir)?;
    let truth_body = io::read_tum(&dir.join("truth").join("body.tum"), Frame::Body)?;
    let truth_cams = io::read_tum(&dir.join("truth").join("cameras.tum"), Frame::Camera)?;
    let fused_path = out(cfg, &["fused", "body.tum"]);
    require(&fused_path, "run `fuse` first")?;
    let fused = io::read_tum(&fused_path, Frame::Body)?;

    // fusion at 10 Hz
    let every = 10;
    let est10: StampedPoses = fused.iter().step_by(every).cloned().collect();
    let (fusion_ate, fusion_align) = ate(&est10, &truth_body)?;
    let gps = io::read_gps_csv(&dir.join("gps.csv"))?;
    // compare where GPS-only positions are interpolated, not extrapolated
    let (g0, g1) = match (gps.first(), gps.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => return Err(CliError::Data("GPS stream has no fixes".into())),
    };
    let span: Vec<&(f64, RigidTransform)> = truth_body.iter().filter(|(t, _)| *t >= g0 && *t <= g1).collect();
    let times: Vec<f64> = span.iter().map(|(t, _)| *t).collect();
    let truth_p: Vec<Vector3<f64>> = span.iter().map(|(_, p)| *p.translation()).collect();
    let fused_p: Vec<Vector3<f64>> = times
        .iter()
        .map(|&t| layout::pose_at(&fused, t).map(|p| *p.translation()))
        .collect::<Result<_, _>>()?;
    let fusion = FusionSummary {
        gps_sigma: spec.noise.gps_sigma,
        alignment: fusion_align,
        ate_translation: fusion_ate.translation,
        ate_rotation_deg: fusion_ate.rotation,
        ekf_position_rmse: position_rmse(&fused_p, &truth_p),
        gps_only_rmse: position_rmse(&interpolate_gps(&gps, &times), &truth_p),
    };

    // camera poses
    let priors: StampedPoses = io::read_tum(&out(cfg, &["fused", "cameras.tum"]), Frame::Camera)?;
    let refined_path = out(cfg, &["match", "refined.tum"]);
    let refined = if refined_path.exists() { io::read_tum(&refined_path, Frame::Camera)? } else { priors.clone() };
    let refined_frames = refined.iter().zip(&priors).filter(|(a, b)| a.1 != b.1).count();
    let (prior_ate, _) = ate(&priors, &truth_cams)?;
    let (ref_ate, pose_align) = ate(&refined, &truth_cams)?;
    let poses = PoseSummary {
        frames: frames.len(),
        refined_frames,
        alignment: pose_align,
        prior_ate_translation: prior_ate.translation,
        refined_ate_translation: ref_ate.translation,
        refined_ate_rotation_deg: ref_ate.rotation,
    };

    // matching
    let pairs = sequential_pairs(frames.len(), cfg.matching.overlap);
    let mut matches = Vec::with_capacity(pairs.len());
    for &(a, b) in &pairs {
        let p = out(cfg, &["match", "pairs", &pair_file(&frames, a, b)]);
        matches.push(if p.exists() { io::read_matches_csv(&p)? } else { Vec::new() });
    }
    let quality = match (cfg.features.source, layout::read_feature_labels(&dir, frames.len())?) {
        (FeatureSource::Synthetic, Some(ids)) => pooled_quality(&pairs, &matches, &ids)?,
        _ => None,
    };
    let (features, _) = load_features(cfg, &frames)?;
    let matching = MatchSummary {
        matcher: cfg.matching.matcher.name().to_string(),
        homogenize: cfg.matching.homogenize,
        pairs: pairs.len(),
        matches: matches.iter().map(Vec::len).sum(),
        points3d: count_tracks(&features, &pairs, &matches),
        precision: quality.map(|q| q.precision),
        recall: quality.map(|q| q.recall),
    };

    // orthoimage
    let png = out(cfg, &["ortho", "orthoimage.png"]);
    require(&png, "run `ortho` first")?;
    let raster = load_orthoimage(&png)?;
    let markers = check_markers(&raster, &layout::read_markers(&dir)?);
    let marker_max_error = markers.iter().map(|m| m.error).fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));
    let ortho = OrthoSummary {
        gsd: raster.gsd,
        width: raster.cols,
        height: raster.rows,
        covered_fraction: raster.covered_count() as f64 / raster.cells.len().max(1) as f64,
        seam_energy: seam_energy(&raster),
        markers_pass: !markers.is_empty() && markers.iter().all(|m| m.error <= raster.gsd),
        marker_max_error,
        markers,
    };
    Ok(Summary {
        scene: spec.name,
        seed: spec.seed,
        frames: frames.len(),
        fusion,
        poses,
        matching,
        ortho,
        timings: Vec::new(),
        total_seconds: 0.0,
    })
}

// ---------------------------------------------------------------------------
// run-all and bench

fn stage<T>(name: &'static str, timings: &mut Vec<StageTiming>, f: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
    let t0 = Instant::now();
    let v = f().map_err(|e| CliError::Stage {
        stage: name,
        source: Box::new(e),
    })?;
    timings.push(StageTiming {
        stage: name.into(),
        seconds: t0.elapsed().as_secs_f64(),
    });
    Ok(v)
}

/// simulate -> fuse -> terrain -> match (+ refine) -> ortho -> eval; writes
/// `summary.json`.
pub fn cmd_run_all(cfg: &PipelineConfig) -> Result<Summary, CliError> {
    let t0 = Instant::now();
    let mut timings = Vec::new();
    stage("simulate", &mut timings, || cmd_simulate(cfg))?;
    stage("fuse", &mut timings, || cmd_fuse(cfg))?;
    stage("terrain", &mut timings, || cmd_terrain(cfg))?;
    stage("match", &mut timings, || cmd_match(cfg))?;
    stage("ortho", &mut timings, || cmd_ortho(cfg))?;
    let mut summary = stage("eval", &mut timings, || cmd_eval(cfg))?;
    summary.timings = timings;
    summary.total_seconds = t0.elapsed().as_secs_f64();
    layout::write_json(&out(cfg, &["summary.json"]), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speedups {
    pub bf: Option<f64>,
    pub kd: Option<f64>,
}

/// Full matcher matrix on the scene features with fused priors and the DTM.
pub fn cmd_bench(cfg: &PipelineConfig) -> Result<BenchReport, CliError> {
    let dir = cfg.scene_dir();
    let frames = layout::read_frames(&dir)?;
    let k = layout::read_rig(&dir)?.intrinsics;
    let priors = read_priors(cfg, frames.len())?;
    let dtm = read_dtm(cfg)?;
    let (features, extract_s) = load_features(cfg, &frames)?;
    let pairs = sequential_pairs(frames.len(), cfg.matching.overlap);
    let input = BenchInput {
        scene: layout::read_spec(&dir)?.name,
        features: &features,
        priors: &priors,
        k: &k,
        terrain: &dtm,
        pairs: &pairs,
        extract_s,
    };
    let report = run_benchmark(&input, &cfg.matching, cfg.bench.max_per_block)?;
    let bdir = out(cfg, &["bench"]);
    layout::create_dir(&bdir)?;
    fs::write(bdir.join("bench.csv"), bench_csv(&report.rows())).map_err(|e| CliError::io(&bdir.join("bench.csv"), e))?;
    layout::write_json(
        &bdir.join("speedups.json"),
        &Speedups {
            bf: report.speedup(MatcherFamily::Bf),
            kd: report.speedup(MatcherFamily::Kd),
        },
    )?;
    Ok(report)
}
