//! On-disk layout of scene and output directories.
//!
//! ```text
//! scene/
//!   scene.json  rig.json  frames.csv  imu.csv  gps.csv  radar.csv
//!   frames/frame_0000.png ...
//!   features/frame_0000.feat ...
//!   truth/body.tum  truth/cameras.tum  truth/markers.json  truth/features.csv
//!   manifest.json
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{UnitQuaternion, Vector3};
use orthofuse::io;
use orthofuse::matching::FeatureSet;
use orthofuse::raster::RgbF32;
use orthofuse::synth::{FeatureTruth, Marker, Scene, SceneSpec};
use orthofuse::{CameraIntrinsics, Frame, RigidTransform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseJson {
    /// `[x, y, z, w]`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl PoseJson {
    pub fn from_pose(t: &RigidTransform) -> Self {
        let q = t.rotation().quaternion();
        let p = t.translation();
        Self {
            rotation: [q.i, q.j, q.k, q.w],
            translation: [p.x, p.y, p.z],
        }
    }

    pub fn to_pose(&self, from: Frame, to: Frame) -> Result<RigidTransform, CliError> {
        let [x, y, z, w] = self.rotation;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if !(q.norm() > 1e-9) {
            return Err(CliError::Data("rig rotation quaternion has zero norm".into()));
        }
        Ok(RigidTransform::new(
            UnitQuaternion::from_quaternion(q),
            Vector3::from(self.translation),
            from,
            to,
        ))
    }
}

/// Sensor rig and initial alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rig {
    pub intrinsics: CameraIntrinsics,
    pub camera_to_body: PoseJson,
    pub radar_to_body: PoseJson,
    /// Body attitude at the first IMU sample, `[x, y, z, w]`.
    pub initial_attitude: [f64; 4],
}

impl Rig {
    pub fn camera_mount(&self) -> Result<RigidTransform, CliError> {
        self.camera_to_body.to_pose(Frame::Camera, Frame::Body)
    }

    pub fn radar_mount(&self) -> Result<RigidTransform, CliError> {
        self.radar_to_body.to_pose(Frame::Radar, Frame::Body)
    }

    pub fn initial_attitude(&self) -> Result<UnitQuaternion<f64>, CliError> {
        let [x, y, z, w] = self.initial_attitude;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if !(q.norm() > 1e-9) {
            return Err(CliError::Data("initial attitude has zero norm".into()));
        }
        Ok(UnitQuaternion::from_quaternion(q))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMeta {
    pub id: String,
    pub t: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes a generated scene (and its labeled features) to `dir`.
pub fn write_scene(dir: &Path, scene: &Scene, features: &FeatureTruth) -> Result<(), CliError> {
    for sub in ["frames", "features", "truth"] {
        create_dir(&dir.join(sub))?;
    }
    write_json(&dir.join("scene.json"), &scene.spec)?;
    let q0 = scene.truth.states[0].q;
    let rig = Rig {
        intrinsics: scene.k,
        camera_to_body: PoseJson::from_pose(&scene.camera_mount),
        radar_to_body: PoseJson::from_pose(&scene.radar_mount),
        initial_attitude: [q0.i, q0.j, q0.k, q0.w],
    };
    write_json(&dir.join("rig.json"), &rig)?;

    let mut frames = String::from("id,t\n");
    for f in &scene.frames {
        let _ = writeln!(frames, "{},{}", f.id, f.t);
    }
    fs::write(dir.join("frames.csv"), frames).map_err(|e| CliError::io(&dir.join("frames.csv"), e))?;
    scene.frames.par_iter().try_for_each(|f| {
        let path = dir.join("frames").join(format!("{}.png", f.id));
        f.image
            .to_rgb8()
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    })?;
    io::write_imu_csv(&dir.join("imu.csv"), &scene.imu)?;
    io::write_gps_csv(&dir.join("gps.csv"), &scene.gps)?;
    io::write_radar_csv(&dir.join("radar.csv"), &scene.radar)?;

    for (set, f) in features.sets.iter().zip(&scene.frames) {
        io::write_features(&dir.join("features").join(format!("{}.feat", f.id)), set)?;
    }
    let truth = dir.join("truth");
    let body: Vec<(f64, RigidTransform)> = scene.truth.states.iter().map(|s| (s.t, s.body_pose())).collect();
    io::write_tum(&truth.join("body.tum"), &body)?;
    let cams: Vec<(f64, RigidTransform)> = scene
        .frames
        .iter()
        .zip(&scene.truth.frame_poses)
        .map(|(f, p)| (f.t, *p))
        .collect();
    io::write_tum(&truth.join("cameras.tum"), &cams)?;
    write_json(&truth.join("markers.json"), &scene.truth.markers)?;
    let mut labels = String::from("frame,index,point\n");
    for (fi, ids) in features.point_ids.iter().enumerate() {
        for (i, id) in ids.iter().enumerate() {
            let _ = writeln!(labels, "{fi},{i},{}", id.map_or(-1, |v| v as i64));
        }
    }
    fs::write(truth.join("features.csv"), labels).map_err(|e| CliError::io(&truth.join("features.csv"), e))?;
    Ok(())
}

pub fn read_spec(dir: &Path) -> Result<SceneSpec, CliError> {
    read_json(&dir.join("scene.json"))
}

pub fn read_rig(dir: &Path) -> Result<Rig, CliError> {
    read_json(&dir.join("rig.json"))
}

pub fn read_frames(dir: &Path) -> Result<Vec<FrameMeta>, CliError> {
    let path = dir.join("frames.csv");
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("id,t") {
        return Err(CliError::Data(format!("{}: expected header 'id,t'", path.display())));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, t) = line
            .split_once(',')
            .ok_or_else(|| CliError::Data(format!("{}:{}: expected 'id,t'", path.display(), i + 2)))?;
        let t: f64 = t
            .trim()
            .parse()
            .map_err(|_| CliError::Data(format!("{}:{}: bad timestamp '{t}'", path.display(), i + 2)))?;
        out.push(FrameMeta { id: id.trim().to_string(), t });
    }
    Ok(out)
}

pub fn read_frame_image(dir: &Path, id: &str) -> Result<RgbF32, CliError> {
    let path = dir.join("frames").join(format!("{id}.png"));
    let img = image::open(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(RgbF32::from_rgb8(&img.to_rgb8()))
}

pub fn read_scene_features(dir: &Path, frames: &[FrameMeta]) -> Result<Vec<FeatureSet>, CliError> {
    frames
        .iter()
        .map(|f| Ok(io::read_features(&dir.join("features").join(format!("{}.feat", f.id)))?))
        .collect()
}

pub fn read_markers(dir: &Path) -> Result<Vec<Marker>, CliError> {
    read_json(&dir.join("truth").join("markers.json"))
}

/// World point id per keypoint per frame (`None` for distractors).
pub fn read_feature_labels(dir: &Path, n_frames: usize) -> Result<Option<Vec<Vec<Option<usize>>>>, CliError> {
    let path = dir.join("truth").join("features.csv");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let mut out = vec![Vec::new(); n_frames];
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || CliError::Data(format!("{}:{}: expected 'frame,index,point'", path.display(), i + 1));
        let v: Vec<i64> = line.split(',').map(|f| f.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
        let [frame, index, point] = v[..] else { return Err(bad()) };
        let slot = out.get_mut(frame as usize).ok_or_else(bad)?;
        if index as usize != slot.len() {
            return Err(bad());
        }
        slot.push((point >= 0).then_some(point as usize));
    }
    Ok(Some(out))
}

/// Labels between two frames from per-keypoint point ids.
pub fn pair_labels(ids_a: &[Option<usize>], ids_b: &[Option<usize>]) -> Vec<(usize, usize)> {
    let map: std::collections::HashMap<usize, usize> =
        ids_b.iter().enumerate().filter_map(|(j, id)| id.map(|id| (id, j))).collect();
    let mut out: Vec<(usize, usize)> = ids_a
        .iter()
        .enumerate()
        .filter_map(|(i, id)| id.and_then(|id| map.get(&id).map(|&j| (i, j))))
        .collect();
    out.sort_unstable();
    out
}

/// Pose in `poses` (sorted by time) at `t`: exact sample, or linear /
/// spherical interpolation between neighbors. Errors outside the span.
pub fn pose_at(poses: &[(f64, RigidTransform)], t: f64) -> Result<RigidTransform, CliError> {
    let i = poses.partition_point(|(s, _)| *s < t);
    if i < poses.len() && (poses[i].0 - t).abs() < 1e-9 {
        return Ok(poses[i].1);
    }
    if i > 0 && (poses[i - 1].0 - t).abs() < 1e-9 {
        return Ok(poses[i - 1].1);
    }
    if i == 0 || i == poses.len() {
        return Err(CliError::Data(format!("time {t} lies outside the trajectory")));
    }
    let ((t0, a), (t1, b)) = (&poses[i - 1], &poses[i]);
    let w = (t - t0) / (t1 - t0);
    let p = a.translation().lerp(b.translation(), w);
    let q = a.rotation().slerp(b.rotation(), w);
    Ok(RigidTransform::new(q, p, a.from_frame(), a.to_frame()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scene: String,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_dir() {
            walk(&path, root, out)?;
        } else if path != root.join("manifest.json") {
            out.push(path);
        }
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hashes every file under `dir` (except the manifest itself), sorted by path.
pub fn build_manifest(dir: &Path, spec: &SceneSpec) -> Result<Manifest, CliError> {
    let mut paths = Vec::new();
    walk(dir, dir, &mut paths)?;
    let mut files = paths
        .par_iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| CliError::io(p, e))?;
            let rel = p.strip_prefix(dir).expect("walked under dir");
            Ok(ManifestEntry {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest {
        scene: spec.name.clone(),
        seed: spec.seed,
        files,
    })
}
