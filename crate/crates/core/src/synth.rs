//! Deterministic synthetic scenes with ground truth.
//!
//! A scene is a procedural heightfield with a procedural texture, a
//! lawnmower flight at constant altitude, and the sensor streams observed
//! along it. Every output is a pure function of [`SceneSpec`]; independent
//! random streams (terrain, IMU, GPS, radar, ...) are derived from the seed
//! so regenerating one part never shifts another.
//!
//! The true trajectory is produced by the same discrete propagation the
//! filter uses, so integrating the noiseless IMU stream reproduces it.

use std::f64::consts::PI;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{gravity, GpsFix, ImuSample, NavState};
use crate::geometry::{nadir_camera_rotation, project_world, rot_z, CameraIntrinsics, Frame, RigidTransform};
use crate::matching::{FeatureSet, Keypoint, Metric};
use crate::raster::RgbF32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("trajectory dips below the terrain at t = {t:.2} s (altitude {altitude:.2} m)")]
    BelowTerrain { t: f64, altitude: f64 },
    #[error("unknown preset '{0}' (expected road-like, hill-like, noisy, tiny)")]
    UnknownPreset(String),
}

// ---------------------------------------------------------------------------
// spec

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TerrainSpec {
    Flat { height: f64 },
    /// `z = a x + b y + c`.
    Ramp { a: f64, b: f64, c: f64 },
    /// Sum of randomly oriented sinusoids, peak deviation `amplitude` around `base`.
    Hills { base: f64, amplitude: f64, wavelength: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TextureSpec {
    Checker { period: f64 },
    /// Multi-octave value noise; `period` is the coarsest lattice spacing.
    Noise { octaves: u32, period: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub rows: usize,
    pub row_length: f64,
    pub row_spacing: f64,
    pub speed: f64,
    /// Above the terrain datum (`base`, `c` or flat height).
    pub altitude: f64,
    pub frame_interval: f64,
    /// Yaw of the first row, degrees from +x.
    pub heading_deg: f64,
    /// Seconds spent accelerating from rest before the first row.
    pub ramp_time: f64,
    /// Roll/pitch oscillation amplitude, degrees.
    pub sway_deg: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            rows: 1,
            row_length: 160.0,
            row_spacing: 30.0,
            speed: 10.0,
            altitude: 40.0,
            frame_interval: 0.8,
            heading_deg: 0.0,
            ramp_time: 4.0,
            sway_deg: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            width: 480,
            height: 270,
            focal: 400.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub gps_sigma: f64,
    /// Standard deviation reported with each fix; at least `gps_sigma`.
    pub gps_reported_floor: f64,
    /// m/s^2/sqrt(Hz).
    pub accel_density: f64,
    /// rad/s/sqrt(Hz).
    pub gyro_density: f64,
    pub accel_bias_sigma: f64,
    pub gyro_bias_sigma: f64,
    pub radar_sigma: f64,
    pub radar_dropout: f64,
    pub radar_outlier_fraction: f64,
    pub descriptor_sigma: f64,
    pub keypoint_sigma: f64,
    pub distractor_fraction: f64,
    pub exposure_jitter: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            gps_sigma: 0.02,
            gps_reported_floor: 0.01,
            accel_density: 2e-3,
            gyro_density: 5e-5,
            accel_bias_sigma: 2e-3,
            gyro_bias_sigma: 1e-5,
            radar_sigma: 0.05,
            radar_dropout: 0.05,
            radar_outlier_fraction: 0.003,
            descriptor_sigma: 0.05,
            keypoint_sigma: 0.0,
            distractor_fraction: 0.1,
            exposure_jitter: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSpec {
    pub imu_rate: f64,
    pub gps_rate: f64,
    pub radar_rate: f64,
    pub radar_rays: usize,
    pub radar_half_angle_deg: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            imu_rate: 100.0,
            gps_rate: 1.0,
            radar_rate: 10.0,
            radar_rays: 200,
            radar_half_angle_deg: 35.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkerSpec {
    pub spacing: f64,
    pub size: f64,
    /// Alternating across-track offset from the row centerline.
    pub offset: f64,
}

impl Default for MarkerSpec {
    fn default() -> Self {
        Self {
            spacing: 20.0,
            size: 1.0,
            offset: 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    pub seed: u64,
    pub terrain: TerrainSpec,
    pub texture: TextureSpec,
    pub trajectory: TrajectorySpec,
    pub camera: CameraSpec,
    pub sensors: SensorSpec,
    pub noise: NoiseSpec,
    pub markers: MarkerSpec,
    pub features_per_frame: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        preset("road-like").expect("built-in preset")
    }
}

pub const PRESETS: [&str; 4] = ["road-like", "hill-like", "noisy", "tiny"];

/// Built-in scenes. `road-like` and `hill-like` mirror the two flight
/// types at about a quarter of their frame counts; `noisy` is the road
/// geometry with consumer-grade GPS; `tiny` is a three-frame smoke scene.
pub fn preset(name: &str) -> Result<SceneSpec, SynthError> {
    let road = SceneSpec {
        name: "road-like".into(),
        seed: 7,
        terrain: TerrainSpec::Hills {
            base: 12.0,
            amplitude: 1.5,
            wavelength: 90.0,
        },
        texture: TextureSpec::Noise { octaves: 5, period: 8.0 },
        trajectory: TrajectorySpec::default(),
        camera: CameraSpec::default(),
        sensors: SensorSpec::default(),
        noise: NoiseSpec::default(),
        markers: MarkerSpec::default(),
        features_per_frame: 2000,
    };
    match name {
        "road-like" => Ok(road),
        "hill-like" => Ok(SceneSpec {
            name: "hill-like".into(),
            seed: 11,
            terrain: TerrainSpec::Hills {
                base: 30.0,
                amplitude: 7.0,
                wavelength: 70.0,
            },
            trajectory: TrajectorySpec {
                rows: 5,
                row_length: 80.0,
                row_spacing: 30.0,
                ..TrajectorySpec::default()
            },
            noise: NoiseSpec {
                gps_sigma: 0.05,
                ..NoiseSpec::default()
            },
            ..road
        }),
        "noisy" => Ok(SceneSpec {
            name: "noisy".into(),
            noise: NoiseSpec {
                gps_sigma: 1.0,
                ..NoiseSpec::default()
            },
            ..road
        }),
        "tiny" => Ok(SceneSpec {
            name: "tiny".into(),
            seed: 3,
            trajectory: TrajectorySpec {
                row_length: 16.0,
                ..TrajectorySpec::default()
            },
            features_per_frame: 300,
            ..road
        }),
        other => Err(SynthError::UnknownPreset(other.into())),
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        let t = &self.trajectory;
        let n = &self.noise;
        let s = &self.sensors;
        if t.rows == 0 || !(t.row_length >= 0.0) || !(t.speed > 0.0) || !(t.altitude > 0.0) {
            return bad("trajectory needs rows >= 1, row_length >= 0, positive speed and altitude");
        }
        if !(t.frame_interval > 0.0) || !(t.ramp_time > 0.0) || !(t.row_spacing > 0.0) {
            return bad("frame_interval, ramp_time and row_spacing must be positive");
        }
        let sigmas = [
            n.gps_sigma,
            n.gps_reported_floor,
            n.accel_density,
            n.gyro_density,
            n.accel_bias_sigma,
            n.gyro_bias_sigma,
            n.radar_sigma,
            n.descriptor_sigma,
            n.keypoint_sigma,
            n.exposure_jitter,
        ];
        if sigmas.iter().any(|v| !(*v >= 0.0)) {
            return bad("noise levels must be non-negative");
        }
        for f in [n.radar_dropout, n.radar_outlier_fraction, n.distractor_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return bad("fractions must lie in [0, 1]");
            }
        }
        if n.exposure_jitter >= 1.0 {
            return bad("exposure_jitter must be below 1");
        }
        if !(s.imu_rate > 0.0 && s.gps_rate > 0.0 && s.radar_rate > 0.0) {
            return bad("sensor rates must be positive");
        }
        if !(s.radar_half_angle_deg > 0.0 && s.radar_half_angle_deg < 80.0) {
            return bad("radar half angle must be in (0, 80) degrees");
        }
        if self.camera.width < 16 || self.camera.height < 16 || !(self.camera.focal > 0.0) {
            return bad("camera must be at least 16x16 with positive focal length");
        }
        if self.features_per_frame == 0 {
            return bad("features_per_frame must be at least 1");
        }
        if !(self.markers.size > 0.0 && self.markers.spacing > 0.0) {
            return bad("marker size and spacing must be positive");
        }
        match self.terrain {
            TerrainSpec::Hills { amplitude, wavelength, .. } if !(amplitude >= 0.0 && wavelength > 0.0) => {
                bad("hill amplitude must be >= 0 and wavelength > 0")
            }
            _ => match self.texture {
                TextureSpec::Checker { period } | TextureSpec::Noise { period, .. } if !(period > 0.0) => {
                    bad("texture period must be positive")
                }
                _ => Ok(()),
            },
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::centered(self.camera.focal, self.camera.width, self.camera.height)
            .expect("validated camera spec")
    }
}

/// Independent sub-seed per purpose.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    splitmix(seed ^ splitmix(stream.wrapping_add(0x5EED)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

mod stream {
    pub const TERRAIN: u64 = 1;
    pub const TEXTURE: u64 = 2;
    pub const IMU: u64 = 3;
    pub const GPS: u64 = 4;
    pub const RADAR: u64 = 5;
    pub const FEATURES: u64 = 6;
    pub const EXPOSURE: u64 = 7;
}

// ---------------------------------------------------------------------------
// terrain and texture

#[derive(Clone, Debug, PartialEq)]
pub enum TerrainModel {
    Plane { a: f64, b: f64, c: f64 },
    Hills { base: f64, amplitude: f64, waves: Vec<(Vector2<f64>, f64, f64)> },
}

impl TerrainModel {
    pub fn new(spec: &TerrainSpec, seed: u64) -> Self {
        match *spec {
            TerrainSpec::Flat { height } => TerrainModel::Plane { a: 0.0, b: 0.0, c: height },
            TerrainSpec::Ramp { a, b, c } => TerrainModel::Plane { a, b, c },
            TerrainSpec::Hills { base, amplitude, wavelength } => {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, stream::TERRAIN));
                let scales = [1.0, 0.62, 1.7, 0.41];
                let weights = [0.4, 0.25, 0.25, 0.1];
                let waves = scales
                    .iter()
                    .zip(weights)
                    .map(|(s, w)| {
                        let dir = rng.random_range(0.0..PI);
                        let k = 2.0 * PI / (wavelength * s);
                        (Vector2::new(dir.cos() * k, dir.sin() * k), rng.random_range(0.0..2.0 * PI), w)
                    })
                    .collect();
                TerrainModel::Hills { base, amplitude, waves }
            }
        }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        match self {
            TerrainModel::Plane { a, b, c } => a * x + b * y + c,
            TerrainModel::Hills { base, amplitude, waves } => {
                base + amplitude * waves.iter().map(|(k, ph, w)| w * (k.x * x + k.y * y + ph).sin()).sum::<f64>()
            }
        }
    }

    /// Height datum the flight altitude is measured from.
    pub fn datum(&self) -> f64 {
        match self {
            TerrainModel::Plane { c, .. } => *c,
            TerrainModel::Hills { base, .. } => *base,
        }
    }

    /// First intersection of a downward ray with the surface.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Vector3<f64>> {
        if !(d.z < 0.0) {
            return None;
        }
        match self {
            TerrainModel::Plane { a, b, c } => {
                let den = d.z - a * d.x - b * d.y;
                if den >= 0.0 {
                    return None;
                }
                let t = (a * o.x + b * o.y + c - o.z) / den;
                (t > 0.0).then(|| o + d * t)
            }
            TerrainModel::Hills { base, amplitude, .. } => {
                let f = |t: f64| {
                    let p = o + d * t;
                    p.z - self.height(p.x, p.y)
                };
                let t_top = ((o.z - (base + amplitude)) / -d.z).max(0.0);
                let t_bot = (o.z - (base - amplitude)) / -d.z;
                if !(t_bot > 0.0) || f(t_top) < 0.0 {
                    return None;
                }
                // coarse march for the first sign change, then Illinois regula falsi
                let steps = 16;
                let (mut lo, mut hi) = (t_top, t_bot);
                let mut f_lo = f(lo);
                let mut f_hi = f(hi);
                for i in 1..=steps {
                    let t = t_top + (t_bot - t_top) * i as f64 / steps as f64;
                    let ft = f(t);
                    if ft <= 0.0 {
                        hi = t;
                        f_hi = ft;
                        break;
                    }
                    lo = t;
                    f_lo = ft;
                }
                let mut side = 0i8;
                for _ in 0..60 {
                    if hi - lo < 1e-10 || f_lo == f_hi {
                        break;
                    }
                    let t = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
                    let ft = f(t);
                    if ft == 0.0 {
                        lo = t;
                        hi = t;
                        break;
                    }
                    if ft > 0.0 {
                        lo = t;
                        f_lo = ft;
                        if side == 1 {
                            f_hi *= 0.5;
                        }
                        side = 1;
                    } else {
                        hi = t;
                        f_hi = ft;
                        if side == -1 {
                            f_lo *= 0.5;
                        }
                        side = -1;
                    }
                    if f_lo.abs() < 1e-12 || f_hi.abs() < 1e-12 {
                        break;
                    }
                }
                let t = if f_lo.abs() < f_hi.abs() { lo } else { hi };
                let p = o + d * t;
                Some(Vector3::new(p.x, p.y, self.height(p.x, p.y)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub id: usize,
    pub center: [f64; 2],
    pub size: f64,
}

impl Marker {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let h = 0.5 * self.size;
        (x - self.center[0]).abs() <= h && (y - self.center[1]).abs() <= h
    }
}

pub const MARKER_RGB: [f32; 3] = [230.0, 20.0, 20.0];

#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    spec: TextureSpec,
    seed: u64,
    markers: Vec<Marker>,
}

impl Texture {
    pub fn new(spec: &TextureSpec, seed: u64, markers: Vec<Marker>) -> Self {
        Self {
            spec: spec.clone(),
            seed: sub_seed(seed, stream::TEXTURE),
            markers,
        }
    }

    pub fn color(&self, x: f64, y: f64) -> [f32; 3] {
        for m in &self.markers {
            if m.contains(x, y) {
                return MARKER_RGB;
            }
        }
        self.base_color(x, y)
    }

    /// Texture without markers.
    pub fn base_color(&self, x: f64, y: f64) -> [f32; 3] {
        match self.spec {
            TextureSpec::Checker { period } => {
                let even = ((x / period).floor() + (y / period).floor()) as i64 % 2 == 0;
                if even {
                    [200.0, 190.0, 170.0]
                } else {
                    [60.0, 80.0, 50.0]
                }
            }
            TextureSpec::Noise { octaves, period } => {
                let mut v = 0.0;
                let mut amp = 1.0;
                let mut norm = 0.0;
                let mut p = period;
                for o in 0..octaves.max(1) {
                    v += amp * value_noise(x / p, y / p, self.seed.wrapping_add(o as u64));
                    norm += amp;
                    amp *= 0.6;
                    p *= 0.5;
                }
                let v = v / norm;
                let hue = value_noise(x / (period * 4.0), y / (period * 4.0), self.seed ^ 0xA5A5);
                // fields between green and soil brown; brightness from fine detail
                let green = [70.0, 130.0, 55.0];
                let soil = [150.0, 115.0, 75.0];
                let mut c = [0.0f32; 3];
                for ch in 0..3 {
                    let base = green[ch] * (1.0 - hue) + soil[ch] * hue;
                    c[ch] = (base * (0.45 + 1.1 * v)).clamp(0.0, 255.0) as f32;
                }
                c
            }
        }
    }
}

fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1F1F_1F1F) ^ (iy as u64).rotate_left(32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth lattice noise in [0, 1].
pub fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (tx, ty) = (fade(x - fx), fade(y - fy));
    let a = lattice(ix, iy, seed);
    let b = lattice(ix + 1, iy, seed);
    let c = lattice(ix, iy + 1, seed);
    let d = lattice(ix + 1, iy + 1, seed);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

// ---------------------------------------------------------------------------
// path

#[derive(Clone, Debug, PartialEq)]
enum Segment {
    Line { start: Vector2<f64>, heading: f64, len: f64 },
    Arc { center: Vector2<f64>, radius: f64, start_angle: f64, sweep: f64 },
}

impl Segment {
    fn len(&self) -> f64 {
        match self {
            Segment::Line { len, .. } => *len,
            Segment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Position and heading at arc length `s` into the segment.
    fn at(&self, s: f64) -> (Vector2<f64>, f64) {
        match self {
            Segment::Line { start, heading, .. } => (start + Vector2::new(heading.cos(), heading.sin()) * s, *heading),
            Segment::Arc { center, radius, start_angle, sweep } => {
                let th = start_angle + sweep.signum() * s / radius;
                (
                    center + Vector2::new(th.cos(), th.sin()) * *radius,
                    th + sweep.signum() * PI / 2.0,
                )
            }
        }
    }
}

/// Lawnmower path parameterized by arc length; `s < 0` is the straight
/// run-up before the first row.
#[derive(Clone, Debug, PartialEq)]
pub struct FlightPath {
    segments: Vec<Segment>,
    /// Arc length at which each row starts.
    pub row_starts: Vec<f64>,
    pub row_length: f64,
    pub total: f64,
}

impl FlightPath {
    pub fn new(t: &TrajectorySpec) -> Self {
        let h0 = t.heading_deg.to_radians();
        let along = Vector2::new(h0.cos(), h0.sin());
        let left = Vector2::new(-h0.sin(), h0.cos());
        let r = t.row_spacing / 2.0;
        let mut segments = Vec::new();
        let mut row_starts = Vec::new();
        let mut s = 0.0;
        for row in 0..t.rows {
            let forward = row % 2 == 0;
            let start = if forward { Vector2::zeros() } else { along * t.row_length } + left * (row as f64 * t.row_spacing);
            let heading = if forward { h0 } else { h0 + PI };
            row_starts.push(s);
            segments.push(Segment::Line { start, heading, len: t.row_length });
            s += t.row_length;
            if row + 1 < t.rows {
                let end = start + Vector2::new(heading.cos(), heading.sin()) * t.row_length;
                let center = end + left * r;
                // left turn after forward rows, right turn after return rows
                let sweep = if forward { PI } else { -PI };
                let start_angle = (end.y - center.y).atan2(end.x - center.x);
                segments.push(Segment::Arc { center, radius: r, start_angle, sweep });
                s += PI * r;
            }
        }
        Self {
            segments,
            row_starts,
            row_length: t.row_length,
            total: s,
        }
    }

    pub fn at(&self, s: f64) -> (Vector2<f64>, f64) {
        if s < 0.0 {
            let (p, h) = self.segments[0].at(0.0);
            return (p + Vector2::new(h.cos(), h.sin()) * s, h);
        }
        let mut rem = s;
        for seg in &self.segments {
            if rem <= seg.len() {
                return seg.at(rem);
            }
            rem -= seg.len();
        }
        let last = self.segments.last().expect("non-empty path");
        let (p, h) = last.at(last.len());
        (p + Vector2::new(h.cos(), h.sin()) * rem, h)
    }
}

/// Arc length and speed at time `t` for a smoothstep run-up of `ramp`
/// seconds to `speed`, reaching `s = 0` at `t = ramp`.
fn arc_length_at(t: f64, speed: f64, ramp: f64) -> (f64, f64) {
    let run_up = speed * ramp / 2.0;
    if t >= ramp {
        return (speed * (t - ramp), speed);
    }
    let tau = (t / ramp).max(0.0);
    (
        -run_up + speed * ramp * (tau.powi(3) - tau.powi(4) / 2.0),
        speed * (3.0 * tau * tau - 2.0 * tau.powi(3)),
    )
}

// ---------------------------------------------------------------------------
// scene

#[derive(Clone, Debug, PartialEq)]
pub struct TruthState {
    pub t: f64,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
}

impl TruthState {
    pub fn body_pose(&self) -> RigidTransform {
        RigidTransform::new(self.q, self.p, Frame::Body, Frame::World)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadarScan {
    pub t: f64,
    /// Returns in the radar frame.
    pub points: Vec<Vector3<f64>>,
}

#[derive(Clone, Debug)]
pub struct SceneFrame {
    pub id: String,
    pub t: f64,
    /// Index into the IMU / truth timeline.
    pub tick: usize,
    pub image: RgbF32,
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub states: Vec<TruthState>,
    /// `Camera -> World` per frame.
    pub frame_poses: Vec<RigidTransform>,
    pub markers: Vec<Marker>,
    pub terrain: TerrainModel,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub k: CameraIntrinsics,
    /// `Camera -> Body`.
    pub camera_mount: RigidTransform,
    /// `Radar -> Body`.
    pub radar_mount: RigidTransform,
    pub truth: GroundTruth,
    pub texture: Texture,
    pub frames: Vec<SceneFrame>,
    pub imu: Vec<ImuSample>,
    pub gps: Vec<GpsFix>,
    pub radar: Vec<RadarScan>,
}

impl Scene {
    pub fn dt(&self) -> f64 {
        1.0 / self.spec.sensors.imu_rate
    }

    /// Filter start state: at rest at the first fix with the planned heading.
    pub fn initial_state(&self) -> NavState {
        NavState {
            p: self.gps.first().map(|g| g.position).unwrap_or(self.truth.states[0].p),
            v: Vector3::zeros(),
            q: self.truth.states[0].q,
            ..NavState::default()
        }
    }
}

/// Body-to-camera mounting: looking down, image rows along the flight
/// direction (top of the image forward), image width across track.
pub fn camera_mount() -> RigidTransform {
    RigidTransform::new(
        rot_z(-PI / 2.0) * nadir_camera_rotation(),
        Vector3::zeros(),
        Frame::Camera,
        Frame::Body,
    )
}

pub fn radar_mount() -> RigidTransform {
    RigidTransform::new(nadir_camera_rotation(), Vector3::zeros(), Frame::Radar, Frame::Body)
}

fn attitude(yaw: f64, t: f64, sway: f64) -> UnitQuaternion<f64> {
    let roll = sway * (2.0 * PI * t / 7.0).sin();
    let pitch = sway * (2.0 * PI * t / 5.0).sin();
    UnitQuaternion::from_euler_angles(roll, pitch, yaw)
}

/// Frame capture times, on IMU ticks: evenly spaced along each row.
fn frame_ticks(path: &FlightPath, t: &TrajectorySpec, dt: f64) -> Vec<usize> {
    let spacing = t.speed * t.frame_interval;
    let per_row = (path.row_length / spacing + 1e-9).floor() as usize + 1;
    let mut ticks = Vec::new();
    for &s0 in &path.row_starts {
        for j in 0..per_row {
            let s = s0 + j as f64 * spacing;
            let time = t.ramp_time + s / t.speed;
            ticks.push((time / dt).round() as usize);
        }
    }
    ticks
}

fn markers_along(path: &FlightPath, spec: &MarkerSpec) -> Vec<Marker> {
    let mut out = Vec::new();
    let mut id = 0;
    for &s0 in &path.row_starts {
        let mut s = 0.5 * spec.spacing;
        while s <= path.row_length {
            let (p, h) = path.at(s0 + s);
            let side = if id % 2 == 0 { 1.0 } else { -1.0 };
            let c = p + Vector2::new(-h.sin(), h.cos()) * (side * spec.offset);
            out.push(Marker {
                id,
                center: [c.x, c.y],
                size: spec.size,
            });
            id += 1;
            s += spec.spacing;
        }
    }
    out
}

/// Generates the full scene.
pub fn gen_scene(spec: &SceneSpec) -> Result<Scene, SynthError> {
    spec.validate()?;
    let tspec = &spec.trajectory;
    let dt = 1.0 / spec.sensors.imu_rate;
    let terrain = TerrainModel::new(&spec.terrain, spec.seed);
    let path = FlightPath::new(tspec);
    let z = terrain.datum() + tspec.altitude;
    let sway = tspec.sway_deg.to_radians();
    let markers = markers_along(&path, &spec.markers);
    let texture = Texture::new(&spec.texture, spec.seed, markers.clone());

    // truth kinematics on the IMU grid
    let ticks = frame_ticks(&path, tspec, dt);
    let end_time = tspec.ramp_time + path.total / tspec.speed + 1.0;
    let n = (end_time / dt).ceil() as usize + 1;
    let target = |k: usize| {
        let t = k as f64 * dt;
        let (s, u) = arc_length_at(t, tspec.speed, tspec.ramp_time);
        let (p, h) = path.at(s);
        (
            Vector3::new(p.x, p.y, z),
            Vector3::new(h.cos() * u, h.sin() * u, 0.0),
            attitude(h, t, sway),
        )
    };
    let (p0, v0, q0) = target(0);
    let mut states = Vec::with_capacity(n);
    states.push(TruthState { t: 0.0, p: p0, v: v0, q: q0 });
    let mut accel = Vec::with_capacity(n);
    let mut omega = Vec::with_capacity(n);
    for k in 0..n - 1 {
        let cur = &states[k];
        let (_, v_next, q_next) = target(k + 1);
        let a = (v_next - cur.v) / dt;
        let w = (cur.q.inverse() * q_next).scaled_axis() / dt;
        let mut q = cur.q * UnitQuaternion::from_scaled_axis(w * dt);
        q.renormalize();
        let next = TruthState {
            t: (k + 1) as f64 * dt,
            p: cur.p + cur.v * dt + a * (0.5 * dt * dt),
            v: cur.v + a * dt,
            q,
        };
        accel.push(a);
        omega.push(w);
        states.push(next);
    }
    accel.push(Vector3::zeros());
    omega.push(Vector3::zeros());

    for s in states.iter().step_by(10) {
        let alt = s.p.z - terrain.height(s.p.x, s.p.y);
        if !(alt > 1.0) {
            return Err(SynthError::BelowTerrain { t: s.t, altitude: alt });
        }
    }

    // IMU
    let noise = &spec.noise;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, stream::IMU));
    let accel_bias = gaussian3(&mut rng, noise.accel_bias_sigma);
    let gyro_bias = gaussian3(&mut rng, noise.gyro_bias_sigma);
    let sa = noise.accel_density / dt.sqrt();
    let sg = noise.gyro_density / dt.sqrt();
    let imu: Vec<ImuSample> = states
        .iter()
        .zip(accel.iter().zip(&omega))
        .map(|(s, (a, w))| {
            let f = s.q.inverse() * (a - gravity());
            ImuSample {
                t: s.t,
                accel: f + accel_bias + gaussian3(&mut rng, sa),
                gyro: w + gyro_bias + gaussian3(&mut rng, sg),
            }
        })
        .collect();

    // GPS
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, stream::GPS));
    let gps_every = (spec.sensors.imu_rate / spec.sensors.gps_rate).round().max(1.0) as usize;
    let reported = noise.gps_sigma.max(noise.gps_reported_floor).max(1e-6);
    let gps: Vec<GpsFix> = states
        .iter()
        .step_by(gps_every)
        .map(|s| GpsFix {
            t: s.t,
            position: s.p + gaussian3(&mut rng, noise.gps_sigma),
            noise: Matrix3::identity() * (reported * reported),
        })
        .collect();

    // radar
    let radar_mount = radar_mount();
    let radar_every = (spec.sensors.imu_rate / spec.sensors.radar_rate).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, stream::RADAR));
    let half = spec.sensors.radar_half_angle_deg.to_radians();
    let zn = Normal::new(0.0, noise.radar_sigma.max(0.0)).expect("finite sigma");
    let mut radar = Vec::new();
    for s in states.iter().step_by(radar_every) {
        let pose = s.body_pose().compose(&radar_mount).expect("radar to body to world");
        let inv = pose.inverse();
        let mut pts = Vec::with_capacity(spec.sensors.radar_rays);
        for _ in 0..spec.sensors.radar_rays {
            // uniform over the spherical cap around the boresight
            let cos_t = rng.random_range(half.cos()..=1.0);
            let phi = rng.random_range(0.0..2.0 * PI);
            let sin_t = (1.0 - cos_t * cos_t).sqrt();
            let dir_r = Vector3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t);
            let drop = rng.random_bool(noise.radar_dropout);
            let outlier = rng.random_bool(noise.radar_outlier_fraction);
            let dz = zn.sample(&mut rng);
            let spurious = rng.random_range(2.0..10.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            if drop {
                continue;
            }
            let dir_w = pose.transform_vector(&dir_r);
            let Some(hit) = terrain.intersect(pose.translation(), &dir_w) else { continue };
            let mut pw = hit + Vector3::new(0.0, 0.0, dz);
            if outlier {
                pw.z += spurious;
            }
            pts.push(inv.transform_point(&pw));
        }
        radar.push(RadarScan { t: s.t, points: pts });
    }

    // frames
    let k = spec.intrinsics();
    let cam_mount = camera_mount();
    let frame_poses: Vec<RigidTransform> = ticks
        .iter()
        .map(|&i| states[i].body_pose().compose(&cam_mount).expect("camera to body to world"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, stream::EXPOSURE));
    let gains: Vec<f64> = ticks
        .iter()
        .map(|_| 1.0 + noise.exposure_jitter * rng.random_range(-1.0..=1.0))
        .collect();
    let frames: Vec<SceneFrame> = ticks
        .par_iter()
        .zip(frame_poses.par_iter())
        .zip(gains.par_iter())
        .enumerate()
        .map(|(i, ((&tick, pose), &gain))| SceneFrame {
            id: format!("frame_{i:04}"),
            t: states[tick].t,
            tick,
            image: render_view(&k, pose, &terrain, &texture, gain),
        })
        .collect();

    Ok(Scene {
        spec: spec.clone(),
        k,
        camera_mount: cam_mount,
        radar_mount,
        truth: GroundTruth {
            states,
            frame_poses,
            markers,
            terrain,
            accel_bias,
            gyro_bias,
        },
        texture,
        frames,
        imu,
        gps,
        radar,
    })
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma <= 0.0 {
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Ray-casts every pixel center onto the terrain and samples the texture;
/// colors are scaled by `gain` and quantized to 8-bit levels.
pub fn render_view(
    k: &CameraIntrinsics,
    pose: &RigidTransform,
    terrain: &TerrainModel,
    texture: &Texture,
    gain: f64,
) -> RgbF32 {
    let o = *pose.translation();
    RgbF32::from_fn(k.width as usize, k.height as usize, |u, v| {
        let d = pose.transform_vector(&k.ray(&Vector2::new(u as f64, v as f64)));
        match terrain.intersect(&o, &d) {
            Some(p) => texture.color(p.x, p.y).map(|c| (c as f64 * gain).round().clamp(0.0, 255.0) as f32),
            None => [0.0; 3],
        }
    })
}

// ---------------------------------------------------------------------------
// features

#[derive(Clone, Debug)]
pub struct FeatureTruth {
    pub sets: Vec<FeatureSet>,
    /// World point behind every keypoint; `None` for distractors.
    pub point_ids: Vec<Vec<Option<usize>>>,
    pub world_points: Vec<Vector3<f64>>,
}

impl FeatureTruth {
    /// True correspondences `(index_a, index_b)` between frames `a` and `b`.
    pub fn labels(&self, a: usize, b: usize) -> Vec<(usize, usize)> {
        let mut in_b = std::collections::HashMap::new();
        for (j, id) in self.point_ids[b].iter().enumerate() {
            if let Some(id) = id {
                in_b.insert(*id, j);
            }
        }
        let mut out: Vec<(usize, usize)> = self.point_ids[a]
            .iter()
            .enumerate()
            .filter_map(|(i, id)| id.and_then(|id| in_b.get(&id).map(|&j| (i, j))))
            .collect();
        out.sort_unstable();
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureParams {
    pub per_frame: usize,
    pub descriptor_len: usize,
    pub descriptor_sigma: f64,
    pub keypoint_sigma: f64,
    pub distractor_fraction: f64,
}

impl FeatureParams {
    pub fn from_spec(spec: &SceneSpec) -> Self {
        Self {
            per_frame: spec.features_per_frame,
            descriptor_len: 64,
            descriptor_sigma: spec.noise.descriptor_sigma,
            keypoint_sigma: spec.noise.keypoint_sigma,
            distractor_fraction: spec.noise.distractor_fraction,
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    let n = Normal::new(0.0f64, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..len).map(|_| n.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

/// Labeled synthetic features: world points on the terrain with one random
/// unit descriptor each, re-observed in every frame that sees them with a
/// perturbed copy of the descriptor, plus independent distractors.
pub fn gen_feature_truth(scene: &Scene, params: &FeatureParams) -> Result<FeatureTruth, SynthError> {
    if params.per_frame == 0 || params.descriptor_len == 0 {
        return Err(SynthError::InvalidSpec("per_frame and descriptor_len must be at least 1".into()));
    }
    let k = &scene.k;
    let alt = scene.spec.trajectory.altitude;
    let foot = (k.width as f64 * alt / k.fx) * (k.height as f64 * alt / k.fy);
    let n_true = ((1.0 - params.distractor_fraction) * params.per_frame as f64).round() as usize;

    // world points over the bounding box of all footprints, with margin
    let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &scene.truth.frame_poses {
        lo = lo.inf(&p.translation().xy());
        hi = hi.sup(&p.translation().xy());
    }
    let reach = 0.6 * ((k.width as f64 * alt / k.fx).hypot(k.height as f64 * alt / k.fy)) + 5.0;
    lo -= Vector2::new(reach, reach);
    hi += Vector2::new(reach, reach);
    let area = (hi.x - lo.x) * (hi.y - lo.y);
    // 10% denser than needed so frames can be filled to n_true
    let count = (1.1 * n_true as f64 * area / foot).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(scene.spec.seed, stream::FEATURES));
    let terrain = &scene.truth.terrain;
    let mut world = Vec::with_capacity(count);
    let mut descs = Vec::with_capacity(count);
    for _ in 0..count {
        let x = rng.random_range(lo.x..hi.x);
        let y = rng.random_range(lo.y..hi.y);
        world.push(Vector3::new(x, y, terrain.height(x, y)));
        descs.push(random_unit(&mut rng, params.descriptor_len));
    }

    let base_seed = sub_seed(scene.spec.seed, stream::FEATURES ^ 0xF00D);
    let per_frame: Vec<(FeatureSet, Vec<Option<usize>>)> = scene
        .truth
        .frame_poses
        .par_iter()
        .enumerate()
        .map(|(fi, pose)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(base_seed, fi as u64));
            let mut visible: Vec<(usize, Vector2<f64>)> = world
                .iter()
                .enumerate()
                .filter_map(|(i, p)| project_world(k, pose, p).ok().filter(|px| k.contains(px)).map(|px| (i, px)))
                .collect();
            // deterministic subsample down to n_true
            for i in 0..visible.len().min(n_true) {
                let j = rng.random_range(i..visible.len());
                visible.swap(i, j);
            }
            visible.truncate(n_true);
            let dn = Normal::new(0.0, params.descriptor_sigma.max(0.0)).expect("finite sigma");
            let kn = Normal::new(0.0, params.keypoint_sigma.max(0.0)).expect("finite sigma");
            let mut items: Vec<(Option<usize>, Vector2<f64>, Vec<f32>)> = Vec::with_capacity(params.per_frame);
            for (id, px) in visible {
                let d: Vec<f64> = descs[id].iter().map(|&v| v as f64 + dn.sample(&mut rng)).collect();
                let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let jitter = Vector2::new(kn.sample(&mut rng), kn.sample(&mut rng));
                let p = clamp_to_image(px + jitter, k);
                items.push((Some(id), p, d.iter().map(|v| (v / norm) as f32).collect()));
            }
            while items.len() < params.per_frame {
                let p = Vector2::new(rng.random_range(0.0..=(k.width - 1) as f64), rng.random_range(0.0..=(k.height - 1) as f64));
                items.push((None, p, random_unit(&mut rng, params.descriptor_len)));
            }
            // shuffle so indices carry no information
            for i in (1..items.len()).rev() {
                let j = rng.random_range(0..=i);
                items.swap(i, j);
            }
            let mut set = FeatureSet::new(scene.frames.get(fi).map_or(format!("frame_{fi:04}"), |f| f.id.clone()), k.width, k.height, Metric::L2, params.descriptor_len);
            let mut ids = Vec::with_capacity(items.len());
            for (id, p, d) in items {
                set.push(Keypoint { position: p, response: 1.0 }, &d).expect("valid synthetic feature");
                ids.push(id);
            }
            (set, ids)
        })
        .collect();
    let (sets, point_ids) = per_frame.into_iter().unzip();
    Ok(FeatureTruth {
        sets,
        point_ids,
        world_points: world,
    })
}

fn clamp_to_image(p: Vector2<f64>, k: &CameraIntrinsics) -> Vector2<f64> {
    Vector2::new(p.x.clamp(0.0, (k.width - 1) as f64), p.y.clamp(0.0, (k.height - 1) as f64))
}

/// Analytic forward overlap of consecutive nadir frames on a straight row.
pub fn analytic_overlap(spec: &SceneSpec) -> f64 {
    let along = spec.camera.height as f64 * spec.trajectory.altitude / spec.camera.focal;
    (1.0 - spec.trajectory.speed * spec.trajectory.frame_interval / along).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::ekf_predict;
    use crate::fusion::{ProcessNoise, StateCovariance};

    fn quiet(mut spec: SceneSpec) -> SceneSpec {
        spec.noise = NoiseSpec {
            gps_sigma: 0.0,
            accel_density: 0.0,
            gyro_density: 0.0,
            accel_bias_sigma: 0.0,
            gyro_bias_sigma: 0.0,
            radar_sigma: 0.0,
            radar_dropout: 0.0,
            radar_outlier_fraction: 0.0,
            descriptor_sigma: 0.0,
            keypoint_sigma: 0.0,
            distractor_fraction: 0.0,
            exposure_jitter: 0.0,
            ..NoiseSpec::default()
        };
        spec
    }

    #[test]
    fn presets_validate_and_have_expected_frames() {
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
        assert!(matches!(preset("mars"), Err(SynthError::UnknownPreset(_))));
        let road = preset("road-like").unwrap();
        let path = FlightPath::new(&road.trajectory);
        assert_eq!(frame_ticks(&path, &road.trajectory, 0.01).len(), 21);
        let hill = preset("hill-like").unwrap();
        let path = FlightPath::new(&hill.trajectory);
        assert_eq!(frame_ticks(&path, &hill.trajectory, 0.01).len(), 55);
    }

    #[test]
    fn spec_json_round_trip_and_unknown_keys() {
        let spec = preset("hill-like").unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<SceneSpec>(&json).unwrap(), spec);
        assert!(serde_json::from_str::<SceneSpec>(r#"{"seed": 1, "bogus": 2}"#).is_err());
        let partial: SceneSpec = serde_json::from_str(r#"{"seed": 99}"#).unwrap();
        assert_eq!(partial.seed, 99);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = preset("tiny").unwrap();
        s.noise.gps_sigma = -1.0;
        assert!(s.validate().is_err());
        let mut s = preset("tiny").unwrap();
        s.trajectory.rows = 0;
        assert!(gen_scene(&s).is_err());
        let mut s = preset("tiny").unwrap();
        s.trajectory.altitude = 0.5;
        assert!(matches!(gen_scene(&s), Err(SynthError::BelowTerrain { .. })));
    }

    #[test]
    fn path_is_continuous_with_unit_speed() {
        let t = TrajectorySpec { rows: 3, row_length: 50.0, row_spacing: 20.0, heading_deg: 30.0, ..Default::default() };
        let path = FlightPath::new(&t);
        let ds = 0.01;
        let mut s = -10.0;
        while s < path.total + 5.0 {
            let (a, ha) = path.at(s);
            let (b, _) = path.at(s + ds);
            assert!(((b - a).norm() - ds).abs() < 1e-6, "at s = {s}");
            let dir = (b - a) / ds;
            assert!((dir - Vector2::new(ha.cos(), ha.sin())).norm() < 1e-2);
            s += 0.37;
        }
        // rows are parallel and spaced
        let (p0, _) = path.at(path.row_starts[1]);
        let (p1, _) = path.at(path.row_starts[2]);
        assert!(((p1 - p0).norm() - ((50.0f64).powi(2) + 20.0f64.powi(2)).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn run_up_starts_at_rest() {
        let (s, u) = arc_length_at(0.0, 10.0, 4.0);
        assert_eq!((s, u), (-20.0, 0.0));
        let (s, u) = arc_length_at(4.0, 10.0, 4.0);
        assert!(s.abs() < 1e-12 && (u - 10.0).abs() < 1e-12);
        // derivative of s is u
        for t in [0.5, 1.7, 3.2] {
            let h = 1e-6;
            let ds = (arc_length_at(t + h, 10.0, 4.0).0 - arc_length_at(t - h, 10.0, 4.0).0) / (2.0 * h);
            assert!((ds - arc_length_at(t, 10.0, 4.0).1).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_noise_gps_is_exact() {
        let scene = gen_scene(&quiet(preset("tiny").unwrap())).unwrap();
        for g in &scene.gps {
            let i = (g.t / scene.dt()).round() as usize;
            assert_eq!(g.position, scene.truth.states[i].p);
        }
        assert_eq!(scene.gps[0].t, 0.0);
    }

    #[test]
    fn noiseless_imu_integrates_to_truth() {
        let scene = gen_scene(&quiet(preset("tiny").unwrap())).unwrap();
        let mut state = NavState {
            p: scene.truth.states[0].p,
            v: scene.truth.states[0].v,
            q: scene.truth.states[0].q,
            ..NavState::default()
        };
        let cov = StateCovariance::from_std(1.0, 1.0, 0.1, 0.1, 0.01);
        let dt = scene.dt();
        for k in 0..scene.imu.len() - 1 {
            let (next, _) = ekf_predict(&state, &cov, &scene.imu[k], dt, &ProcessNoise::default()).unwrap();
            state = next;
            let truth = &scene.truth.states[k + 1];
            assert!((state.p - truth.p).norm() < 1e-6, "tick {k}");
            assert!(state.q.angle_to(&truth.q) < 1e-9);
        }
    }

    #[test]
    fn seed_determinism() {
        let spec = preset("tiny").unwrap();
        let a = gen_scene(&spec).unwrap();
        let b = gen_scene(&spec).unwrap();
        assert_eq!(a.imu, b.imu);
        assert_eq!(a.gps, b.gps);
        assert_eq!(a.radar, b.radar);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.image, fb.image);
        }
        let p = FeatureParams::from_spec(&spec);
        let (ta, tb) = (gen_feature_truth(&a, &p).unwrap(), gen_feature_truth(&b, &p).unwrap());
        assert_eq!(ta.sets, tb.sets);
        let mut other = spec.clone();
        other.seed += 1;
        assert_ne!(gen_scene(&other).unwrap().gps, a.gps);
    }

    #[test]
    fn flat_nadir_frame_is_affine_warp_of_texture() {
        let mut spec = quiet(preset("tiny").unwrap());
        spec.terrain = TerrainSpec::Flat { height: 5.0 };
        spec.trajectory.sway_deg = 0.0;
        let scene = gen_scene(&spec).unwrap();
        let f = &scene.frames[1];
        let pose = &scene.truth.frame_poses[1];
        let k = &scene.k;
        let c = pose.translation();
        let alt = c.z - 5.0;
        // level camera, yaw h: ground point of pixel (u, v) is an affine map
        let r = pose.rotation_matrix();
        let mut err = 0.0;
        for v in 0..k.height as usize {
            for u in 0..k.width as usize {
                let xc = (u as f64 - k.cx) / k.fx * alt;
                let yc = (v as f64 - k.cy) / k.fy * alt;
                let g = c + r * Vector3::new(xc, yc, alt);
                let t = scene.texture.color(g.x, g.y);
                let got = f.image.get(u, v);
                err += (0..3).map(|ch| (got[ch] - t[ch].round()).abs() as f64).sum::<f64>() / 3.0;
            }
        }
        let mae = err / (k.width * k.height) as f64;
        assert!(mae < 2.0, "MAE {mae}");
    }

    #[test]
    fn radar_points_lie_on_terrain() {
        let spec = preset("tiny").unwrap();
        let scene = gen_scene(&spec).unwrap();
        let sigma = spec.noise.radar_sigma;
        let (mut total, mut within) = (0usize, 0usize);
        for scan in &scene.radar {
            let i = (scan.t / scene.dt()).round() as usize;
            let pose = scene.truth.states[i].body_pose().compose(&scene.radar_mount).unwrap();
            for p in &scan.points {
                let w = pose.transform_point(p);
                total += 1;
                if (w.z - scene.truth.terrain.height(w.x, w.y)).abs() <= 3.0 * sigma {
                    within += 1;
                }
            }
        }
        assert!(total > 1000);
        assert!(within as f64 >= 0.99 * total as f64, "{within} / {total}");
    }

    #[test]
    fn consecutive_overlap_matches_analytic() {
        let spec = quiet(preset("road-like").unwrap());
        let scene = gen_scene(&spec).unwrap();
        let truth = gen_feature_truth(&scene, &FeatureParams { per_frame: 4000, ..FeatureParams::from_spec(&spec) }).unwrap();
        let expect = analytic_overlap(&spec);
        // fraction of frame i's world points also visible in frame i+1
        let k = &scene.k;
        for i in 0..scene.frames.len() - 1 {
            let ids: Vec<usize> = truth.point_ids[i].iter().flatten().copied().collect();
            let seen = ids
                .iter()
                .filter(|&&id| {
                    project_world(k, &scene.truth.frame_poses[i + 1], &truth.world_points[id])
                        .map(|p| k.contains(&p))
                        .unwrap_or(false)
                })
                .count();
            let frac = seen as f64 / ids.len() as f64;
            assert!((frac - expect).abs() < 0.05, "pair {i}: {frac} vs {expect}");
        }
    }

    #[test]
    fn labels_are_mutual_observations() {
        let spec = preset("tiny").unwrap();
        let scene = gen_scene(&spec).unwrap();
        let truth = gen_feature_truth(&scene, &FeatureParams::from_spec(&spec)).unwrap();
        assert!(truth.sets.iter().all(|s| s.len() == spec.features_per_frame));
        let labels = truth.labels(0, 1);
        assert!(!labels.is_empty());
        for &(a, b) in &labels {
            assert_eq!(truth.point_ids[0][a], truth.point_ids[1][b]);
            let w = truth.world_points[truth.point_ids[0][a].unwrap()];
            let pa = project_world(&scene.k, &scene.truth.frame_poses[0], &w).unwrap();
            assert!((pa - truth.sets[0].position(a)).norm() < 1e-9);
        }
    }

    #[test]
    fn value_noise_is_bounded_and_continuous() {
        for i in 0..2000 {
            let x = i as f64 * 0.173 - 50.0;
            let y = i as f64 * 0.071 + 3.0;
            let v = value_noise(x, y, 5);
            assert!((0.0..=1.0).contains(&v));
            assert!((value_noise(x + 1e-7, y, 5) - v).abs() < 1e-5);
        }
    }

    #[test]
    fn hill_intersection_lands_on_surface() {
        let t = TerrainModel::new(&TerrainSpec::Hills { base: 10.0, amplitude: 7.0, wavelength: 60.0 }, 3);
        let o = Vector3::new(5.0, -3.0, 50.0);
        for i in 0..200 {
            let a = i as f64 * 0.031;
            let d = Vector3::new(0.5 * a.cos(), 0.5 * a.sin(), -1.0);
            let p = t.intersect(&o, &d).unwrap();
            assert!((p.z - t.height(p.x, p.y)).abs() < 1e-9);
            // on the ray
            let s = (o.z - p.z) / -d.z;
            assert!(((o + d * s).xy() - p.xy()).norm() < 1e-6);
        }
    }
}
