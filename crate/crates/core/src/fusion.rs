//! Error-state EKF fusing strapdown IMU propagation with GPS position fixes.
//!
//! The nominal state is `[p, v, q, b_a, b_g]`; the filter runs on the 15-dim
//! error state
//! ```text
//!  [0..3]   δp   (m)
//!  [3..6]   δv   (m/s)
//!  [6..9]   δθ   (rad, body-frame rotation error, q_true = q ⊗ exp(δθ))
//!  [9..12]  δb_a (m/s²)
//!  [12..15] δb_g (rad/s)
//! ```
//! GPS observes position only, so `H = [I₃ 0]`.

use nalgebra::{Matrix3, SMatrix, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{compose, Frame, GeometryError, RigidTransform};

pub const GRAVITY: f64 = 9.81;

/// Innovation covariances with a worse condition number are rejected.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

pub type Cov15 = SMatrix<f64, 15, 15>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("innovation covariance is singular or ill-conditioned (condition {0:e})")]
    SingularInnovation(f64),
    #[error("timestamps out of order in {stream} stream at index {index}")]
    OutOfOrder { stream: &'static str, index: usize },
    #[error("no IMU samples")]
    EmptyImu,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub fn gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

/// Nominal navigation state. `q` rotates body vectors into the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
        }
    }
}

/// Error-state covariance, kept symmetric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateCovariance(pub Cov15);

impl StateCovariance {
    /// Diagonal covariance from per-block standard deviations.
    pub fn from_std(pos: f64, vel: f64, att: f64, accel_bias: f64, gyro_bias: f64) -> Self {
        let mut m = Cov15::zeros();
        for i in 0..3 {
            m[(i, i)] = pos * pos;
            m[(3 + i, 3 + i)] = vel * vel;
            m[(6 + i, 6 + i)] = att * att;
            m[(9 + i, 9 + i)] = accel_bias * accel_bias;
            m[(12 + i, 12 + i)] = gyro_bias * gyro_bias;
        }
        Self(m)
    }

    pub fn position_block(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn symmetrize(&mut self) {
        self.0 = (self.0 + self.0.transpose()) * 0.5;
    }

    pub fn asymmetry(&self) -> f64 {
        (self.0 - self.0.transpose()).abs().max()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0.symmetric_eigen().eigenvalues.min()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force in the body frame, m/s² (reads +g upward at rest).
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub t: f64,
    pub position: Vector3<f64>,
    pub noise: Matrix3<f64>,
}

/// Continuous-time noise densities driving the process noise `Q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessNoise {
    /// m/s²/√Hz
    pub accel_density: f64,
    /// rad/s/√Hz
    pub gyro_density: f64,
    /// m/s³/√Hz
    pub accel_bias_walk: f64,
    /// rad/s²/√Hz
    pub gyro_bias_walk: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self {
            accel_density: 0.02,
            gyro_density: 0.002,
            accel_bias_walk: 1e-4,
            gyro_bias_walk: 1e-5,
        }
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Propagates state and covariance over `dt` holding `imu` constant.
pub fn ekf_predict(
    state: &NavState,
    cov: &StateCovariance,
    imu: &ImuSample,
    dt: f64,
    noise: &ProcessNoise,
) -> Result<(NavState, StateCovariance), FusionError> {
    if !(dt > 0.0) {
        return Err(FusionError::NonPositiveDt(dt));
    }
    let rot = state.q.to_rotation_matrix().into_inner();
    let f_body = imu.accel - state.accel_bias;
    let omega = imu.gyro - state.gyro_bias;
    let a_world = rot * f_body + gravity();

    let mut q = state.q * UnitQuaternion::from_scaled_axis(omega * dt);
    q.renormalize();
    let next = NavState {
        p: state.p + state.v * dt + a_world * (0.5 * dt * dt),
        v: state.v + a_world * dt,
        q,
        ..*state
    };

    let mut f = Cov15::identity();
    let i3 = Matrix3::identity();
    f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(i3 * dt));
    f.fixed_view_mut::<3, 3>(3, 6)
        .copy_from(&(-rot * skew(&f_body) * dt));
    f.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-rot * dt));
    let d_rot = UnitQuaternion::from_scaled_axis(omega * dt)
        .to_rotation_matrix()
        .into_inner();
    f.fixed_view_mut::<3, 3>(6, 6).copy_from(&d_rot.transpose());
    f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-i3 * dt));

    let mut q_noise = Cov15::zeros();
    let blocks = [
        (3, noise.accel_density),
        (6, noise.gyro_density),
        (9, noise.accel_bias_walk),
        (12, noise.gyro_bias_walk),
    ];
    for (start, density) in blocks {
        for i in 0..3 {
            q_noise[(start + i, start + i)] = density * density * dt;
        }
    }

    let mut p = StateCovariance(f * cov.0 * f.transpose() + q_noise);
    p.symmetrize();
    Ok((next, p))
}

/// Symmetric-matrix eigen condition check followed by inversion.
fn invert_innovation(s: &Matrix3<f64>) -> Result<Matrix3<f64>, FusionError> {
    let eig = s.symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) || !(hi / lo <= MAX_INNOVATION_CONDITION) {
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        return Err(FusionError::SingularInnovation(cond));
    }
    s.try_inverse()
        .ok_or(FusionError::SingularInnovation(f64::INFINITY))
}

/// Position-only measurement update with multiplicative attitude injection.
pub fn ekf_update(
    state: &NavState,
    cov: &StateCovariance,
    gps: &GpsFix,
) -> Result<(NavState, StateCovariance), FusionError> {
    let p = &cov.0;
    let s = p.fixed_view::<3, 3>(0, 0) + gps.noise;
    let s_inv = invert_innovation(&s)?;
    // P Hᵀ is the first three columns of P.
    let pht: SMatrix<f64, 15, 3> = p.fixed_view::<15, 3>(0, 0).into_owned();
    let gain = pht * s_inv;
    let innovation = gps.position - state.p;
    let dx = gain * innovation;

    let dp = dx.fixed_rows::<3>(0).into_owned();
    let dv = dx.fixed_rows::<3>(3).into_owned();
    let dtheta = dx.fixed_rows::<3>(6).into_owned();
    let dba = dx.fixed_rows::<3>(9).into_owned();
    let dbg = dx.fixed_rows::<3>(12).into_owned();

    let mut q = state.q * UnitQuaternion::from_scaled_axis(dtheta);
    q.renormalize();
    let next = NavState {
        p: state.p + dp,
        v: state.v + dv,
        q,
        accel_bias: state.accel_bias + dba,
        gyro_bias: state.gyro_bias + dbg,
    };

    // (I - K H) P: H P is the first three rows of P.
    let hp: SMatrix<f64, 3, 15> = p.fixed_view::<3, 15>(0, 0).into_owned();
    let mut post = StateCovariance(p - gain * hp);
    post.symmetrize();
    Ok((next, post))
}

/// Kalman gain for the same inputs as [`ekf_update`].
pub fn kalman_gain(cov: &StateCovariance, noise: &Matrix3<f64>) -> Result<SMatrix<f64, 15, 3>, FusionError> {
    let s = cov.0.fixed_view::<3, 3>(0, 0) + noise;
    let s_inv = invert_innovation(&s)?;
    Ok(cov.0.fixed_view::<15, 3>(0, 0) * s_inv)
}

pub fn body_pose(state: &NavState) -> RigidTransform {
    RigidTransform::new(state.q, state.p, Frame::Body, Frame::World)
}

/// `T_S^W = T_B^W · T_S^B`.
pub fn sensor_pose(
    body: &RigidTransform,
    extrinsic: &RigidTransform,
) -> Result<RigidTransform, GeometryError> {
    compose(body, extrinsic)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StampedState {
    pub t: f64,
    pub state: NavState,
    pub cov: StateCovariance,
}

/// Runs predict per IMU sample and updates with every GPS fix whose timestamp
/// falls in `(t_{k-1}, t_k]`. Emits one state per IMU timestamp, the first
/// being `initial` at `imu[0].t`.
pub fn run_filter(
    imu: &[ImuSample],
    gps: &[GpsFix],
    initial: NavState,
    cov0: StateCovariance,
    noise: &ProcessNoise,
) -> Result<Vec<StampedState>, FusionError> {
    if imu.is_empty() {
        return Err(FusionError::EmptyImu);
    }
    for (i, w) in imu.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(FusionError::OutOfOrder {
                stream: "imu",
                index: i + 1,
            });
        }
    }
    for (i, w) in gps.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(FusionError::OutOfOrder {
                stream: "gps",
                index: i + 1,
            });
        }
    }

    let mut out = Vec::with_capacity(imu.len());
    let mut state = initial;
    let mut cov = cov0;
    let mut next_fix = 0;
    while next_fix < gps.len() && gps[next_fix].t <= imu[0].t {
        (state, cov) = ekf_update(&state, &cov, &gps[next_fix])?;
        next_fix += 1;
    }
    out.push(StampedState {
        t: imu[0].t,
        state,
        cov,
    });
    for k in 1..imu.len() {
        let dt = imu[k].t - imu[k - 1].t;
        (state, cov) = ekf_predict(&state, &cov, &imu[k - 1], dt, noise)?;
        while next_fix < gps.len() && gps[next_fix].t <= imu[k].t {
            (state, cov) = ekf_update(&state, &cov, &gps[next_fix])?;
            next_fix += 1;
        }
        out.push(StampedState {
            t: imu[k].t,
            state,
            cov,
        });
    }
    Ok(out)
}

/// Piecewise-linear interpolation of raw GPS positions, held constant past
/// either end. This is the GPS-only baseline.
pub fn interpolate_gps(gps: &[GpsFix], times: &[f64]) -> Vec<Vector3<f64>> {
    if gps.is_empty() {
        return Vec::new();
    }
    let mut j = 0;
    times
        .iter()
        .map(|&t| {
            if t <= gps[0].t {
                return gps[0].position;
            }
            while j + 1 < gps.len() && gps[j + 1].t < t {
                j += 1;
            }
            if j + 1 >= gps.len() {
                return gps[gps.len() - 1].position;
            }
            let (a, b) = (&gps[j], &gps[j + 1]);
            let s = (t - a.t) / (b.t - a.t);
            a.position + (b.position - a.position) * s
        })
        .collect()
}
