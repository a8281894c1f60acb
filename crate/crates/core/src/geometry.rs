//! Coordinate frames, rigid transforms and the pinhole camera model.
//!
//! Conventions used throughout the crate:
//! - World frame is right-handed and Z-up (local ENU, meters).
//! - Camera frame: +X right, +Y down, +Z along the optical axis.
//! - Pixel coordinates address pixel centers, so pixel `(0, 0)` is the
//!   center of the top-left pixel.
//! - A `RigidTransform` tagged `Camera -> World` maps camera coordinates into
//!   world coordinates (it is the camera pose).

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point in the world frame, meters.
pub type WorldPoint = Vector3<f64>;
/// A point in a camera frame, meters.
pub type CameraPoint = Vector3<f64>;
/// An image location in pixels.
pub type PixelPoint = Vector2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("frame mismatch: cannot chain {outer_from:?} <- {inner_to:?}")]
    FrameMismatch { outer_from: Frame, inner_to: Frame },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("point is behind the camera (z = {0})")]
    Cheirality(f64),
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Frame tags carried by every transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    World,
    Body,
    Camera,
    Radar,
}

/// SE(3) transform mapping points from `from` coordinates into `to` coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
    from: Frame,
    to: Frame,
}

impl RigidTransform {
    pub fn new(
        rotation: UnitQuaternion<f64>,
        translation: Vector3<f64>,
        from: Frame,
        to: Frame,
    ) -> Self {
        let mut rotation = rotation;
        rotation.renormalize();
        Self {
            rotation,
            translation,
            from,
            to,
        }
    }

    pub fn identity(from: Frame, to: Frame) -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros(), from, to)
    }

    pub fn from_translation(translation: Vector3<f64>, from: Frame, to: Frame) -> Self {
        Self::new(UnitQuaternion::identity(), translation, from, to)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn from_frame(&self) -> Frame {
        self.from
    }

    pub fn to_frame(&self) -> Frame {
        self.to
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Same rigid motion, different frame tags.
    pub fn relabel(self, from: Frame, to: Frame) -> Self {
        Self { from, to, ..self }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self * inner`: apply `inner` first, then `self`.
    pub fn compose(&self, inner: &RigidTransform) -> Result<RigidTransform, GeometryError> {
        compose(self, inner)
    }

    pub fn inverse(&self) -> RigidTransform {
        invert(self)
    }
}

/// Chains `a ∘ b`. Requires `a.from == b.to`; the result maps `b.from -> a.to`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> Result<RigidTransform, GeometryError> {
    if a.from != b.to {
        return Err(GeometryError::FrameMismatch {
            outer_from: a.from,
            inner_to: b.to,
        });
    }
    Ok(RigidTransform::new(
        a.rotation * b.rotation,
        a.rotation * b.translation + a.translation,
        b.from,
        a.to,
    ))
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let inv = t.rotation.inverse();
    RigidTransform::new(inv, -(inv * t.translation), t.to, t.from)
}

/// Rotation matrix of a (possibly slightly unnormalized) quaternion.
pub fn quaternion_to_rotation(q: &Quaternion<f64>) -> Result<Matrix3<f64>, GeometryError> {
    let n = q.norm();
    if n < f64::EPSILON || !n.is_finite() {
        return Err(GeometryError::ZeroQuaternion);
    }
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Ideal pinhole intrinsics (no distortion).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Whether a pixel lies inside `[0, width-1] x [0, height-1]`.
    pub fn contains(&self, p: &PixelPoint) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= self.width as f64 - 1.0
            && p.y <= self.height as f64 - 1.0
    }

    /// Unnormalized viewing ray (z = 1) through a pixel.
    pub fn ray(&self, p: &PixelPoint) -> CameraPoint {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }
}

/// Lifts a pixel to the camera point at z-depth `depth`.
pub fn back_project(
    k: &CameraIntrinsics,
    p: &PixelPoint,
    depth: f64,
) -> Result<CameraPoint, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let r = k.ray(p);
    Ok(Vector3::new(r.x * depth, r.y * depth, depth))
}

pub fn project_to_pixel(k: &CameraIntrinsics, p: &CameraPoint) -> Result<PixelPoint, GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::Cheirality(p.z));
    }
    Ok(Vector2::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Projects a world point through a `Camera -> World` pose.
pub fn project_world(
    k: &CameraIntrinsics,
    cam_pose: &RigidTransform,
    p: &WorldPoint,
) -> Result<PixelPoint, GeometryError> {
    let pc = cam_pose.inverse().transform_point(p);
    project_to_pixel(k, &pc)
}

/// Moves a pixel of view A into view B assuming the scene point sits at
/// camera-A depth `depth_zw`. Both poses are `Camera -> World`.
///
/// Results outside image B are returned as-is; callers clip.
pub fn transfer_pixel(
    p_a: &PixelPoint,
    k: &CameraIntrinsics,
    pose_a: &RigidTransform,
    pose_b: &RigidTransform,
    depth_zw: f64,
) -> Result<PixelPoint, GeometryError> {
    let pc_a = back_project(k, p_a, depth_zw)?;
    let pw = pose_a.transform_point(&pc_a);
    let pc_b = pose_b.inverse().transform_point(&pw);
    project_to_pixel(k, &pc_b)
}

pub fn rot_x(angle: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), angle)
}

pub fn rot_z(angle: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle)
}

/// Camera-to-body rotation for a downward-looking camera whose image +u axis
/// points along body +X (forward).
pub fn nadir_camera_rotation() -> UnitQuaternion<f64> {
    rot_x(std::f64::consts::PI)
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_angle_between(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    a.rotation_to(b).angle()
}
