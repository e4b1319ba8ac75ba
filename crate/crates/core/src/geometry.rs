//! Frames, rotations, poses, twists and the stereo pinhole rig.
//!
//! Rotations are stored as orthonormal matrices. [`Pose7`] (position plus
//! axis-angle) and [`RpyPose`] (position plus roll/pitch/yaw) are the
//! boundary representations exchanged with the rest of the pipeline.

use nalgebra::{Matrix3, Matrix3x4, Rotation3, Unit, UnitQuaternion, Vector3, Vector6};
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest admissible depth in front of a camera, meters.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("point behind camera (depth {depth} m)")]
    PointBehindCamera { depth: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
}

/// Rigid pose in the root frame: position plus rotation.
///
/// The serialized form is the 7-vector `[p_x, p_y, p_z, u_x, u_y, u_z, θ]`
/// with a unit axis and `θ ∈ [0, π]`. A non-unit axis is normalized on
/// input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 7]", into = "[f64; 7]")]
pub struct Pose7 {
    position: Vector3<f64>,
    rotation: Rotation3<f64>,
}

impl Default for Pose7 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose7 {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: Rotation3::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, rotation: Rotation3<f64>) -> Self {
        Self { position, rotation }
    }

    pub fn from_translation(position: Vector3<f64>) -> Self {
        Self::new(position, Rotation3::identity())
    }

    /// Builds a pose from an axis (any non-zero length) and an angle in radians.
    /// A zero axis or zero angle yields the identity rotation.
    pub fn from_axis_angle(position: Vector3<f64>, axis: Vector3<f64>, angle: f64) -> Self {
        let norm = axis.norm();
        let rotation = if norm <= 1e-15 || angle == 0.0 {
            Rotation3::identity()
        } else {
            Rotation3::from_axis_angle(&Unit::new_unchecked(axis / norm), angle)
        };
        Self { position, rotation }
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self::from_axis_angle(
            Vector3::new(a[0], a[1], a[2]),
            Vector3::new(a[3], a[4], a[5]),
            a[6],
        )
    }

    pub fn position(&self) -> Vector3<f64> {
        self.position
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn with_position(&self, position: Vector3<f64>) -> Self {
        Self { position, ..*self }
    }

    pub fn with_rotation(&self, rotation: Rotation3<f64>) -> Self {
        Self { rotation, ..*self }
    }

    /// Canonical axis-angle of the rotation: unit axis, angle in `[0, π]`,
    /// and axis `(1, 0, 0)` for the identity.
    pub fn axis_angle(&self) -> (Vector3<f64>, f64) {
        let q = UnitQuaternion::from_rotation_matrix(&self.rotation);
        let mut w = q.w;
        let mut v = q.imag();
        if w < 0.0 {
            w = -w;
            v = -v;
        }
        let s = v.norm();
        if s <= 1e-15 {
            return (Vector3::x(), 0.0);
        }
        (v / s, 2.0 * s.atan2(w))
    }

    pub fn to_array(&self) -> [f64; 7] {
        let (axis, angle) = self.axis_angle();
        [
            self.position.x,
            self.position.y,
            self.position.z,
            axis.x,
            axis.y,
            axis.z,
            angle,
        ]
    }

    /// Rigid composition `self ∘ other`: `other` is expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose7) -> Pose7 {
        Pose7 {
            position: self.position + self.rotation * other.position,
            rotation: self.rotation * other.rotation,
        }
    }

    pub fn inverse(&self) -> Pose7 {
        let rt = self.rotation.inverse();
        Pose7 {
            position: -(rt * self.position),
            rotation: rt,
        }
    }

    /// Maps a point from this frame to the root frame.
    pub fn transform_point(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.position + self.rotation * local
    }

    /// Maps a root-frame point into this frame.
    pub fn inverse_transform_point(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (world - self.position)
    }

    /// Geodesic angle between the two orientations, radians.
    pub fn angle_to(&self, other: &Pose7) -> f64 {
        rotation_angle(&(self.rotation.inverse() * other.rotation))
    }

    pub fn distance_to(&self, other: &Pose7) -> f64 {
        (self.position - other.position).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.matrix().iter().all(|v| v.is_finite())
    }
}

impl From<[f64; 7]> for Pose7 {
    fn from(a: [f64; 7]) -> Self {
        Pose7::from_array(a)
    }
}

impl From<Pose7> for [f64; 7] {
    fn from(p: Pose7) -> Self {
        p.to_array()
    }
}

/// Free-function form of [`Pose7::compose`].
pub fn compose(a: &Pose7, b: &Pose7) -> Pose7 {
    a.compose(b)
}

/// Rotation angle of `r` in `[0, π]`, robust near both ends.
pub fn rotation_angle(r: &Rotation3<f64>) -> f64 {
    let q = UnitQuaternion::from_rotation_matrix(r);
    2.0 * q.imag().norm().atan2(q.w.abs())
}

/// Re-orthonormalizes a rotation matrix that has accumulated round-off.
pub fn renormalize(r: &Rotation3<f64>) -> Rotation3<f64> {
    UnitQuaternion::new_normalize(*UnitQuaternion::from_rotation_matrix(r).quaternion()).to_rotation_matrix()
}

/// Pose with RPY Euler angles, `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpyPose {
    pub origin: Vector3<f64>,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Default for RpyPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RpyPose {
    pub fn new(origin: Vector3<f64>, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            origin,
            roll,
            pitch,
            yaw,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), 0.0, 0.0, 0.0)
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(Vector3::new(a[0], a[1], a[2]), a[3], a[4], a[5])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.origin.x,
            self.origin.y,
            self.origin.z,
            self.roll,
            self.pitch,
            self.yaw,
        ]
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw)
    }

    pub fn from_rotation(origin: Vector3<f64>, rotation: &Rotation3<f64>) -> Self {
        let (roll, pitch, yaw) = rotation.euler_angles();
        Self::new(origin, roll, pitch, yaw)
    }

    pub fn to_pose7(&self) -> Pose7 {
        Pose7::new(self.origin, self.rotation())
    }

    pub fn from_pose7(x: &Pose7) -> Self {
        Self::from_rotation(x.position(), x.rotation())
    }
}

pub fn rpy_to_pose7(r: &RpyPose) -> Pose7 {
    r.to_pose7()
}

pub fn pose7_to_rpy(x: &Pose7) -> RpyPose {
    RpyPose::from_pose7(x)
}

/// Spatial velocity `[v, ω]` of the end-effector, both in the root frame.
/// `v` is the velocity of the frame origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self { linear, angular }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        )
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.linear * s, self.angular * s)
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|v| v.is_finite())
    }
}

/// Applies a constant twist for `dt` seconds: `p' = p + v·dt`,
/// `R' = exp([ω·dt]×)·R`.
pub fn integrate_twist(x: &Pose7, xdot: &Twist, dt: f64) -> Pose7 {
    let position = x.position + xdot.linear * dt;
    let delta = Rotation3::new(xdot.angular * dt);
    Pose7::new(position, renormalize(&(delta * x.rotation)))
}

/// Pixel coordinates of a projected point plus its camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole camera: `x` right, `y` down, `z` along the optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    /// Camera frame expressed in the root frame.
    pose: Pose7,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        pose: Pose7,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidCamera("focal length must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera("image size must be non-zero"));
        }
        if !(cx >= 0.0 && cx <= width as f64 && cy >= 0.0 && cy <= height as f64) {
            return Err(GeometryError::InvalidCamera("principal point outside the image"));
        }
        let m = pose.rotation().matrix();
        let err = (m.transpose() * m - Matrix3::identity()).abs().max();
        if err > 1e-9 || !pose.is_finite() {
            return Err(GeometryError::InvalidCamera("extrinsic rotation not orthonormal"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose,
        })
    }

    /// Camera at `eye` with its optical axis through `target`; image rows run
    /// along `-up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or(GeometryError::InvalidCamera("eye coincides with target"))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or(GeometryError::InvalidCamera("optical axis parallel to up"))?;
        let y = z.cross(&x);
        let rotation = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            Pose7::new(eye, rotation),
        )
    }

    pub fn focal(&self) -> (f64, f64) {
        (self.fx, self.fy)
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.cx, self.cy)
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pose(&self) -> &Pose7 {
        &self.pose
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `Π = K·H`, with `H` the root-to-camera transform.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let h = self.pose.inverse();
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(h.rotation().matrix());
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&h.position());
        self.intrinsic_matrix() * rt
    }

    pub fn to_camera_frame(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.pose.inverse_transform_point(point)
    }

    pub fn project(&self, point: &Vector3<f64>) -> Result<Projection, GeometryError> {
        let pc = self.to_camera_frame(point);
        if !(pc.z > MIN_DEPTH) {
            return Err(GeometryError::PointBehindCamera { depth: pc.z });
        }
        Ok(Projection {
            u: self.fx * pc.x / pc.z + self.cx,
            v: self.fy * pc.y / pc.z + self.cy,
            depth: pc.z,
        })
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u <= self.width as f64 && v >= 0.0 && v <= self.height as f64
    }
}

/// Free-function form of [`CameraModel::project`].
pub fn project(cam: &CameraModel, point: &Vector3<f64>) -> Result<Projection, GeometryError> {
    cam.project(point)
}

/// Static, verged stereo pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub left: CameraModel,
    pub right: CameraModel,
}

/// Geometry of a verged stereo head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    /// Focal length in pixels (both axes, both cameras).
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    /// Distance between the two optical centers, meters.
    pub baseline: f64,
    /// Midpoint between the optical centers, root frame.
    pub eye_center: Vector3<f64>,
    /// Point both optical axes pass through, root frame.
    pub fixation: Vector3<f64>,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            focal: 257.0,
            width: 320,
            height: 240,
            baseline: 0.068,
            eye_center: Vector3::new(-0.06, 0.0, 0.36),
            fixation: Vector3::new(-0.30, 0.08, 0.05),
        }
    }
}

impl StereoRig {
    pub fn new(left: CameraModel, right: CameraModel) -> Self {
        Self { left, right }
    }

    pub fn from_config(cfg: &RigConfig) -> Result<Self, GeometryError> {
        let up = Vector3::z();
        let dir = cfg.fixation - cfg.eye_center;
        let lateral = dir
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or(GeometryError::InvalidCamera("fixation straight above or below the eyes"))?;
        let half = lateral * (cfg.baseline / 2.0);
        let left = CameraModel::look_at(
            cfg.eye_center - half,
            cfg.fixation,
            up,
            cfg.focal,
            cfg.width,
            cfg.height,
        )?;
        let right = CameraModel::look_at(
            cfg.eye_center + half,
            cfg.fixation,
            up,
            cfg.focal,
            cfg.width,
            cfg.height,
        )?;
        Ok(Self { left, right })
    }

    pub fn cameras(&self) -> [&CameraModel; 2] {
        [&self.left, &self.right]
    }
}

impl Default for StereoRig {
    fn default() -> Self {
        Self::from_config(&RigConfig::default()).expect("default rig is valid")
    }
}

/// Skew-symmetric cross-product matrix `[a]×`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}
