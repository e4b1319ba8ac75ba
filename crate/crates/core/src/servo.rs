//! Stereo image-based servoing on four virtual points attached to a pose.
//!
//! The default law is decoupled: translation is solved on the features of
//! `[p^e, R^g]` and rotation on the features of `[p^g, R^e]`, each with its
//! own damped pseudo-inverse and gain schedule, and the screw is assembled as
//! `[v_t, ω_o]`.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Matrix6, Rotation3, SMatrix, SVector, SymmetricEigen, Vector3, Vector6};
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{integrate_twist, skew, CameraModel, Pose7, StereoRig, Twist, MIN_DEPTH};

pub type FeatureVector = SVector<f64, 16>;
pub type ImageJacobian = SMatrix<f64, 16, 6>;

/// Damping added to `JᵀJ` before inversion.
pub const DAMPING: f64 = 1e-6;
/// Largest accepted condition number of the damped normal matrix.
pub const MAX_CONDITION: f64 = 1e8;
pub const DEFAULT_HALF_SIDE: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Camera {
    Left,
    Right,
}

impl core::fmt::Display for Camera {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Camera::Left => "left",
            Camera::Right => "right",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServoError {
    #[error("feature point {point} is behind the {camera} camera")]
    FeatureNotVisible { camera: Camera, point: usize },
    #[error("feature point {point} has depth {depth} in the {camera} camera")]
    SingularDepth { camera: Camera, point: usize, depth: f64 },
    #[error("image Jacobian normal matrix has condition number {0:e}")]
    IllConditioned(f64),
    #[error("servo stopped after {iterations} iterations with error {error_norm} px")]
    DidNotConverge { iterations: usize, error_norm: f64 },
    #[error("invalid gains: {0}")]
    InvalidGains(&'static str),
}

/// Square corners in the pose's local x-y plane, counter-clockwise about
/// local z starting from `(+, +)`.
pub fn square_corners(half_side: f64) -> [Vector3<f64>; 4] {
    let h = half_side;
    [
        Vector3::new(h, h, 0.0),
        Vector3::new(-h, h, 0.0),
        Vector3::new(-h, -h, 0.0),
        Vector3::new(h, -h, 0.0),
    ]
}

pub fn feature_points(x: &Pose7, half_side: f64) -> [Vector3<f64>; 4] {
    square_corners(half_side).map(|c| x.transform_point(&c))
}

/// Packed stereo features `[u_l, u_r, v_l, v_r]` per point, plus depths
/// `[z_l, z_r]` per point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoFeature {
    pub s: FeatureVector,
    pub depths: [[f64; 2]; 4],
}

impl StereoFeature {
    pub fn from_points(points: &[Vector3<f64>; 4], rig: &StereoRig) -> Result<Self, ServoError> {
        let mut s = FeatureVector::zeros();
        let mut depths = [[0.0; 2]; 4];
        for (i, p) in points.iter().enumerate() {
            for (c, (cam, which)) in [(&rig.left, Camera::Left), (&rig.right, Camera::Right)].into_iter().enumerate() {
                let pr = cam.project(p).map_err(|_| ServoError::FeatureNotVisible { camera: which, point: i })?;
                s[4 * i + c] = pr.u;
                s[4 * i + 2 + c] = pr.v;
                depths[i][c] = pr.depth;
            }
        }
        Ok(Self { s, depths })
    }

    /// Whether every projected point lies inside both images.
    pub fn in_frame(&self, rig: &StereoRig) -> bool {
        features_in_frame(&self.s, rig)
    }

    /// Left-camera pixel of point `i`.
    pub fn left(&self, i: usize) -> (f64, f64) {
        (self.s[4 * i], self.s[4 * i + 2])
    }

    pub fn right(&self, i: usize) -> (f64, f64) {
        (self.s[4 * i + 1], self.s[4 * i + 3])
    }
}

/// Whether every point of a packed feature vector lies inside both images.
pub fn features_in_frame(s: &FeatureVector, rig: &StereoRig) -> bool {
    (0..4).all(|i| rig.left.in_image(s[4 * i], s[4 * i + 2]) && rig.right.in_image(s[4 * i + 1], s[4 * i + 3]))
}

/// Pose at `p` whose local z-axis points at the left camera, local x
/// horizontal.
pub fn facing_pose(p: &Vector3<f64>, rig: &StereoRig) -> Pose7 {
    let z = (rig.left.pose().position() - p).normalize();
    let x = Vector3::z().cross(&z).normalize();
    let y = z.cross(&x);
    Pose7::new(*p, Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z])))
}

pub fn make_feature(x: &Pose7, rig: &StereoRig, half_side: f64) -> Result<StereoFeature, ServoError> {
    StereoFeature::from_points(&feature_points(x, half_side), rig)
}

/// Image Jacobian of four root-frame points rigidly attached to a body whose
/// twist `[v, ω]` is taken about `origin`.
pub fn image_jacobian(points: &[Vector3<f64>; 4], origin: &Vector3<f64>, rig: &StereoRig) -> Result<ImageJacobian, ServoError> {
    let mut j = ImageJacobian::zeros();
    for (i, p) in points.iter().enumerate() {
        // root-frame point velocity = [I, −[p − origin]×]·[v; ω]
        let mut point_rate = SMatrix::<f64, 3, 6>::zeros();
        point_rate.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
        point_rate.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&(p - origin))));
        for (c, (cam, which)) in [(&rig.left, Camera::Left), (&rig.right, Camera::Right)].into_iter().enumerate() {
            let pc = cam.to_camera_frame(p);
            if !(pc.z >= MIN_DEPTH) {
                return Err(ServoError::SingularDepth { camera: which, point: i, depth: pc.z });
            }
            let rows = pixel_rate(cam, &pc) * cam.pose().rotation().matrix().transpose() * point_rate;
            j.row_mut(4 * i + c).copy_from(&rows.row(0));
            j.row_mut(4 * i + 2 + c).copy_from(&rows.row(1));
        }
    }
    Ok(j)
}

fn pixel_rate(cam: &CameraModel, pc: &Vector3<f64>) -> SMatrix<f64, 2, 3> {
    let (fx, fy) = cam.focal();
    let z = pc.z;
    SMatrix::<f64, 2, 3>::new(fx / z, 0.0, -fx * pc.x / (z * z), 0.0, fy / z, -fy * pc.y / (z * z))
}

/// Solves `(JᵀJ + λI) x = Jᵀe`.
pub fn damped_pseudo_inverse_solve(j: &ImageJacobian, e: &FeatureVector) -> Result<Vector6<f64>, ServoError> {
    let a: Matrix6<f64> = j.transpose() * j + Matrix6::identity() * DAMPING;
    let eig = SymmetricEigen::new(a);
    let hi = eig.eigenvalues.max();
    let lo = eig.eigenvalues.min();
    let cond = hi / lo;
    if !(lo > 0.0) || !(cond <= MAX_CONDITION) {
        return Err(ServoError::IllConditioned(cond));
    }
    let ch = a.cholesky().ok_or(ServoError::IllConditioned(cond))?;
    Ok(ch.solve(&(j.transpose() * e)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoGains {
    pub kt1: f64,
    pub kt2: f64,
    pub ko1: f64,
    pub ko2: f64,
    /// Switching threshold of the translation channel, pixels.
    pub tau_t: f64,
    /// Switching threshold of the orientation channel, pixels.
    pub tau_o: f64,
    /// Termination threshold on `‖s^e − s^g‖₂`, pixels.
    pub epsilon: f64,
}

impl Default for ServoGains {
    fn default() -> Self {
        Self {
            kt1: 0.5,
            kt2: 0.25,
            ko1: 3.5,
            ko2: 0.5,
            tau_t: 10.0,
            tau_o: 10.0,
            epsilon: 1.0,
        }
    }
}

impl ServoGains {
    pub fn validate(&self) -> Result<(), ServoError> {
        if !(self.kt1 >= self.kt2 && self.kt2 > 0.0) {
            return Err(ServoError::InvalidGains("need kt1 >= kt2 > 0"));
        }
        if !(self.ko1 >= self.ko2 && self.ko2 > 0.0) {
            return Err(ServoError::InvalidGains("need ko1 >= ko2 > 0"));
        }
        if !(self.tau_t >= 0.0 && self.tau_o >= 0.0 && self.epsilon > 0.0) {
            return Err(ServoError::InvalidGains("thresholds must be non-negative"));
        }
        Ok(())
    }

    /// Translation gain for error norm `e` (high gain when `e ≥ τ_t`).
    pub fn translation_gain(&self, e: f64) -> f64 {
        if e >= self.tau_t {
            self.kt1
        } else {
            self.kt2
        }
    }

    pub fn orientation_gain(&self, e: f64) -> f64 {
        if e >= self.tau_o {
            self.ko1
        } else {
            self.ko2
        }
    }
}

/// Which image Jacobian drives the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum JacobianChoice {
    /// Separate translation and orientation problems.
    #[default]
    Decoupled,
    /// Single problem with the Jacobian at the current pose.
    Current,
    /// Single problem with the Jacobian at the goal pose.
    Goal,
    /// Single problem with the mean of the current and goal Jacobians.
    Mean,
}

impl JacobianChoice {
    pub const ALL: [JacobianChoice; 4] = [
        JacobianChoice::Current,
        JacobianChoice::Goal,
        JacobianChoice::Mean,
        JacobianChoice::Decoupled,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            JacobianChoice::Decoupled => "decoupled",
            JacobianChoice::Current => "current",
            JacobianChoice::Goal => "goal",
            JacobianChoice::Mean => "mean",
        }
    }
}

/// Output of one control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub twist: Twist,
    /// `‖s^e − s^g‖₂` of the current pose.
    pub error_norm: f64,
    pub e_t_norm: f64,
    pub e_o_norm: f64,
    pub gain_t: f64,
    pub gain_o: f64,
}

/// One evaluation of the control law for the current estimate `xe` and the
/// goal `xg`.
pub fn control_step(
    xe: &Pose7,
    xg: &Pose7,
    gains: &ServoGains,
    rig: &StereoRig,
    choice: JacobianChoice,
    half_side: f64,
) -> Result<ControlOutput, ServoError> {
    let sg = make_feature(xg, rig, half_side)?;
    let se = make_feature(xe, rig, half_side)?;
    let error_norm = (se.s - sg.s).norm();
    match choice {
        JacobianChoice::Decoupled => {
            let xt = Pose7::new(xe.position(), *xg.rotation());
            let xo = Pose7::new(xg.position(), *xe.rotation());
            let pt = feature_points(&xt, half_side);
            let po = feature_points(&xo, half_side);
            let e_t = StereoFeature::from_points(&pt, rig)?.s - sg.s;
            let e_o = StereoFeature::from_points(&po, rig)?.s - sg.s;
            let (e_t_norm, e_o_norm) = (e_t.norm(), e_o.norm());
            let gain_t = gains.translation_gain(e_t_norm);
            let gain_o = gains.orientation_gain(e_o_norm);
            let v = if e_t_norm == 0.0 {
                Vector3::zeros()
            } else {
                let jt = image_jacobian(&pt, &xt.position(), rig)?;
                (damped_pseudo_inverse_solve(&jt, &e_t)? * -gain_t).fixed_rows::<3>(0).into_owned()
            };
            let w = if e_o_norm == 0.0 {
                Vector3::zeros()
            } else {
                let jo = image_jacobian(&po, &xo.position(), rig)?;
                (damped_pseudo_inverse_solve(&jo, &e_o)? * -gain_o).fixed_rows::<3>(3).into_owned()
            };
            Ok(ControlOutput {
                twist: Twist::new(v, w),
                error_norm,
                e_t_norm,
                e_o_norm,
                gain_t,
                gain_o,
            })
        }
        _ => {
            let e = se.s - sg.s;
            let gain_t = gains.translation_gain(error_norm);
            let gain_o = gains.orientation_gain(error_norm);
            if error_norm == 0.0 {
                return Ok(ControlOutput {
                    twist: Twist::zero(),
                    error_norm,
                    e_t_norm: error_norm,
                    e_o_norm: error_norm,
                    gain_t,
                    gain_o,
                });
            }
            let je = || image_jacobian(&feature_points(xe, half_side), &xe.position(), rig);
            let jg = || image_jacobian(&feature_points(xg, half_side), &xg.position(), rig);
            let j = match choice {
                JacobianChoice::Current => je()?,
                JacobianChoice::Goal => jg()?,
                _ => (je()? + jg()?) * 0.5,
            };
            let x = damped_pseudo_inverse_solve(&j, &e)?;
            Ok(ControlOutput {
                twist: Twist::new(x.fixed_rows::<3>(0) * -gain_t, x.fixed_rows::<3>(3) * -gain_o),
                error_norm,
                e_t_norm: error_norm,
                e_o_norm: error_norm,
                gain_t,
                gain_o,
            })
        }
    }
}

/// Something the servo loop can steer: it reports a pose estimate and
/// executes commanded twists.
pub trait Plant {
    type Error;
    fn feedback(&mut self) -> Result<Pose7, Self::Error>;
    fn apply(&mut self, twist: &Twist, dt: f64) -> Result<(), Self::Error>;
}

/// Plant whose pose follows the commands exactly and is fed back verbatim.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicPlant {
    pub pose: Pose7,
}

impl Plant for KinematicPlant {
    type Error = core::convert::Infallible;

    fn feedback(&mut self) -> Result<Pose7, Self::Error> {
        Ok(self.pose)
    }

    fn apply(&mut self, twist: &Twist, dt: f64) -> Result<(), Self::Error> {
        self.pose = integrate_twist(&self.pose, twist, dt);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoConfig {
    pub gains: ServoGains,
    /// Control period, seconds.
    pub dt: f64,
    pub max_iters: usize,
    pub half_side: f64,
    pub jacobian: JacobianChoice,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            gains: ServoGains::default(),
            dt: 0.05,
            max_iters: 500,
            half_side: DEFAULT_HALF_SIDE,
            jacobian: JacobianChoice::Decoupled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServoStep {
    pub iteration: usize,
    /// Feedback pose used at this step.
    pub estimate: Pose7,
    pub features: FeatureVector,
    pub control: ControlOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServoTrace {
    pub goal: FeatureVector,
    pub steps: Vec<ServoStep>,
    /// Feedback pose and features at termination.
    pub final_estimate: Pose7,
    pub final_features: FeatureVector,
    pub final_error: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ServoTrace {
    pub fn ensure_converged(&self) -> Result<(), ServoError> {
        if self.converged {
            Ok(())
        } else {
            Err(ServoError::DidNotConverge {
                iterations: self.iterations,
                error_norm: self.final_error,
            })
        }
    }

    /// Error norms of the feedback features at each step, then at
    /// termination.
    pub fn error_norms(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.steps.iter().map(|s| s.control.error_norm).collect();
        v.push(self.final_error);
        v
    }

    /// Length of the Cartesian path traced by the feedback position.
    pub fn path_length(&self) -> f64 {
        let mut prev = match self.steps.first() {
            Some(s) => s.estimate.position(),
            None => return 0.0,
        };
        let mut total = 0.0;
        for p in self.steps.iter().skip(1).map(|s| s.estimate.position()).chain(core::iter::once(self.final_estimate.position())) {
            total += (p - prev).norm();
            prev = p;
        }
        total
    }

    /// Whether the feedback features stayed inside both images throughout.
    pub fn stays_in_frame(&self, rig: &StereoRig) -> bool {
        self.steps.iter().all(|s| features_in_frame(&s.features, rig)) && features_in_frame(&self.final_features, rig)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoopError<E> {
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error("plant failure: {0}")]
    Plant(E),
}

/// Runs `control_step → plant.apply` until the feedback features are within
/// `ε` of the goal or `max_iters` commands have been issued.
pub fn servo_loop<P: Plant>(plant: &mut P, goal: &Pose7, rig: &StereoRig, cfg: &ServoConfig) -> Result<ServoTrace, LoopError<P::Error>> {
    cfg.gains.validate()?;
    let sg = make_feature(goal, rig, cfg.half_side)?;
    let mut steps = Vec::new();
    let mut iteration = 0;
    loop {
        let xe = plant.feedback().map_err(LoopError::Plant)?;
        let se = make_feature(&xe, rig, cfg.half_side)?;
        let error = (se.s - sg.s).norm();
        if error < cfg.gains.epsilon || iteration >= cfg.max_iters {
            return Ok(ServoTrace {
                goal: sg.s,
                steps,
                final_estimate: xe,
                final_features: se.s,
                final_error: error,
                iterations: iteration,
                converged: error < cfg.gains.epsilon,
            });
        }
        let control = control_step(&xe, goal, &cfg.gains, rig, cfg.jacobian, cfg.half_side)?;
        steps.push(ServoStep {
            iteration,
            estimate: xe,
            features: se.s,
            control,
        });
        plant.apply(&control.twist, cfg.dt).map_err(LoopError::Plant)?;
        iteration += 1;
    }
}

/// Drives a kinematic plant from `start` to `goal` once per Jacobian choice.
pub fn compare_jacobians(start: &Pose7, goal: &Pose7, rig: &StereoRig, cfg: &ServoConfig) -> Vec<(JacobianChoice, Result<ServoTrace, ServoError>)> {
    JacobianChoice::ALL
        .iter()
        .map(|&choice| {
            let cfg = ServoConfig { jacobian: choice, ..*cfg };
            let mut plant = KinematicPlant { pose: *start };
            let run = servo_loop(&mut plant, goal, rig, &cfg).map_err(|e| match e {
                LoopError::Servo(s) => s,
                LoopError::Plant(never) => match never {},
            });
            (choice, run)
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Pose near the default fixation point with the square facing the
    /// cameras, perturbed by up to `dp` meters and `da` radians.
    pub(crate) fn random_visible_pose<R: Rng>(rng: &mut R, dp: f64, da: f64) -> Pose7 {
        let rig = StereoRig::default();
        loop {
            let base = facing_pose(Vector3::new(-0.3, 0.08, 0.05));
            let p = base.position() + Vector3::new(rng.random_range(-dp..dp), rng.random_range(-dp..dp), rng.random_range(-dp..dp));
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let Some(axis) = axis.try_normalize(1e-9) else { continue };
            let r = Rotation3::new(axis * rng.random_range(0.0..da)) * base.rotation();
            let x = Pose7::new(p, r);
            if let Ok(f) = make_feature(&x, &rig, DEFAULT_HALF_SIDE) {
                if f.in_frame(&rig) {
                    return x;
                }
            }
        }
    }

    /// Pose at `p` whose local z-axis points at the left camera.
    pub(crate) fn facing_pose(p: Vector3<f64>) -> Pose7 {
        super::facing_pose(&p, &StereoRig::default())
    }

    #[test]
    fn corners_are_counter_clockwise() {
        let p = feature_points(&Pose7::identity(), 0.04);
        assert_eq!(p[0], Vector3::new(0.04, 0.04, 0.0));
        assert_eq!(p[1], Vector3::new(-0.04, 0.04, 0.0));
        assert_eq!(p[2], Vector3::new(-0.04, -0.04, 0.0));
        assert_eq!(p[3], Vector3::new(0.04, -0.04, 0.0));
        for i in 0..4 {
            let a = p[i];
            let b = p[(i + 1) % 4];
            assert!(a.cross(&b).z > 0.0);
        }
        let t = Vector3::new(0.1, 0.2, 0.3);
        let moved = feature_points(&Pose7::from_translation(t), 0.04);
        for i in 0..4 {
            assert_eq!(moved[i], p[i] + t);
        }
        let turned = feature_points(&Pose7::from_axis_angle(Vector3::zeros(), Vector3::z(), core::f64::consts::PI), 0.04);
        for i in 0..4 {
            assert_relative_eq!(turned[i], p[(i + 2) % 4], epsilon = 1e-15);
        }
    }

    #[test]
    fn feature_packing_matches_single_projection() {
        let rig = StereoRig::default();
        let x = facing_pose(Vector3::new(-0.3, 0.08, 0.05));
        let f = make_feature(&x, &rig, 0.04).unwrap();
        let p = feature_points(&x, 0.04);
        for i in 0..4 {
            let l = rig.left.projection_matrix() * p[i].push(1.0);
            let r = rig.right.projection_matrix() * p[i].push(1.0);
            assert_relative_eq!(f.s[4 * i], l.x / l.z, epsilon = 1e-9);
            assert_relative_eq!(f.s[4 * i + 1], r.x / r.z, epsilon = 1e-9);
            assert_relative_eq!(f.s[4 * i + 2], l.y / l.z, epsilon = 1e-9);
            assert_relative_eq!(f.s[4 * i + 3], r.y / r.z, epsilon = 1e-9);
            assert_relative_eq!(f.depths[i][0], l.z, epsilon = 1e-12);
        }
        assert_eq!(make_feature(&x, &rig, 0.04).unwrap().s, f.s);
    }

    #[test]
    fn fixation_point_projects_near_center() {
        let rig = StereoRig::default();
        let f = make_feature(&facing_pose(Vector3::new(-0.3, 0.08, 0.05)), &rig, 0.001).unwrap();
        for i in 0..4 {
            let (u, v) = f.left(i);
            assert!((u - 160.0).abs() < 2.0 && (v - 120.0).abs() < 2.0, "{u} {v}");
            let (u, v) = f.right(i);
            assert!((u - 160.0).abs() < 2.0 && (v - 120.0).abs() < 2.0, "{u} {v}");
        }
    }

    #[test]
    fn behind_camera_is_reported() {
        let rig = StereoRig::default();
        let x = Pose7::from_translation(rig.left.pose().position() - rig.left.pose().rotation() * Vector3::new(0.0, 0.0, 0.2));
        assert!(matches!(make_feature(&x, &rig, 0.04), Err(ServoError::FeatureNotVisible { .. })));
    }

    pub(crate) fn finite_difference_jacobian(x: &Pose7, rig: &StereoRig) -> ImageJacobian {
        let h = 1e-6;
        let mut j = ImageJacobian::zeros();
        for k in 0..6 {
            let mut t = Vector6::zeros();
            t[k] = 1.0;
            let tw = Twist::from_vector(&t);
            let plus = make_feature(&integrate_twist(x, &tw, h), rig, DEFAULT_HALF_SIDE).unwrap().s;
            let minus = make_feature(&integrate_twist(x, &tw, -h), rig, DEFAULT_HALF_SIDE).unwrap().s;
            j.set_column(k, &((plus - minus) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let rig = StereoRig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = random_visible_pose(&mut rng, 0.1, 0.8);
            let j = image_jacobian(&feature_points(&x, DEFAULT_HALF_SIDE), &x.position(), &rig).unwrap();
            let fd = finite_difference_jacobian(&x, &rig);
            let scale = j.amax();
            for (a, n) in j.iter().zip(fd.iter()) {
                assert!((a - n).abs() <= 1e-3 * a.abs().max(n.abs()).max(1e-3 * scale), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn jacobian_signs_and_zero_twist() {
        let rig = StereoRig::default();
        let x = facing_pose(Vector3::new(-0.3, 0.08, 0.05));
        let j = image_jacobian(&feature_points(&x, 0.04), &x.position(), &rig).unwrap();
        assert_eq!(j * Vector6::zeros(), FeatureVector::zeros());
        // moving along the left camera's image x-axis moves every u the same way
        let right = rig.left.pose().rotation() * Vector3::x();
        let du = j * Vector6::new(right.x, right.y, right.z, 0.0, 0.0, 0.0);
        for i in 0..4 {
            assert!(du[4 * i] > 0.0 && du[4 * i + 1] > 0.0);
        }
    }

    #[test]
    fn control_at_goal_is_zero() {
        let rig = StereoRig::default();
        let x = facing_pose(Vector3::new(-0.3, 0.08, 0.05));
        let out = control_step(&x, &x, &ServoGains::default(), &rig, JacobianChoice::Decoupled, 0.04).unwrap();
        assert_eq!(out.twist, Twist::zero());
    }

    #[test]
    fn decoupling_is_exact() {
        let rig = StereoRig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let g = random_visible_pose(&mut rng, 0.05, 0.4);
            let e = random_visible_pose(&mut rng, 0.05, 0.4);
            let same_rotation = Pose7::new(e.position(), *g.rotation());
            let out = control_step(&same_rotation, &g, &ServoGains::default(), &rig, JacobianChoice::Decoupled, 0.04).unwrap();
            assert_eq!(out.twist.angular, Vector3::zeros());
            assert!(out.twist.linear.norm() > 0.0);
            let same_position = Pose7::new(g.position(), *e.rotation());
            let out = control_step(&same_position, &g, &ServoGains::default(), &rig, JacobianChoice::Decoupled, 0.04).unwrap();
            assert_eq!(out.twist.linear, Vector3::zeros());
        }
    }

    #[test]
    fn gain_schedule_boundary() {
        let g = ServoGains::default();
        assert_eq!(g.translation_gain(10.1), 0.5);
        assert_eq!(g.translation_gain(10.0), 0.5);
        assert_eq!(g.translation_gain(9.9), 0.25);
        assert_eq!(g.orientation_gain(10.1), 3.5);
        assert_eq!(g.orientation_gain(9.9), 0.5);
        assert!(ServoGains { kt2: 0.6, ..g }.validate().is_err());
    }

    #[test]
    fn start_at_goal_terminates_immediately() {
        let rig = StereoRig::default();
        let x = facing_pose(Vector3::new(-0.3, 0.08, 0.05));
        let mut plant = KinematicPlant { pose: x };
        let trace = servo_loop(&mut plant, &x, &rig, &ServoConfig::default()).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.iterations, 0);
    }

    #[test]
    fn translation_goal_converges_monotonically() {
        let rig = StereoRig::default();
        let goal = facing_pose(Vector3::new(-0.3, 0.08, 0.05));
        let start = Pose7::new(goal.position() + Vector3::new(0.03, -0.03, 0.025), *goal.rotation());
        assert!((start.position() - goal.position()).norm() > 0.049);
        let mut plant = KinematicPlant { pose: start };
        let cfg = ServoConfig { max_iters: 300, ..ServoConfig::default() };
        let trace = servo_loop(&mut plant, &goal, &rig, &cfg).unwrap();
        assert!(trace.converged, "{}", trace.final_error);
        let e = trace.error_norms();
        for k in 1..e.len() - 1 {
            assert!(e[k + 1] <= e[k], "step {k}: {} -> {}", e[k], e[k + 1]);
        }
    }

    #[test]
    fn experiment_two_poses_converge() {
        let rig = StereoRig::default();
        let start = Pose7::from_array([-0.28, 0.12, 0.13, 0.131, -0.492, 0.86, 2.962]);
        let goal = Pose7::from_array([-0.28, 0.08, 0.03, 0.213, -0.94, 0.265, 2.911]);
        let mut plant = KinematicPlant { pose: start };
        let trace = servo_loop(&mut plant, &goal, &rig, &ServoConfig::default()).unwrap();
        assert!(trace.converged, "{} after {}", trace.final_error, trace.iterations);
    }
}
