//! Superellipsoid model: inside-outside function, surface sampling and
//! least-squares recovery from point clouds.

mod fit;

pub use fit::{fit_cost, fit_superquadric, fit_superquadric_with, FitError, FitOptions, FitReport, StopReason};

use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};
use nalgebra::Vector3;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose7, RpyPose};

/// Admissible semi-axis range, meters.
pub const SEMI_AXIS_BOUNDS: (f64, f64) = (0.005, 0.5);
/// Admissible exponent range for λ₄ and λ₅.
pub const EXPONENT_BOUNDS: (f64, f64) = (0.1, 1.9);
/// Names of the eleven parameters, in [`Superquadric::to_array`] order.
pub const PARAMETER_NAMES: [&str; 11] = [
    "lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "x", "y", "z", "roll", "pitch", "yaw",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SuperquadricError {
    #[error("semi-axis {index} = {value} m outside [{}, {}]", SEMI_AXIS_BOUNDS.0, SEMI_AXIS_BOUNDS.1)]
    SemiAxisOutOfBounds { index: usize, value: f64 },
    #[error("exponent {index} = {value} outside [{}, {}]", EXPONENT_BOUNDS.0, EXPONENT_BOUNDS.1)]
    ExponentOutOfBounds { index: usize, value: f64 },
    #[error("sampling counts must be at least 2")]
    TooFewSamples,
    #[error("visibility culling removed every point")]
    EmptyCloud,
}

/// Superellipsoid with semi-axes λ₁..λ₃, exponents λ₄ (along z) and λ₅
/// (in the x-y plane), and an object-centered pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Superquadric {
    semi_axes: Vector3<f64>,
    exponents: [f64; 2],
    pose: RpyPose,
}

impl Superquadric {
    pub fn new(semi_axes: Vector3<f64>, exponents: [f64; 2], pose: RpyPose) -> Result<Self, SuperquadricError> {
        for (index, &value) in semi_axes.iter().enumerate() {
            if !(SEMI_AXIS_BOUNDS.0..=SEMI_AXIS_BOUNDS.1).contains(&value) {
                return Err(SuperquadricError::SemiAxisOutOfBounds { index, value });
            }
        }
        for (index, &value) in exponents.iter().enumerate() {
            if !(EXPONENT_BOUNDS.0..=EXPONENT_BOUNDS.1).contains(&value) {
                return Err(SuperquadricError::ExponentOutOfBounds { index: index + 3, value });
            }
        }
        Ok(Self {
            semi_axes,
            exponents,
            pose,
        })
    }

    /// Sphere of the given radius at `center`.
    pub fn sphere(radius: f64, center: Vector3<f64>) -> Result<Self, SuperquadricError> {
        Self::new(
            Vector3::repeat(radius),
            [1.0, 1.0],
            RpyPose::new(center, 0.0, 0.0, 0.0),
        )
    }

    /// `[λ₁, λ₂, λ₃, λ₄, λ₅, x, y, z, roll, pitch, yaw]`.
    pub fn to_array(&self) -> [f64; 11] {
        let p = self.pose.to_array();
        [
            self.semi_axes.x,
            self.semi_axes.y,
            self.semi_axes.z,
            self.exponents[0],
            self.exponents[1],
            p[0],
            p[1],
            p[2],
            p[3],
            p[4],
            p[5],
        ]
    }

    pub fn from_array(a: [f64; 11]) -> Result<Self, SuperquadricError> {
        Self::new(
            Vector3::new(a[0], a[1], a[2]),
            [a[3], a[4]],
            RpyPose::from_array([a[5], a[6], a[7], a[8], a[9], a[10]]),
        )
    }

    pub fn semi_axes(&self) -> Vector3<f64> {
        self.semi_axes
    }

    /// `[λ₄, λ₅]`.
    pub fn exponents(&self) -> [f64; 2] {
        self.exponents
    }

    pub fn pose(&self) -> &RpyPose {
        &self.pose
    }

    pub fn with_pose(&self, pose: RpyPose) -> Self {
        Self { pose, ..*self }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.origin
    }

    /// Object frame in the root frame.
    pub fn frame(&self) -> Pose7 {
        self.pose.to_pose7()
    }

    /// `λ₁·λ₂·λ₃`, proportional to the enclosed volume.
    pub fn volume_factor(&self) -> f64 {
        self.semi_axes.x * self.semi_axes.y * self.semi_axes.z
    }

    /// Inside-outside function at a root-frame point.
    pub fn inside_outside(&self, point: &Vector3<f64>) -> f64 {
        let q = self.frame().inverse_transform_point(point);
        shape_value(&self.semi_axes, self.exponents[0], self.exponents[1], &q)
    }

    /// Same as [`Self::inside_outside`] with the object frame precomputed.
    pub fn inside_outside_in(&self, frame: &Pose7, point: &Vector3<f64>) -> f64 {
        let q = frame.inverse_transform_point(point);
        shape_value(&self.semi_axes, self.exponents[0], self.exponents[1], &q)
    }
}

/// Free-function form of [`Superquadric::inside_outside`].
pub fn inside_outside(sq: &Superquadric, point: &Vector3<f64>) -> f64 {
    sq.inside_outside(point)
}

/// Inside-outside value for an object-frame point.
///
/// Bases are taken in absolute value so fractional powers stay real; the
/// object-frame origin evaluates to 0.
pub fn shape_value(axes: &Vector3<f64>, e4: f64, e5: f64, q: &Vector3<f64>) -> f64 {
    let px = (q.x / axes.x).abs().powf(2.0 / e5);
    let py = (q.y / axes.y).abs().powf(2.0 / e5);
    let pz = (q.z / axes.z).abs().powf(2.0 / e4);
    (px + py).powf(e5 / e4) + pz
}

/// Inside-outside value with its partial derivatives.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ShapeGradient {
    pub value: f64,
    /// ∂F/∂q in the object frame.
    pub d_point: Vector3<f64>,
    pub d_axes: Vector3<f64>,
    pub d_e4: f64,
    pub d_e5: f64,
}

pub(crate) fn shape_gradient(axes: &Vector3<f64>, e4: f64, e5: f64, q: &Vector3<f64>) -> ShapeGradient {
    let tx = (q.x / axes.x).abs();
    let ty = (q.y / axes.y).abs();
    let tz = (q.z / axes.z).abs();
    let px = tx.powf(2.0 / e5);
    let py = ty.powf(2.0 / e5);
    let pz = tz.powf(2.0 / e4);
    let a = px + py;
    let g = a.powf(e5 / e4);
    let value = g + pz;

    let ln_or_zero = |t: f64| if t > 0.0 { t.ln() } else { 0.0 };
    let over = |p: f64, x: f64| if x != 0.0 { p / x } else { 0.0 };

    let dg_da = if a > 0.0 { (e5 / e4) * g / a } else { 0.0 };
    let ln_a = ln_or_zero(a);

    let d_point = Vector3::new(
        dg_da * (2.0 / e5) * over(px, q.x),
        dg_da * (2.0 / e5) * over(py, q.y),
        (2.0 / e4) * over(pz, q.z),
    );
    let d_axes = Vector3::new(
        -dg_da * (2.0 / e5) * px / axes.x,
        -dg_da * (2.0 / e5) * py / axes.y,
        -(2.0 / e4) * pz / axes.z,
    );
    let dpx_de5 = -(2.0 / (e5 * e5)) * px * ln_or_zero(tx);
    let dpy_de5 = -(2.0 / (e5 * e5)) * py * ln_or_zero(ty);
    let d_e5 = dg_da * (dpx_de5 + dpy_de5) + g * ln_a / e4;
    let d_e4 = -g * ln_a * e5 / (e4 * e4) - (2.0 / (e4 * e4)) * pz * ln_or_zero(tz);
    ShapeGradient {
        value,
        d_point,
        d_axes,
        d_e4,
        d_e5,
    }
}

fn signed_pow(x: f64, e: f64) -> f64 {
    x.signum() * x.abs().powf(e)
}

/// Where the observer of a partial cloud sits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Viewpoint {
    /// Parallel projection along a direction pointing toward the observer.
    Direction(Vector3<f64>),
    /// Observer at a root-frame position.
    Position(Vector3<f64>),
}

/// Points from the parametric superellipsoid surface, optionally keeping only
/// those whose outward normal faces the viewpoint.
///
/// `η` spans `[−π/2, π/2]` with `n_eta` samples (each pole emitted once) and
/// `ω` spans `[−π, π)` with `n_omega` samples.
pub fn sample_surface(
    sq: &Superquadric,
    n_eta: usize,
    n_omega: usize,
    visibility: Option<Viewpoint>,
) -> Result<PointCloud, SuperquadricError> {
    if n_eta < 2 || n_omega < 2 {
        return Err(SuperquadricError::TooFewSamples);
    }
    let frame = sq.frame();
    let [e4, e5] = sq.exponents;
    let ax = sq.semi_axes;
    let mut points = Vec::with_capacity(n_eta * n_omega);
    for i in 0..n_eta {
        let eta = -FRAC_PI_2 + PI * i as f64 / (n_eta - 1) as f64;
        let pole = i == 0 || i == n_eta - 1;
        let (se, ce) = if pole { (eta.signum(), 0.0) } else { eta.sin_cos() };
        for j in 0..n_omega {
            if pole && j > 0 {
                break;
            }
            let omega = -PI + 2.0 * PI * j as f64 / n_omega as f64;
            let (so, co) = omega.sin_cos();
            let local = Vector3::new(
                ax.x * signed_pow(ce, e4) * signed_pow(co, e5),
                ax.y * signed_pow(ce, e4) * signed_pow(so, e5),
                ax.z * signed_pow(se, e4),
            );
            let world = frame.transform_point(&local);
            if let Some(view) = visibility {
                let normal_local = Vector3::new(
                    signed_pow(ce, 2.0 - e4) * signed_pow(co, 2.0 - e5) / ax.x,
                    signed_pow(ce, 2.0 - e4) * signed_pow(so, 2.0 - e5) / ax.y,
                    signed_pow(se, 2.0 - e4) / ax.z,
                );
                let normal = frame.rotation() * normal_local;
                let toward = match view {
                    Viewpoint::Direction(d) => d,
                    Viewpoint::Position(p) => p - world,
                };
                if normal.dot(&toward) <= 0.0 {
                    continue;
                }
            }
            points.push(world);
        }
    }
    if points.is_empty() {
        return Err(SuperquadricError::EmptyCloud);
    }
    Ok(PointCloud::new(points))
}

/// Unordered 3D points in the root frame, meters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let sum: Vector3<f64> = self.points.iter().sum();
        sum / self.points.len().max(1) as f64
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.max((a - b).norm_squared());
            }
        }
        best.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sq(rng: &mut ChaCha8Rng) -> Superquadric {
        Superquadric::new(
            Vector3::new(
                rng.random_range(0.01..0.2),
                rng.random_range(0.01..0.2),
                rng.random_range(0.01..0.2),
            ),
            [rng.random_range(0.1..1.9), rng.random_range(0.1..1.9)],
            RpyPose::new(
                Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ),
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            ),
        )
        .unwrap()
    }

    #[test]
    fn sphere_values() {
        let s = Superquadric::sphere(0.1, Vector3::zeros()).unwrap();
        assert_relative_eq!(s.inside_outside(&Vector3::new(0.1, 0.0, 0.0)), 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.inside_outside(&Vector3::new(0.2, 0.0, 0.0)), 4.0, epsilon = 1e-12);
        assert_eq!(s.inside_outside(&Vector3::zeros()), 0.0);
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let sq = random_sq(&mut rng);
            let p = Vector3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            );
            // oracle: explicit RPY matrices, transpose applied by hand
            let [_, _, _, l4, l5, x0, y0, z0, r, pi, ya] = sq.to_array();
            let (sr, cr) = r.sin_cos();
            let (sp, cp) = pi.sin_cos();
            let (sy, cy) = ya.sin_cos();
            let m = nalgebra::Matrix3::new(
                cy * cp,
                cy * sp * sr - sy * cr,
                cy * sp * cr + sy * sr,
                sy * cp,
                sy * sp * sr + cy * cr,
                sy * sp * cr - cy * sr,
                -sp,
                cp * sr,
                cp * cr,
            );
            let q = m.transpose() * (p - Vector3::new(x0, y0, z0));
            let a = sq.semi_axes();
            let oracle = ((q.x / a.x).abs().powf(2.0 / l5) + (q.y / a.y).abs().powf(2.0 / l5)).powf(l5 / l4)
                + (q.z / a.z).abs().powf(2.0 / l4);
            assert_relative_eq!(sq.inside_outside(&p), oracle, max_relative = 1e-10);
        }
    }

    #[test]
    fn rigid_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let sq = random_sq(&mut rng);
            let p = sq.center()
                + Vector3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                );
            let g = RpyPose::new(
                Vector3::new(0.3, -0.2, 0.1),
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            )
            .to_pose7();
            let moved = sq.with_pose(RpyPose::from_pose7(&g.compose(&sq.frame())));
            let f0 = sq.inside_outside(&p);
            let f1 = moved.inside_outside(&g.transform_point(&p));
            assert!((f0 - f1).abs() < 1e-9 * f0.max(1.0));

            let s = rng.random_range(0.5..2.0);
            let q = sq.frame().inverse_transform_point(&p);
            let [e4, e5] = sq.exponents();
            let f2 = shape_value(&(sq.semi_axes() * s), e4, e5, &(q * s));
            assert!((f0 - f2).abs() < 1e-9 * f0.max(1.0));
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        for _ in 0..100 {
            let axes = Vector3::new(
                rng.random_range(0.02..0.2),
                rng.random_range(0.02..0.2),
                rng.random_range(0.02..0.2),
            );
            let e4 = rng.random_range(0.2..1.8);
            let e5 = rng.random_range(0.2..1.8);
            let q = Vector3::new(
                axes.x * rng.random_range(-1.2..1.2),
                axes.y * rng.random_range(-1.2..1.2),
                axes.z * rng.random_range(-1.2..1.2),
            );
            let g = shape_gradient(&axes, e4, e5, &q);
            assert_relative_eq!(g.value, shape_value(&axes, e4, e5, &q), max_relative = 1e-14);
            let check = |analytic: f64, plus: f64, minus: f64| {
                let numeric = (plus - minus) / (2.0 * h);
                let scale = analytic.abs().max(numeric.abs()).max(1e-3 * g.value.max(1.0));
                assert!((analytic - numeric).abs() / scale < 1e-4, "{analytic} vs {numeric}");
            };
            for k in 0..3 {
                let mut dq = Vector3::zeros();
                dq[k] = h * q[k].abs();
                let step = dq[k];
                let numeric_plus = shape_value(&axes, e4, e5, &(q + dq));
                let numeric_minus = shape_value(&axes, e4, e5, &(q - dq));
                check(g.d_point[k] * step / h, numeric_plus, numeric_minus);
                let mut da = Vector3::zeros();
                da[k] = h;
                check(
                    g.d_axes[k],
                    shape_value(&(axes + da), e4, e5, &q),
                    shape_value(&(axes - da), e4, e5, &q),
                );
            }
            check(g.d_e4, shape_value(&axes, e4 + h, e5, &q), shape_value(&axes, e4 - h, e5, &q));
            check(g.d_e5, shape_value(&axes, e4, e5 + h, &q), shape_value(&axes, e4, e5 - h, &q));
        }
    }

    #[test]
    fn sampled_sphere_points() {
        let c = Vector3::new(0.1, 0.2, 0.3);
        let s = Superquadric::sphere(0.1, c).unwrap();
        let cloud = sample_surface(&s, 12, 16, None).unwrap();
        assert_eq!(cloud.len(), 10 * 16 + 2);
        for p in &cloud.points {
            assert!(((p - c).norm() - 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn culling_keeps_the_facing_hemisphere() {
        let s = Superquadric::sphere(0.1, Vector3::zeros()).unwrap();
        let cloud = sample_surface(&s, 20, 20, Some(Viewpoint::Direction(Vector3::x()))).unwrap();
        assert!(!cloud.is_empty());
        // for a sphere the outward normal is the point direction
        assert!(cloud.points.iter().all(|p| p.x > 0.0));
        let err = sample_surface(
            &s,
            4,
            4,
            Some(Viewpoint::Direction(Vector3::zeros())),
        );
        assert_eq!(err, Err(SuperquadricError::EmptyCloud));
        assert_eq!(sample_surface(&s, 1, 4, None), Err(SuperquadricError::TooFewSamples));
    }

    #[test]
    fn sampled_points_lie_on_surface() {
        let boxy = Superquadric::new(
            Vector3::new(0.05, 0.03, 0.08),
            [0.1, 0.1],
            RpyPose::new(Vector3::new(0.1, 0.0, 0.2), 0.3, -0.2, 1.0),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for sq in [boxy, random_sq(&mut rng), random_sq(&mut rng)] {
            let cloud = sample_surface(&sq, 25, 40, None).unwrap();
            for p in &cloud.points {
                assert!((sq.inside_outside(p) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bounds_are_enforced() {
        assert!(matches!(
            Superquadric::new(Vector3::new(0.001, 0.1, 0.1), [1.0, 1.0], RpyPose::identity()),
            Err(SuperquadricError::SemiAxisOutOfBounds { index: 0, .. })
        ));
        assert!(matches!(
            Superquadric::new(Vector3::repeat(0.1), [1.0, 2.0], RpyPose::identity()),
            Err(SuperquadricError::ExponentOutOfBounds { index: 4, .. })
        ));
        let sq = Superquadric::sphere(0.1, Vector3::new(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(Superquadric::from_array(sq.to_array()).unwrap(), sq);
    }
}
