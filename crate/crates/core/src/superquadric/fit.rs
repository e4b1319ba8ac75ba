//! Levenberg–Marquardt recovery of a superquadric from a point cloud.
//!
//! Residuals are `r_i = √(λ₁λ₂λ₃)·(F(m_i, λ) − 1)`. Bounds are handled by
//! reparameterization: semi-axes through their logarithm, exponents through
//! a logistic squashed onto [`EXPONENT_BOUNDS`], position unconstrained and
//! orientation as a right-multiplied rotation-vector increment.

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, SymmetricEigen, Vector3};
#[allow(unused_imports)]
use num_traits::Float;
use thiserror::Error;

use super::{shape_gradient, shape_value, PointCloud, Superquadric, EXPONENT_BOUNDS, SEMI_AXIS_BOUNDS};
use crate::geometry::{Pose7, RpyPose};

const NPARAM: usize = 11;
type Param = SVector<f64, NPARAM>;
type Normal = SMatrix<f64, NPARAM, NPARAM>;

/// Minimum number of points accepted by the fitter.
pub const MIN_FIT_POINTS: usize = 30;
/// Minimum cloud diameter accepted by the fitter, meters.
pub const MIN_FIT_DIAMETER: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("cloud has {0} points, at least {MIN_FIT_POINTS} required")]
    TooFewPoints(usize),
    #[error("cloud diameter {0} m below {MIN_FIT_DIAMETER} m")]
    CloudTooSmall(f64),
    #[error("point covariance is rank-deficient (points collinear or coplanar)")]
    DegenerateCloud,
    #[error("optimizer did not converge in {iterations} iterations (cost {cost})")]
    FitDiverged { iterations: usize, cost: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Absolute tolerance on the infinity norm of `Jᵀr`.
    pub gradient_tolerance: f64,
    /// Relative tolerance on the parameter step.
    pub step_tolerance: f64,
    /// Relative tolerance on the cost decrease of an accepted step.
    pub cost_tolerance: f64,
    /// Also try the two other assignments of principal axes to the model
    /// z-axis and keep the cheapest result.
    pub axis_restarts: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-14,
            step_tolerance: 1e-10,
            cost_tolerance: 1e-12,
            axis_restarts: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopReason {
    Gradient,
    Step,
    Cost,
    /// Damping grew without bound: no descent direction at working precision.
    Stalled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    /// Sum of squared residuals at the solution.
    pub cost: f64,
    pub iterations: usize,
    /// Root mean square of `F − 1` (without the volume factor).
    pub residual_rms: f64,
    pub stop: StopReason,
    /// Index of the principal-axis assignment that won.
    pub start: usize,
}

/// Sum over the cloud of `(√(λ₁λ₂λ₃)·(F − 1))²`.
pub fn fit_cost(sq: &Superquadric, cloud: &PointCloud) -> f64 {
    let frame = sq.frame();
    let sv = sq.volume_factor();
    cloud
        .points
        .iter()
        .map(|p| {
            let f = sq.inside_outside_in(&frame, p);
            sv * (f - 1.0) * (f - 1.0)
        })
        .sum()
}

pub fn fit_superquadric(cloud: &PointCloud, noise_floor: f64) -> Result<(Superquadric, FitReport), FitError> {
    fit_superquadric_with(cloud, noise_floor, &FitOptions::default())
}

/// Fits a superquadric to `cloud`. `noise_floor` (meters) bounds the initial
/// semi-axes from below so that thin clouds do not start collapsed.
pub fn fit_superquadric_with(
    cloud: &PointCloud,
    noise_floor: f64,
    opts: &FitOptions,
) -> Result<(Superquadric, FitReport), FitError> {
    if cloud.len() < MIN_FIT_POINTS {
        return Err(FitError::TooFewPoints(cloud.len()));
    }
    let diameter = cloud.diameter();
    if !(diameter >= MIN_FIT_DIAMETER) {
        return Err(FitError::CloudTooSmall(diameter));
    }
    let centroid = cloud.centroid();
    let mut cov = Matrix3::zeros();
    for p in &cloud.points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= cloud.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if eig.eigenvalues[order[2]].max(0.0).sqrt() <= 1e-9 {
        return Err(FitError::DegenerateCloud);
    }
    let axes = [
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ];

    let starts: &[[usize; 3]] = if opts.axis_restarts {
        &[[0, 1, 2], [1, 2, 0], [2, 0, 1]]
    } else {
        &[[0, 1, 2]]
    };
    let floor = noise_floor.max(SEMI_AXIS_BOUNDS.0);
    let mut best: Option<(State, FitReport)> = None;
    let mut last_failure = None;
    for (start, perm) in starts.iter().enumerate() {
        let x = axes[perm[0]];
        let y = axes[perm[1]];
        let z = x.cross(&y);
        let rotation = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
        let mut half = Vector3::zeros();
        for k in 0..3 {
            let dir = rotation.matrix().column(k).into_owned();
            let (lo, hi) = cloud.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let s = (p - centroid).dot(&dir);
                (lo.min(s), hi.max(s))
            });
            half[k] = (0.5 * (hi - lo)).clamp(floor, SEMI_AXIS_BOUNDS.1 * 0.99);
        }
        let init = State {
            log_axes: half.map(|h| h.ln()),
            shape: [0.0, 0.0],
            position: centroid,
            rotation,
        };
        match levenberg_marquardt(init, cloud, opts) {
            Ok((state, mut report)) => {
                report.start = start;
                if best.as_ref().map_or(true, |(_, b)| report.cost < b.cost) {
                    best = Some((state, report));
                }
            }
            Err(e) => last_failure = Some(e),
        }
    }
    match best {
        Some((state, report)) => Ok((state.to_superquadric(), report)),
        None => Err(last_failure.unwrap_or(FitError::FitDiverged {
            iterations: opts.max_iterations,
            cost: f64::NAN,
        })),
    }
}

fn logistic(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct State {
    log_axes: Vector3<f64>,
    shape: [f64; 2],
    position: Vector3<f64>,
    rotation: Rotation3<f64>,
}

impl State {
    fn axes(&self) -> Vector3<f64> {
        self.log_axes.map(|l| l.exp().clamp(SEMI_AXIS_BOUNDS.0, SEMI_AXIS_BOUNDS.1))
    }

    fn exponent(&self, k: usize) -> f64 {
        EXPONENT_BOUNDS.0 + (EXPONENT_BOUNDS.1 - EXPONENT_BOUNDS.0) * logistic(self.shape[k])
    }

    fn exponent_slope(&self, k: usize) -> f64 {
        let s = logistic(self.shape[k]);
        (EXPONENT_BOUNDS.1 - EXPONENT_BOUNDS.0) * s * (1.0 - s)
    }

    fn frame(&self) -> Pose7 {
        Pose7::new(self.position, self.rotation)
    }

    fn apply(&self, step: &Param) -> State {
        State {
            log_axes: self.log_axes + step.fixed_rows::<3>(0),
            shape: [self.shape[0] + step[3], self.shape[1] + step[4]],
            position: self.position + step.fixed_rows::<3>(5),
            rotation: crate::geometry::renormalize(
                &(self.rotation * Rotation3::new(step.fixed_rows::<3>(8).into_owned())),
            ),
        }
    }

    fn to_superquadric(self) -> Superquadric {
        Superquadric {
            semi_axes: self.axes(),
            exponents: [self.exponent(0), self.exponent(1)],
            pose: RpyPose::from_rotation(self.position, &self.rotation),
        }
    }

    fn cost(&self, cloud: &PointCloud) -> f64 {
        let axes = self.axes();
        let (e4, e5) = (self.exponent(0), self.exponent(1));
        let frame = self.frame();
        let vol = axes.x * axes.y * axes.z;
        cloud
            .points
            .iter()
            .map(|p| {
                let f = shape_value(&axes, e4, e5, &frame.inverse_transform_point(p));
                vol * (f - 1.0) * (f - 1.0)
            })
            .sum()
    }

    /// Residual and its gradient for one point, in parameter order
    /// `[ln λ₁..₃, s₄, s₅, t, δ]`.
    fn residual_row(&self, axes: &Vector3<f64>, p: &Vector3<f64>) -> (f64, Param) {
        let (e4, e5) = (self.exponent(0), self.exponent(1));
        let q = self.rotation.inverse() * (p - self.position);
        let g = shape_gradient(axes, e4, e5, &q);
        let sv = (axes.x * axes.y * axes.z).sqrt();
        let fm1 = g.value - 1.0;
        let mut row = Param::zeros();
        for k in 0..3 {
            row[k] = 0.5 * sv * fm1 + sv * g.d_axes[k] * axes[k];
        }
        row[3] = sv * g.d_e4 * self.exponent_slope(0);
        row[4] = sv * g.d_e5 * self.exponent_slope(1);
        let dt = -(self.rotation * g.d_point) * sv;
        row.fixed_rows_mut::<3>(5).copy_from(&dt);
        let dr = g.d_point.cross(&q) * sv;
        row.fixed_rows_mut::<3>(8).copy_from(&dr);
        (sv * fm1, row)
    }

    fn linearize(&self, cloud: &PointCloud) -> (Normal, Param, f64) {
        let axes = self.axes();
        let mut jtj = Normal::zeros();
        let mut jtr = Param::zeros();
        let mut cost = 0.0;
        for p in &cloud.points {
            let (r, row) = self.residual_row(&axes, p);
            jtj.ger(1.0, &row, &row, 1.0);
            jtr += row * r;
            cost += r * r;
        }
        (jtj, jtr, cost)
    }
}

fn levenberg_marquardt(
    mut state: State,
    cloud: &PointCloud,
    opts: &FitOptions,
) -> Result<(State, FitReport), FitError> {
    let (mut jtj, mut jtr, mut cost) = state.linearize(cloud);
    let mut mu = 1e-3 * jtj.diagonal().max().max(1e-30);
    let mut nu = 2.0;
    let mut stop = None;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        if jtr.amax() <= opts.gradient_tolerance || cost == 0.0 {
            stop = Some(StopReason::Gradient);
            break;
        }
        let mut a = jtj;
        for k in 0..NPARAM {
            a[(k, k)] += mu * jtj[(k, k)].max(1e-12);
        }
        let step = match a.cholesky() {
            Some(ch) => -ch.solve(&jtr),
            None => {
                mu *= nu;
                nu *= 2.0;
                continue;
            }
        };
        let scale = state.log_axes.norm() + state.position.norm() + 1.0;
        if step.norm() <= opts.step_tolerance * scale {
            stop = Some(StopReason::Step);
            break;
        }
        let trial = state.apply(&step);
        let trial_cost = trial.cost(cloud);
        let predicted = -(2.0 * step.dot(&jtr) + (step.transpose() * jtj * step)[0]);
        let rho = (cost - trial_cost) / predicted;
        if trial_cost.is_finite() && trial_cost < cost && rho > 0.0 {
            let decrease = cost - trial_cost;
            state = trial;
            (jtj, jtr, cost) = state.linearize(cloud);
            mu *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            nu = 2.0;
            if decrease <= opts.cost_tolerance * (cost + decrease) && mu <= 1e-3 {
                stop = Some(StopReason::Cost);
                break;
            }
        } else {
            mu *= nu;
            nu *= 2.0;
            if mu > 1e30 {
                stop = Some(StopReason::Stalled);
                break;
            }
        }
    }
    let Some(stop) = stop else {
        return Err(FitError::FitDiverged { iterations, cost });
    };
    let sq = state.to_superquadric();
    let frame = sq.frame();
    let rms = (cloud
        .points
        .iter()
        .map(|p| (sq.inside_outside_in(&frame, p) - 1.0).powi(2))
        .sum::<f64>()
        / cloud.len() as f64)
        .sqrt();
    Ok((
        state,
        FitReport {
            cost: fit_cost(&sq, cloud),
            iterations,
            residual_rms: rms,
            stop,
            start: 0,
        },
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::superquadric::{sample_surface, Viewpoint};
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as Gauss};

    #[test]
    fn gradient_of_objective_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let truth = Superquadric::new(
            Vector3::new(0.05, 0.03, 0.07),
            [0.6, 1.2],
            RpyPose::new(Vector3::new(0.1, -0.1, 0.2), 0.2, 0.4, -0.3),
        )
        .unwrap();
        let cloud = sample_surface(&truth, 15, 20, None).unwrap();
        for _ in 0..20 {
            let state = State {
                log_axes: Vector3::new(
                    rng.random_range(0.02f64..0.1).ln(),
                    rng.random_range(0.02f64..0.1).ln(),
                    rng.random_range(0.02f64..0.1).ln(),
                ),
                shape: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                position: Vector3::new(0.1, -0.1, 0.2)
                    + Vector3::new(
                        rng.random_range(-0.01..0.01),
                        rng.random_range(-0.01..0.01),
                        rng.random_range(-0.01..0.01),
                    ),
                rotation: Rotation3::new(Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )),
            };
            let (_, jtr, cost) = state.linearize(&cloud);
            assert!((cost - state.cost(&cloud)).abs() <= 1e-12 * cost.max(1e-30));
            let grad = jtr * 2.0;
            let h = 1e-6;
            for k in 0..NPARAM {
                let mut e = Param::zeros();
                e[k] = h;
                let numeric = (state.apply(&e).cost(&cloud) - state.apply(&-e).cost(&cloud)) / (2.0 * h);
                let scale = grad[k].abs().max(numeric.abs()).max(1e-8 * cost.max(1e-12));
                assert!(
                    (grad[k] - numeric).abs() / scale < 1e-4,
                    "param {k}: analytic {} numeric {numeric}",
                    grad[k]
                );
            }
        }
    }

    /// Axis lengths of `fit` matched to the axes of `truth` by direction.
    pub(crate) fn matched_axes(fit: &Superquadric, truth: &Superquadric) -> Vector3<f64> {
        let rf = fit.frame();
        let rt = truth.frame();
        let mut out = Vector3::zeros();
        for k in 0..3 {
            let dir = rt.rotation().matrix().column(k).into_owned();
            let j = (0..3)
                .max_by(|&a, &b| {
                    let da = rf.rotation().matrix().column(a).dot(&dir).abs();
                    let db = rf.rotation().matrix().column(b).dot(&dir).abs();
                    da.total_cmp(&db)
                })
                .unwrap();
            out[k] = fit.semi_axes()[j];
        }
        out
    }

    fn test_object() -> Superquadric {
        Superquadric::new(
            Vector3::new(0.04, 0.03, 0.08),
            [0.4, 0.8],
            RpyPose::new(Vector3::new(-0.3, 0.1, 0.0), 0.1, -0.2, 0.7),
        )
        .unwrap()
    }

    #[test]
    fn recovers_noiseless_full_cloud() {
        let truth = test_object();
        let cloud = sample_surface(&truth, 30, 34, None).unwrap();
        assert!(fit_cost(&truth, &cloud) / (cloud.len() as f64) < 1e-12);
        let (fit, report) = fit_superquadric(&cloud, 0.001).unwrap();
        assert!(report.cost < 1e-8, "{report:?}");
        let axes = matched_axes(&fit, &truth);
        for k in 0..3 {
            assert!((axes[k] / truth.semi_axes()[k] - 1.0).abs() < 0.01, "{axes:?}");
        }
    }

    #[test]
    fn recovers_noisy_cloud_within_five_percent() {
        let truth = test_object();
        let mut cloud = sample_surface(&truth, 30, 34, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = Gauss::new(0.0, 0.001).unwrap();
        for p in &mut cloud.points {
            *p += Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
        }
        let (fit, _) = fit_superquadric(&cloud, 0.001).unwrap();
        let axes = matched_axes(&fit, &truth);
        for k in 0..3 {
            assert!((axes[k] / truth.semi_axes()[k] - 1.0).abs() < 0.05, "{axes:?}");
        }
    }

    #[test]
    fn half_visible_box_volume() {
        for e in [0.2, 0.3] {
            let truth = Superquadric::new(
                Vector3::new(0.05, 0.04, 0.09),
                [e, e],
                RpyPose::new(Vector3::new(-0.3, 0.1, 0.0), 0.0, 0.0, 0.3),
            )
            .unwrap();
            let cloud = sample_surface(&truth, 40, 40, Some(Viewpoint::Direction(Vector3::new(1.0, 0.8, 0.6)))).unwrap();
            let (fit, _) = fit_superquadric(&cloud, 0.001).unwrap();
            let ratio = fit.volume_factor() / truth.volume_factor();
            assert!((ratio - 1.0).abs() < 0.15, "exponent {e}: volume ratio {ratio}");
        }
    }

    #[test]
    fn rejects_bad_clouds() {
        let few = PointCloud::new((0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect());
        assert_eq!(fit_superquadric(&few, 0.001).unwrap_err(), FitError::TooFewPoints(10));
        let tiny = PointCloud::new(
            (0..40)
                .map(|i| Vector3::new(i as f64 * 1e-5, (i % 3) as f64 * 1e-5, (i % 7) as f64 * 1e-5))
                .collect(),
        );
        assert!(matches!(fit_superquadric(&tiny, 0.001), Err(FitError::CloudTooSmall(_))));
        let planar: Vec<_> = (0..100)
            .map(|i| Vector3::new((i % 10) as f64 * 0.01, (i / 10) as f64 * 0.01, 0.5))
            .collect();
        assert_eq!(
            fit_superquadric(&PointCloud::new(planar), 0.001).unwrap_err(),
            FitError::DegenerateCloud
        );
    }

    #[test]
    fn iteration_budget_is_reported() {
        let truth = test_object();
        let cloud = sample_surface(&truth, 20, 20, None).unwrap();
        let opts = FitOptions {
            max_iterations: 2,
            ..FitOptions::default()
        };
        assert!(matches!(
            fit_superquadric_with(&cloud, 0.001, &opts),
            Err(FitError::FitDiverged { iterations: 2, .. })
        ));
    }
}
