//! Sequential importance sampling filter over end-effector poses.
//!
//! Particles are propagated with the commanded motion plus Gaussian process
//! noise (the transitional prior is the proposal), weighted by an
//! exponential-L1 likelihood on projected hand landmarks, and resampled
//! systematically when the effective sample size drops below `N/2`.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Rotation3, Vector3};
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{integrate_twist, CameraModel, Pose7, StereoRig, Twist, MIN_DEPTH};
use crate::servo::square_corners;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("every landmark is masked in both cameras")]
    NoValidLandmarks,
    #[error("at most {0} valid landmarks per camera, at least 4 required")]
    TooFewLandmarks(usize),
    #[error("particle count must be at least 2, got {0}")]
    TooFewParticles(usize),
    #[error("noise parameters must be positive and finite")]
    InvalidNoise,
}

/// Minimum valid landmarks in one camera for a measurement to be used.
pub const MIN_VALID_LANDMARKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Position noise per axis per step, meters.
    pub sigma_pos: f64,
    /// Rotation noise angle per step, radians.
    pub sigma_rot: f64,
    /// Likelihood scale, pixels.
    pub sigma_lik: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_pos: 0.003,
            sigma_rot: 0.02,
            sigma_lik: 0.5,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), FilterError> {
        let ok = [self.sigma_pos, self.sigma_rot, self.sigma_lik]
            .iter()
            .all(|s| s.is_finite() && *s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(FilterError::InvalidNoise)
        }
    }
}

/// Commanded end-effector motion over one filter step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionCommand {
    pub twist: Twist,
    pub dt: f64,
}

impl MotionCommand {
    pub fn zero() -> Self {
        Self {
            twist: Twist::zero(),
            dt: 0.0,
        }
    }

    pub fn apply(&self, x: &Pose7) -> Pose7 {
        if self.dt == 0.0 || self.twist == Twist::zero() {
            return *x;
        }
        integrate_twist(x, &self.twist, self.dt)
    }
}

/// Hand-frame landmarks observed by the filter: the four servo feature
/// corners followed by four points off their plane.
pub fn hand_landmarks(half_side: f64) -> [Vector3<f64>; 8] {
    let c = square_corners(half_side);
    [
        c[0],
        c[1],
        c[2],
        c[3],
        Vector3::new(0.0, 0.0, 0.04),
        Vector3::new(0.06, 0.0, 0.01),
        Vector3::new(0.0, 0.07, 0.01),
        Vector3::new(-0.03, -0.05, 0.02),
    ]
}

/// Pixel coordinates of `P` landmarks in one camera with a validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualDescriptor {
    /// `[u_1, v_1, …, u_P, v_P]`.
    pub y: Vec<f64>,
    pub valid: Vec<bool>,
}

impl VisualDescriptor {
    /// Projects root-frame points; points behind the camera or outside the
    /// image are masked.
    pub fn project(cam: &CameraModel, points: &[Vector3<f64>]) -> Self {
        let mut y = Vec::with_capacity(2 * points.len());
        let mut valid = Vec::with_capacity(points.len());
        for p in points {
            match cam.project(p) {
                Ok(pr) => {
                    y.push(pr.u);
                    y.push(pr.v);
                    valid.push(cam.in_image(pr.u, pr.v));
                }
                Err(_) => {
                    y.push(f64::NAN);
                    y.push(f64::NAN);
                    valid.push(false);
                }
            }
        }
        Self { y, valid }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Landmarks of `pose` in root coordinates.
pub fn landmarks_at(pose: &Pose7, landmarks: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    landmarks.iter().map(|l| pose.transform_point(l)).collect()
}

/// `exp(−(1/σ)·Σ|y − ŷ|₁ / n)` where `n` counts the valid scalar
/// coordinates over both cameras.
pub fn likelihood(
    measurement: &[VisualDescriptor; 2],
    particle: &Pose7,
    rig: &StereoRig,
    landmarks: &[Vector3<f64>],
    sigma_lik: f64,
) -> Result<f64, FilterError> {
    check_measurement(measurement)?;
    Ok(likelihood_unchecked(measurement, particle, rig, landmarks, sigma_lik))
}

fn check_measurement(measurement: &[VisualDescriptor; 2]) -> Result<(), FilterError> {
    let counts = [measurement[0].valid_count(), measurement[1].valid_count()];
    if counts[0] + counts[1] == 0 {
        return Err(FilterError::NoValidLandmarks);
    }
    let best = counts[0].max(counts[1]);
    if best < MIN_VALID_LANDMARKS {
        return Err(FilterError::TooFewLandmarks(best));
    }
    Ok(())
}

fn likelihood_unchecked(
    measurement: &[VisualDescriptor; 2],
    particle: &Pose7,
    rig: &StereoRig,
    landmarks: &[Vector3<f64>],
    sigma_lik: f64,
) -> f64 {
    let mut l1 = 0.0;
    let mut n = 0usize;
    for (cam, meas) in rig.cameras().into_iter().zip(measurement) {
        for (k, l) in landmarks.iter().enumerate() {
            if !meas.valid[k] {
                continue;
            }
            let pc = cam.to_camera_frame(&particle.transform_point(l));
            if pc.z < MIN_DEPTH {
                return 0.0;
            }
            let (fx, fy) = cam.focal();
            let (cx, cy) = cam.principal_point();
            let u = fx * pc.x / pc.z + cx;
            let v = fy * pc.y / pc.z + cy;
            l1 += (meas.y[2 * k] - u).abs() + (meas.y[2 * k + 1] - v).abs();
            n += 2;
        }
    }
    (-(l1 / n as f64) / sigma_lik).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    particles: Vec<Pose7>,
    weights: Vec<f64>,
}

impl ParticleSet {
    /// `n` copies of `reported` with uniform weights.
    pub fn initialize(reported: &Pose7, n: usize) -> Result<Self, FilterError> {
        if n < 2 {
            return Err(FilterError::TooFewParticles(n));
        }
        Ok(Self {
            particles: alloc::vec![*reported; n],
            weights: alloc::vec![1.0 / n as f64; n],
        })
    }

    /// Builds a set from explicit particles and (unnormalized) weights.
    pub fn from_parts(particles: Vec<Pose7>, weights: Vec<f64>) -> Result<Self, FilterError> {
        assert_eq!(particles.len(), weights.len());
        if particles.len() < 2 {
            return Err(FilterError::TooFewParticles(particles.len()));
        }
        let mut set = Self { particles, weights };
        if !set.normalize() {
            set.reset_weights();
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[Pose7] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Effective sample size `1 / Σ w²`.
    pub fn ess(&self) -> f64 {
        ess(&self.weights)
    }

    fn reset_weights(&mut self) {
        let w = 1.0 / self.len() as f64;
        self.weights.iter_mut().for_each(|x| *x = w);
    }

    fn normalize(&mut self) -> bool {
        let s: f64 = self.weights.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return false;
        }
        self.weights.iter_mut().for_each(|w| *w /= s);
        true
    }

    /// Advances every particle by the command and perturbs it with process
    /// noise. Weights are unchanged.
    pub fn predict<R: Rng + ?Sized>(&mut self, cmd: &MotionCommand, noise: &NoiseModel, rng: &mut R) {
        let pos = Normal::new(0.0, noise.sigma_pos).ok().filter(|_| noise.sigma_pos > 0.0);
        let rot = Normal::new(0.0, noise.sigma_rot).ok().filter(|_| noise.sigma_rot > 0.0);
        for x in &mut self.particles {
            let moved = cmd.apply(x);
            let dp = match pos {
                Some(d) => Vector3::new(d.sample(rng), d.sample(rng), d.sample(rng)),
                None => Vector3::zeros(),
            };
            let r = match rot {
                Some(d) => Rotation3::new(random_axis(rng) * d.sample(rng)) * moved.rotation(),
                None => *moved.rotation(),
            };
            *x = Pose7::new(moved.position() + dp, r);
        }
    }

    /// Multiplies weights by the likelihood and renormalizes. Returns `true`
    /// when every weight underflowed and the weights were reset to uniform.
    pub fn update(
        &mut self,
        measurement: &[VisualDescriptor; 2],
        rig: &StereoRig,
        landmarks: &[Vector3<f64>],
        noise: &NoiseModel,
    ) -> Result<bool, FilterError> {
        check_measurement(measurement)?;
        for (w, x) in self.weights.iter_mut().zip(&self.particles) {
            *w *= likelihood_unchecked(measurement, x, rig, landmarks, noise.sigma_lik);
        }
        if self.normalize() {
            Ok(false)
        } else {
            self.reset_weights();
            Ok(true)
        }
    }

    /// Systematic resampling when `ESS < N/2`. Returns whether it ran.
    pub fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> bool {
        let n = self.len();
        if self.ess() >= n as f64 / 2.0 {
            return false;
        }
        let u0: f64 = rng.random();
        let idx = systematic_resample_indices(&self.weights, u0);
        self.particles = idx.iter().map(|&i| self.particles[i]).collect();
        self.reset_weights();
        true
    }

    /// Weighted mean position and chordal mean rotation.
    pub fn point_estimate(&self) -> Pose7 {
        let p = self
            .particles
            .iter()
            .zip(&self.weights)
            .fold(Vector3::zeros(), |acc, (x, w)| acc + x.position() * *w);
        let r = chordal_mean(self.particles.iter().map(|x| *x.rotation()).zip(self.weights.iter().copied()));
        Pose7::new(p, r)
    }
}

fn random_axis<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if let Some(u) = v.try_normalize(1e-12) {
            return u;
        }
    }
}

pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Parent index of each of `N` children for comb offset `u0 ∈ [0, 1)`:
/// child `k` takes the parent whose cumulative-weight interval contains
/// `(k + u0)/N`.
pub fn systematic_resample_indices(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0] / total;
    let mut i = 0;
    for k in 0..n {
        let u = (k as f64 + u0) / n as f64;
        while u >= cum && i + 1 < n {
            i += 1;
            cum += weights[i] / total;
        }
        out.push(i);
    }
    out
}

/// Rotation closest (Frobenius) to the weighted average of rotation
/// matrices.
pub fn chordal_mean<I: IntoIterator<Item = (Rotation3<f64>, f64)>>(items: I) -> Rotation3<f64> {
    let mut m = Matrix3::zeros();
    for (r, w) in items {
        m += r.matrix() * w;
    }
    project_to_rotation(&m)
}

fn project_to_rotation(m: &Matrix3<f64>) -> Rotation3<f64> {
    let svd = m.svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return Rotation3::identity();
    };
    let d = (u * vt).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    Rotation3::from_matrix_unchecked(u * fix * vt)
}

/// Sliding-window mean of poses (arithmetic on positions, chordal on
/// rotations).
#[derive(Debug, Clone, PartialEq)]
pub struct MovingAverage {
    window: usize,
    buffer: VecDeque<Pose7>,
}

impl MovingAverage {
    pub fn new(window: usize) -> Self {
        let window = window.max(1);
        Self {
            window,
            buffer: VecDeque::with_capacity(window),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn push(&mut self, x: Pose7) -> Pose7 {
        if self.buffer.len() == self.window {
            self.buffer.pop_front();
        }
        self.buffer.push_back(x);
        self.current().unwrap_or(x)
    }

    pub fn current(&self) -> Option<Pose7> {
        mean_pose(self.buffer.iter())
    }

    pub fn clear(&mut self) {
        self.buffer.clear();
    }
}

fn mean_pose<'a, I: Iterator<Item = &'a Pose7> + Clone>(poses: I) -> Option<Pose7> {
    let n = poses.clone().count();
    if n == 0 {
        return None;
    }
    let w = 1.0 / n as f64;
    let p = poses.clone().fold(Vector3::zeros(), |a, x| a + x.position()) * w;
    let r = chordal_mean(poses.map(|x| (*x.rotation(), w)));
    Some(Pose7::new(p, r))
}

/// Moving average of the point estimates of the last `window` sets.
///
/// # Panics
/// If `history` is empty.
pub fn extract_estimate(history: &[ParticleSet], window: usize) -> Pose7 {
    assert!(!history.is_empty(), "at least one filter cycle required");
    let start = history.len().saturating_sub(window.max(1));
    let estimates: Vec<Pose7> = history[start..].iter().map(ParticleSet::point_estimate).collect();
    mean_pose(estimates.iter()).expect("non-empty")
}

/// Record of one predict/update/resample cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleRecord {
    pub raw: Pose7,
    pub smoothed: Pose7,
    pub ess: f64,
    pub resampled: bool,
    /// All weights underflowed and were reset.
    pub degenerate: bool,
}

/// Particle set plus moving average, driven one cycle at a time.
#[derive(Debug, Clone)]
pub struct PoseFilter {
    set: ParticleSet,
    noise: NoiseModel,
    landmarks: Vec<Vector3<f64>>,
    average: MovingAverage,
}

impl PoseFilter {
    pub fn new(
        reported: &Pose7,
        particles: usize,
        window: usize,
        noise: NoiseModel,
        landmarks: Vec<Vector3<f64>>,
    ) -> Result<Self, FilterError> {
        noise.validate()?;
        Ok(Self {
            set: ParticleSet::initialize(reported, particles)?,
            noise,
            landmarks,
            average: MovingAverage::new(window),
        })
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.set
    }

    pub fn landmarks(&self) -> &[Vector3<f64>] {
        &self.landmarks
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    /// Current smoothed estimate, or the raw point estimate before the
    /// first cycle.
    pub fn estimate(&self) -> Pose7 {
        self.average.current().unwrap_or_else(|| self.set.point_estimate())
    }

    pub fn cycle<R: Rng + ?Sized>(
        &mut self,
        cmd: &MotionCommand,
        measurement: &[VisualDescriptor; 2],
        rig: &StereoRig,
        rng: &mut R,
    ) -> Result<CycleRecord, FilterError> {
        self.set.predict(cmd, &self.noise, rng);
        let degenerate = self.set.update(measurement, rig, &self.landmarks, &self.noise)?;
        let raw = self.set.point_estimate();
        let ess = self.set.ess();
        let resampled = self.set.resample(rng);
        let smoothed = self.average.push(raw);
        Ok(CycleRecord {
            raw,
            smoothed,
            ess,
            resampled,
            degenerate,
        })
    }
}
