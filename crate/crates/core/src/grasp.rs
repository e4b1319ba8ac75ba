//! Grasp pose computation: overlap a palm-attached ellipsoid with the object
//! superquadric while keeping every sampled hand point above the table.

use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DVector, Matrix3, Rotation3, Vector3};
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose7, RpyPose};
use crate::optim::{augmented_lagrangian, AugLagOptions};
use crate::superquadric::Superquadric;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraspError {
    #[error("object center lies {0} m on the wrong side of the table plane")]
    ObjectBelowTable(f64),
    #[error("no start produced a pose with every hand point above the table")]
    Infeasible,
    #[error("invalid table plane: {0}")]
    InvalidPlane(&'static str),
    #[error("hand ellipsoid semi-axes must be positive")]
    InvalidHand,
}

/// Ellipsoid attached to the palm. The hand frame has its z-axis along the
/// palm normal, pointing out of the palm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandEllipsoid {
    pub semi_axes: Vector3<f64>,
    /// Pose of the ellipsoid frame in the hand frame.
    pub attachment: RpyPose,
}

impl Default for HandEllipsoid {
    fn default() -> Self {
        Self {
            semi_axes: Vector3::new(0.03, 0.05, 0.03),
            attachment: RpyPose::new(Vector3::new(0.0, 0.0, 0.03), 0.0, 0.0, 0.0),
        }
    }
}

impl HandEllipsoid {
    pub fn new(semi_axes: Vector3<f64>, attachment: RpyPose) -> Result<Self, GraspError> {
        if !semi_axes.iter().all(|a| a.is_finite() && *a > 0.0) {
            return Err(GraspError::InvalidHand);
        }
        Ok(Self { semi_axes, attachment })
    }

    /// Ellipsoid implicit function `Σ (q_k / a_k)²` at a point given in the
    /// ellipsoid frame.
    pub fn implicit(&self, q: &Vector3<f64>) -> f64 {
        q.component_div(&self.semi_axes).norm_squared()
    }

    /// Ellipsoid center in root coordinates for a hand pose.
    pub fn center(&self, hand: &Pose7) -> Vector3<f64> {
        hand.transform_point(&self.attachment.origin)
    }
}

/// Table plane `n·p + d = 0` with unit normal; `n·p + d > 0` is above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct TablePlane {
    normal: Vector3<f64>,
    offset: f64,
}

impl TablePlane {
    /// Normalizes `(normal, offset)` so the normal has unit length.
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self, GraspError> {
        let n = normal.norm();
        if !(n > 1e-12) || !n.is_finite() || !offset.is_finite() {
            return Err(GraspError::InvalidPlane("normal must be finite and nonzero"));
        }
        Ok(Self {
            normal: normal / n,
            offset: offset / n,
        })
    }

    /// Horizontal table at height `z`.
    pub fn horizontal(z: f64) -> Self {
        Self {
            normal: Vector3::z(),
            offset: -z,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Signed distance of `p` above the plane.
    pub fn value(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.offset
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.normal.x, self.normal.y, self.normal.z, self.offset]
    }
}

impl TryFrom<[f64; 4]> for TablePlane {
    type Error = GraspError;
    fn try_from(a: [f64; 4]) -> Result<Self, Self::Error> {
        TablePlane::new(Vector3::new(a[0], a[1], a[2]), a[3])
    }
}

impl From<TablePlane> for [f64; 4] {
    fn from(t: TablePlane) -> Self {
        t.to_array()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspCandidate {
    pub pose: RpyPose,
    pub cost: f64,
    /// `n·m_i + d − clearance` for every sampled hand point.
    pub constraint_margins: Vec<f64>,
    /// Cost at the start the solution was grown from.
    pub initial_cost: f64,
    pub start_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspOptions {
    /// Number of hand points `L`.
    pub points: usize,
    /// Required height of every hand point above the table, meters.
    pub clearance: f64,
    pub solver: AugLagOptions,
}

impl Default for GraspOptions {
    fn default() -> Self {
        Self {
            points: 20,
            clearance: 0.005,
            solver: AugLagOptions::default(),
        }
    }
}

/// Samples `l` points on the palm-side half of the hand ellipsoid, gridded
/// in the parametric angles, and maps them to root coordinates.
///
/// # Panics
/// If `l < 4`.
pub fn sample_hand_points(hand: &HandEllipsoid, pose: &RpyPose, l: usize) -> Vec<Vector3<f64>> {
    sample_hand_points_at(hand, &pose.to_pose7(), l)
}

fn hand_grid(hand: &HandEllipsoid, l: usize) -> Vec<Vector3<f64>> {
    assert!(l >= 4, "at least 4 hand points required, got {l}");
    let rows = ((l / 2) as f64).sqrt().floor().max(1.0) as usize;
    let attach = hand.attachment.to_pose7();
    let a = hand.semi_axes;
    let mut out = Vec::with_capacity(l);
    for j in 0..rows {
        let eta = -FRAC_PI_2 + (j as f64 + 0.5) * FRAC_PI_2 / rows as f64;
        let count = l / rows + usize::from(j < l % rows);
        for k in 0..count {
            let omega = -PI + 2.0 * PI * (k as f64 + 0.5 * (j % 2) as f64) / count as f64;
            let q = Vector3::new(
                a.x * eta.cos() * omega.cos(),
                a.y * eta.cos() * omega.sin(),
                a.z * eta.sin(),
            );
            out.push(attach.transform_point(&q));
        }
    }
    out
}

fn sample_hand_points_at(hand: &HandEllipsoid, pose: &Pose7, l: usize) -> Vec<Vector3<f64>> {
    hand_grid(hand, l).iter().map(|p| pose.transform_point(p)).collect()
}

/// `Σ (√(λ₁λ₂λ₃)·(F(m_i) − 1))²` over the hand points at `pose`.
pub fn grasp_cost(obj: &Superquadric, hand: &HandEllipsoid, pose: &RpyPose, l: usize) -> f64 {
    cost_of_points(obj, &sample_hand_points(hand, pose, l))
}

fn cost_of_points(obj: &Superquadric, points: &[Vector3<f64>]) -> f64 {
    let frame = obj.frame();
    let v = obj.volume_factor();
    points
        .iter()
        .map(|p| {
            let f = obj.inside_outside_in(&frame, p) - 1.0;
            v * f * f
        })
        .sum()
}

/// Constraint values `h_i = n·m_i + d − clearance`.
pub fn constraint_margins(
    hand: &HandEllipsoid,
    table: &TablePlane,
    pose: &RpyPose,
    l: usize,
    clearance: f64,
) -> Vec<f64> {
    sample_hand_points(hand, pose, l)
        .iter()
        .map(|m| table.value(m) - clearance)
        .collect()
}

/// Candidate starts: palm on each lateral flank (±x, ±y of the object frame)
/// facing the center, fingers along the object z-axis.
fn initial_poses(obj: &Superquadric) -> [Pose7; 4] {
    let frame = obj.frame();
    let r = frame.rotation().matrix();
    let axes = obj.semi_axes();
    let ez = r.column(2).into_owned();
    let flanks = [
        (r.column(0).into_owned(), axes.x),
        (-r.column(0).into_owned(), axes.x),
        (r.column(1).into_owned(), axes.y),
        (-r.column(1).into_owned(), axes.y),
    ];
    flanks.map(|(d, extent)| {
        let z = -d;
        let y = ez;
        let x = y.cross(&z);
        let rotation = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
        Pose7::new(frame.position() + d * extent, rotation)
    })
}

/// Solves the constrained overlap problem from four flank starts and returns
/// the lowest-cost feasible result (ties go to the lowest start index).
pub fn solve_grasp(
    obj: &Superquadric,
    hand: &HandEllipsoid,
    table: &TablePlane,
    opts: &GraspOptions,
) -> Result<GraspCandidate, GraspError> {
    let above = table.value(&obj.center());
    if !(above > 0.0) {
        return Err(GraspError::ObjectBelowTable(-above));
    }
    let l = opts.points;
    let grid = hand_grid(hand, l);
    let frame = obj.frame();
    let n_points = l as f64;
    // small interior target so that rounding cannot leave a margin at zero
    let target = 1e-5;
    let scale = 0.01;
    let mut best: Option<GraspCandidate> = None;
    for (index, start) in initial_poses(obj).iter().enumerate() {
        let lowest = grid
            .iter()
            .map(|p| table.value(&start.transform_point(p)) - opts.clearance)
            .fold(f64::INFINITY, f64::min);
        let lift = if lowest < 2.0 * target { 2.0 * target - lowest + 1e-4 } else { 0.0 };
        let base = Pose7::new(start.position() + table.normal() * lift, *start.rotation());
        let pose_at = |z: &DVector<f64>| {
            Pose7::new(
                base.position() + Vector3::new(z[0], z[1], z[2]),
                crate::geometry::renormalize(&(base.rotation() * Rotation3::new(Vector3::new(z[3], z[4], z[5])))),
            )
        };
        let points_at = |z: &DVector<f64>| -> Vec<Vector3<f64>> {
            let x = pose_at(z);
            grid.iter().map(|p| x.transform_point(p)).collect()
        };
        let objective = |z: &DVector<f64>| {
            points_at(z)
                .iter()
                .map(|p| {
                    let f = obj.inside_outside_in(&frame, p) - 1.0;
                    f * f
                })
                .sum::<f64>()
                / n_points
        };
        let constraints = |z: &DVector<f64>| -> Vec<f64> {
            points_at(z)
                .iter()
                .map(|m| (table.value(m) - opts.clearance - target) / scale)
                .collect()
        };
        let z0 = DVector::zeros(6);
        let initial_cost = cost_of_points(obj, &points_at(&z0));
        let sol = augmented_lagrangian(objective, constraints, z0, &opts.solver);
        let mut pose = pose_at(&sol.x);
        let mut cost = cost_of_points(obj, &points_at(&sol.x));
        if !(cost <= initial_cost) {
            pose = base;
            cost = initial_cost;
        }
        let rpy = RpyPose::from_pose7(&pose);
        let margins = constraint_margins(hand, table, &rpy, l, opts.clearance);
        if !cost.is_finite() || !margins.iter().all(|h| *h > 0.0) {
            continue;
        }
        let candidate = GraspCandidate {
            cost: grasp_cost(obj, hand, &rpy, l),
            pose: rpy,
            constraint_margins: margins,
            initial_cost,
            start_index: index,
        };
        if best.as_ref().map_or(true, |b| candidate.cost < b.cost) {
            best = Some(candidate);
        }
    }
    best.ok_or(GraspError::Infeasible)
}
