//! Kinematic test bed: a world with a hidden true end-effector pose, biased
//! proprioception, noisy stereo observations, and the closed-loop pipeline
//! fit → grasp → approach → filter warm-up → servo.

use alloc::vec::Vec;
use core::cell::Cell;
use core::fmt;

use nalgebra::{Rotation3, Vector3};
#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::filter::{hand_landmarks, landmarks_at, CycleRecord, FilterError, MotionCommand, NoiseModel, PoseFilter, VisualDescriptor};
use crate::geometry::{integrate_twist, GeometryError, Pose7, RigConfig, RpyPose, StereoRig, Twist, MIN_DEPTH};
use crate::grasp::{solve_grasp, GraspCandidate, GraspError, GraspOptions, HandEllipsoid, TablePlane};
use crate::servo::{compare_jacobians, facing_pose, make_feature, servo_loop, Camera, FeatureVector, JacobianChoice, LoopError, Plant, ServoConfig, ServoError, ServoTrace};
use crate::superquadric::{fit_superquadric, sample_surface, FitError, FitReport, PointCloud, Superquadric, SuperquadricError, Viewpoint};

/// Ground-truth object as configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectConfig {
    pub semi_axes: [f64; 3],
    pub exponents: [f64; 2],
    /// `[x, y, z, roll, pitch, yaw]`.
    pub pose: [f64; 6],
}

impl ObjectConfig {
    /// Upright box standing on the default table.
    pub fn box_like() -> Self {
        Self::default()
    }

    /// Tall object with rounded edges and a slightly oval section.
    pub fn bottle_like() -> Self {
        Self {
            semi_axes: [0.036, 0.026, 0.1],
            exponents: [0.3, 0.8],
            pose: [-0.30, 0.08, 0.05, 0.0, 0.0, -0.32],
        }
    }

    /// Flat-ended cylinder with a slightly oval section.
    pub fn cylinder_like() -> Self {
        Self {
            semi_axes: [0.038, 0.028, 0.08],
            exponents: [0.2, 0.9],
            pose: [-0.30, 0.08, 0.03, 0.0, 0.0, -0.32],
        }
    }

    pub fn superquadric(&self) -> Result<Superquadric, SuperquadricError> {
        Superquadric::new(Vector3::from(self.semi_axes), self.exponents, RpyPose::from_array(self.pose))
    }
}

impl Default for ObjectConfig {
    fn default() -> Self {
        Self {
            semi_axes: [0.045, 0.03, 0.09],
            exponents: [0.2, 0.2],
            pose: [-0.30, 0.08, 0.04, 0.0, 0.0, -0.32],
        }
    }
}

/// Fixed proprioception offset. With `pose` unset, a translation of length
/// `position` and a rotation of `angle_deg` degrees are drawn about random
/// directions from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasConfig {
    pub position: f64,
    pub angle_deg: f64,
    pub seed: u64,
    pub pose: Option<Pose7>,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            position: 0.025,
            angle_deg: 6.5,
            seed: 7,
            pose: None,
        }
    }
}

impl BiasConfig {
    pub fn zero() -> Self {
        Self {
            position: 0.0,
            angle_deg: 0.0,
            seed: 0,
            pose: Some(Pose7::identity()),
        }
    }

    pub fn to_pose(&self) -> Pose7 {
        if let Some(p) = self.pose {
            return p;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let dir = unit_vector(&mut rng);
        let axis = unit_vector(&mut rng);
        Pose7::new(dir * self.position, Rotation3::new(axis * self.angle_deg.to_radians()))
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
        if let Some(u) = v.try_normalize(1e-9) {
            return u;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub particles: usize,
    pub window: usize,
    /// Filter cycles with the hand at rest before servoing starts.
    pub warmup: usize,
    pub noise: NoiseModel,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            particles: 100,
            window: 10,
            warmup: 10,
            noise: NoiseModel::default(),
        }
    }
}

/// Pose source used by the servo loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    /// Moving average of the particle filter.
    #[default]
    Filter,
    /// Raw biased kinematics.
    Proprioception,
    /// Ground truth (ideal sensor).
    Truth,
}

impl FeedbackMode {
    pub fn label(&self) -> &'static str {
        match self {
            FeedbackMode::Filter => "filter",
            FeedbackMode::Proprioception => "proprioception",
            FeedbackMode::Truth => "truth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraspConfig {
    pub hand: HandEllipsoid,
    pub points: usize,
    pub clearance: f64,
    /// Distance of the open-loop pre-grasp pose behind the grasp pose along
    /// the palm normal, meters.
    pub pregrasp_offset: f64,
}

impl Default for GraspConfig {
    fn default() -> Self {
        Self {
            hand: HandEllipsoid::default(),
            points: 20,
            clearance: 0.005,
            pregrasp_offset: 0.10,
        }
    }
}

/// Every tunable of a simulated run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub rig: RigConfig,
    pub servo: ServoConfig,
    pub filter: FilterConfig,
    pub feedback: FeedbackMode,
    pub bias: BiasConfig,
    /// Landmark pixel noise standard deviation.
    pub pixel_noise: f64,
    /// Object point-cloud noise standard deviation, meters.
    pub cloud_noise: f64,
    /// Surface sampling grid `[n_eta, n_omega]` for the object cloud.
    pub cloud_grid: [usize; 2],
    pub object: ObjectConfig,
    pub table: TablePlane,
    pub grasp: GraspConfig,
    /// Reported start pose for reaching runs.
    pub start: Pose7,
    /// Goal pose for reaching runs.
    pub goal: Pose7,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            rig: RigConfig::default(),
            servo: ServoConfig::default(),
            filter: FilterConfig::default(),
            feedback: FeedbackMode::Filter,
            bias: BiasConfig::default(),
            pixel_noise: 1.0,
            cloud_noise: 0.001,
            cloud_grid: [32, 40],
            object: ObjectConfig::default(),
            table: TablePlane::horizontal(-0.05),
            grasp: GraspConfig::default(),
            start: Pose7::from_array([-0.28, 0.12, 0.13, 0.131, -0.492, 0.86, 2.962]),
            goal: Pose7::from_array([-0.28, 0.08, 0.03, 0.213, -0.94, 0.265, 2.911]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Setup,
    Fit,
    Grasp,
    Approach,
    Warmup,
    Servo,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Setup => "setup",
            Stage::Fit => "fit",
            Stage::Grasp => "grasp",
            Stage::Approach => "approach",
            Stage::Warmup => "warmup",
            Stage::Servo => "servo",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineFailure {
    Geometry(GeometryError),
    Object(SuperquadricError),
    Fit(FitError),
    Grasp(GraspError),
    Servo(ServoError),
    Filter(FilterError),
}

impl fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineFailure::Geometry(e) => write!(f, "{e}"),
            PipelineFailure::Object(e) => write!(f, "{e}"),
            PipelineFailure::Fit(e) => write!(f, "{e}"),
            PipelineFailure::Grasp(e) => write!(f, "{e}"),
            PipelineFailure::Servo(e) => write!(f, "{e}"),
            PipelineFailure::Filter(e) => write!(f, "{e}"),
        }
    }
}

/// A failure tagged with the stage that produced it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{stage} stage failed: {failure}")]
pub struct PipelineError {
    pub stage: Stage,
    pub failure: PipelineFailure,
}

impl PipelineError {
    fn at(stage: Stage) -> impl FnOnce(PipelineFailure) -> PipelineError {
        move |failure| PipelineError { stage, failure }
    }
}

/// Synthetic world. The true end-effector pose is private; reads of it are
/// counted.
#[derive(Debug)]
pub struct SimWorld {
    truth: Pose7,
    bias: Pose7,
    object: Option<Superquadric>,
    rig: StereoRig,
    landmarks: Vec<Vector3<f64>>,
    rng: ChaCha8Rng,
    truth_reads: Cell<usize>,
    truth_log: Vec<Pose7>,
}

impl SimWorld {
    pub fn new(truth: Pose7, bias: Pose7, object: Option<Superquadric>, rig: StereoRig, landmarks: Vec<Vector3<f64>>, seed: u64) -> Self {
        Self {
            truth,
            bias,
            object,
            rig,
            landmarks,
            rng: ChaCha8Rng::seed_from_u64(seed),
            truth_reads: Cell::new(0),
            truth_log: alloc::vec![truth],
        }
    }

    /// Places the hand so that proprioception reports `reported`.
    pub fn move_reported_to(&mut self, reported: &Pose7) {
        self.truth = reported.compose(&self.bias.inverse());
        self.truth_log.push(self.truth);
    }

    pub fn rig(&self) -> &StereoRig {
        &self.rig
    }

    pub fn bias(&self) -> &Pose7 {
        &self.bias
    }

    pub fn object(&self) -> Option<&Superquadric> {
        self.object.as_ref()
    }

    /// Kinematics reading: `compose(true, bias)`.
    pub fn reported_pose(&self) -> Pose7 {
        self.truth.compose(&self.bias)
    }

    /// True end-effector pose (counted).
    pub fn ground_truth(&self) -> Pose7 {
        self.truth_reads.set(self.truth_reads.get() + 1);
        self.truth
    }

    pub fn truth_reads(&self) -> usize {
        self.truth_reads.get()
    }

    /// Every true pose taken so far, in order.
    pub fn truth_log(&self) -> &[Pose7] {
        &self.truth_log
    }

    pub fn apply(&mut self, twist: &Twist, dt: f64) {
        self.truth = integrate_twist(&self.truth, twist, dt);
        self.truth_log.push(self.truth);
    }

    /// Landmark descriptors of the true pose in both cameras with i.i.d.
    /// Gaussian pixel noise on the visible entries.
    pub fn observe(&mut self, noise_px: f64) -> Result<[VisualDescriptor; 2], ServoError> {
        let pts = landmarks_at(&self.truth, &self.landmarks);
        let noise = Normal::new(0.0, noise_px).ok().filter(|_| noise_px > 0.0);
        let mut out = [VisualDescriptor { y: Vec::new(), valid: Vec::new() }, VisualDescriptor { y: Vec::new(), valid: Vec::new() }];
        for (c, (cam, which)) in [(&self.rig.left, Camera::Left), (&self.rig.right, Camera::Right)].into_iter().enumerate() {
            if let Some(i) = pts.iter().position(|p| cam.to_camera_frame(p).z < MIN_DEPTH) {
                return Err(ServoError::FeatureNotVisible { camera: which, point: i });
            }
            let mut d = VisualDescriptor::project(cam, &pts);
            if let Some(n) = noise {
                for (k, valid) in d.valid.iter().enumerate() {
                    if *valid {
                        d.y[2 * k] += n.sample(&mut self.rng);
                        d.y[2 * k + 1] += n.sample(&mut self.rng);
                    }
                }
            }
            out[c] = d;
        }
        Ok(out)
    }

    /// Object surface seen from the left camera with Gaussian noise.
    pub fn observe_object(&mut self, grid: [usize; 2], noise_m: f64) -> Result<PointCloud, SuperquadricError> {
        let obj = self.object.ok_or(SuperquadricError::EmptyCloud)?;
        let eye = self.rig.left.pose().position();
        let mut cloud = sample_surface(&obj, grid[0], grid[1], Some(Viewpoint::Position(eye)))?;
        if let Some(n) = Normal::new(0.0, noise_m).ok().filter(|_| noise_m > 0.0) {
            for p in &mut cloud.points {
                *p += Vector3::new(n.sample(&mut self.rng), n.sample(&mut self.rng), n.sample(&mut self.rng));
            }
        }
        Ok(cloud)
    }
}

/// Servo plant backed by the world: commands move the true pose, feedback
/// comes from the configured source.
struct WorldPlant<'a> {
    world: &'a mut SimWorld,
    filter: PoseFilter,
    mode: FeedbackMode,
    pixel_noise: f64,
    rng: ChaCha8Rng,
    cycles: Vec<CycleRecord>,
}

impl WorldPlant<'_> {
    fn filter_cycle(&mut self, cmd: &MotionCommand) -> Result<(), PipelineFailure> {
        let y = self.world.observe(self.pixel_noise).map_err(PipelineFailure::Servo)?;
        let rig = self.world.rig;
        let rec = self.filter.cycle(cmd, &y, &rig, &mut self.rng).map_err(PipelineFailure::Filter)?;
        self.cycles.push(rec);
        Ok(())
    }
}

impl Plant for WorldPlant<'_> {
    type Error = PipelineFailure;

    fn feedback(&mut self) -> Result<Pose7, Self::Error> {
        Ok(match self.mode {
            FeedbackMode::Filter => self.filter.estimate(),
            FeedbackMode::Proprioception => self.world.reported_pose(),
            FeedbackMode::Truth => self.world.ground_truth(),
        })
    }

    fn apply(&mut self, twist: &Twist, dt: f64) -> Result<(), Self::Error> {
        self.world.apply(twist, dt);
        self.filter_cycle(&MotionCommand { twist: *twist, dt })
    }
}

/// Terminal errors of one run against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalMetrics {
    /// `‖s^e − s^g‖₂` of the feedback pose at termination, pixels.
    pub image_error: f64,
    /// `‖s(true) − s^g‖₂` at termination, pixels.
    pub image_error_true: f64,
    /// Position error of the true pose against the goal, meters.
    pub position_error: f64,
    /// Geodesic angle between true and goal rotations, degrees.
    pub orientation_error_deg: f64,
    /// Estimate error against the true pose at termination.
    pub estimate_position_error: f64,
    pub estimate_orientation_error_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub seed: u64,
    pub feedback: FeedbackMode,
    pub cloud_points: usize,
    pub fit: Option<(Superquadric, FitReport)>,
    pub grasp: Option<GraspCandidate>,
    pub goal: Pose7,
    pub pregrasp: Pose7,
    pub warmup: Vec<CycleRecord>,
    /// One record per servo command (filter cycle after the command).
    pub cycles: Vec<CycleRecord>,
    pub servo: ServoTrace,
    /// True pose after every world update, starting at the approach pose.
    pub truth: Vec<Pose7>,
    pub metrics: TerminalMetrics,
    pub converged: bool,
    /// Ground-truth reads made while the servo loop ran.
    pub truth_reads_during_servo: usize,
}

/// Full pipeline on the configured object.
pub fn run_pipeline(cfg: &ScenarioConfig) -> Result<RunTrace, PipelineError> {
    let rig = StereoRig::from_config(&cfg.rig).map_err(|e| PipelineError::at(Stage::Setup)(PipelineFailure::Geometry(e)))?;
    let object = cfg.object.superquadric().map_err(|e| PipelineError::at(Stage::Setup)(PipelineFailure::Object(e)))?;
    let landmarks = hand_landmarks(cfg.servo.half_side).to_vec();
    let bias = cfg.bias.to_pose();
    let mut world = SimWorld::new(cfg.start, bias, Some(object), rig, landmarks, cfg.seed);

    let cloud = world
        .observe_object(cfg.cloud_grid, cfg.cloud_noise)
        .map_err(|e| PipelineError::at(Stage::Fit)(PipelineFailure::Object(e)))?;
    let fit = fit_superquadric(&cloud, cfg.cloud_noise).map_err(|e| PipelineError::at(Stage::Fit)(PipelineFailure::Fit(e)))?;

    let opts = GraspOptions {
        points: cfg.grasp.points,
        clearance: cfg.grasp.clearance,
        ..GraspOptions::default()
    };
    let grasp = solve_grasp(&fit.0, &cfg.grasp.hand, &cfg.table, &opts).map_err(|e| PipelineError::at(Stage::Grasp)(PipelineFailure::Grasp(e)))?;
    let goal = grasp.pose.to_pose7();
    let approach = goal.rotation() * Vector3::z();
    let pregrasp = Pose7::new(goal.position() - approach * cfg.grasp.pregrasp_offset, *goal.rotation());
    let mut trace = drive(cfg, &mut world, &pregrasp, &goal)?;
    trace.cloud_points = cloud.len();
    trace.fit = Some(fit);
    trace.grasp = Some(grasp);
    Ok(trace)
}

/// Reaching without an object: the hand starts where proprioception reports
/// `cfg.start` and servos to `cfg.goal`.
pub fn run_reaching(cfg: &ScenarioConfig) -> Result<RunTrace, PipelineError> {
    let rig = StereoRig::from_config(&cfg.rig).map_err(|e| PipelineError::at(Stage::Setup)(PipelineFailure::Geometry(e)))?;
    let landmarks = hand_landmarks(cfg.servo.half_side).to_vec();
    let mut world = SimWorld::new(cfg.start, cfg.bias.to_pose(), None, rig, landmarks, cfg.seed);
    drive(cfg, &mut world, &cfg.start, &cfg.goal)
}

fn drive(cfg: &ScenarioConfig, world: &mut SimWorld, approach: &Pose7, goal: &Pose7) -> Result<RunTrace, PipelineError> {
    let rig = *world.rig();
    make_feature(goal, &rig, cfg.servo.half_side).map_err(|e| PipelineError::at(Stage::Approach)(PipelineFailure::Servo(e)))?;
    world.move_reported_to(approach);
    let first_truth = world.truth_log().len() - 1;
    let filter = PoseFilter::new(
        &world.reported_pose(),
        cfg.filter.particles,
        cfg.filter.window,
        cfg.filter.noise,
        world.landmarks.clone(),
    )
    .map_err(|e| PipelineError::at(Stage::Warmup)(PipelineFailure::Filter(e)))?;
    let mut filter_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    filter_rng.set_stream(1);
    let mut plant = WorldPlant {
        world,
        filter,
        mode: cfg.feedback,
        pixel_noise: cfg.pixel_noise,
        rng: filter_rng,
        cycles: Vec::new(),
    };
    for _ in 0..cfg.filter.warmup {
        plant.filter_cycle(&MotionCommand::zero()).map_err(PipelineError::at(Stage::Warmup))?;
    }
    let warmup = core::mem::take(&mut plant.cycles);

    let reads_before = plant.world.truth_reads();
    let servo = servo_loop(&mut plant, goal, &rig, &cfg.servo).map_err(|e| match e {
        LoopError::Servo(s) => PipelineError::at(Stage::Servo)(PipelineFailure::Servo(s)),
        LoopError::Plant(p) => PipelineError::at(Stage::Servo)(p),
    })?;
    let truth_reads_during_servo = plant.world.truth_reads() - reads_before;
    let cycles = core::mem::take(&mut plant.cycles);
    let world = plant.world;

    let truth = world.ground_truth();
    let sg = make_feature(goal, &rig, cfg.servo.half_side).map_err(|e| PipelineError::at(Stage::Servo)(PipelineFailure::Servo(e)))?;
    let image_error_true = make_feature(&truth, &rig, cfg.servo.half_side)
        .map(|f| (f.s - sg.s).norm())
        .unwrap_or(f64::INFINITY);
    let estimate = servo.final_estimate;
    let metrics = TerminalMetrics {
        image_error: servo.final_error,
        image_error_true,
        position_error: truth.distance_to(goal),
        orientation_error_deg: truth.angle_to(goal).to_degrees(),
        estimate_position_error: truth.distance_to(&estimate),
        estimate_orientation_error_deg: truth.angle_to(&estimate).to_degrees(),
    };
    Ok(RunTrace {
        seed: cfg.seed,
        feedback: cfg.feedback,
        cloud_points: 0,
        fit: None,
        grasp: None,
        goal: *goal,
        pregrasp: *approach,
        warmup,
        cycles,
        converged: servo.converged,
        servo,
        truth: world.truth_log()[first_truth..].to_vec(),
        metrics,
        truth_reads_during_servo,
    })
}

/// Static-hand filter run: the hand rests at `truth`, the filter starts at
/// the biased reading and runs `cycles` updates. Returns the smoothed
/// estimate's position error (m) and orientation error (rad).
pub fn filter_consistency_run(
    truth: &Pose7,
    bias: &Pose7,
    rig: &StereoRig,
    filter: &FilterConfig,
    pixel_noise: f64,
    cycles: usize,
    seed: u64,
) -> Result<(f64, f64, Vec<CycleRecord>), PipelineFailure> {
    let landmarks = hand_landmarks(crate::servo::DEFAULT_HALF_SIDE).to_vec();
    let mut world = SimWorld::new(*truth, *bias, None, *rig, landmarks.clone(), seed);
    let mut pf = PoseFilter::new(&world.reported_pose(), filter.particles, filter.window, filter.noise, landmarks).map_err(PipelineFailure::Filter)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut records = Vec::with_capacity(cycles);
    for _ in 0..cycles {
        let y = world.observe(pixel_noise).map_err(PipelineFailure::Servo)?;
        records.push(pf.cycle(&MotionCommand::zero(), &y, rig, &mut rng).map_err(PipelineFailure::Filter)?);
    }
    let e = pf.estimate();
    Ok((e.distance_to(truth), e.angle_to(truth), records))
}

/// Start and goal for comparing Jacobians: the hand faces the left camera at
/// `center`, starting `shift / 2` to the image right and ending `shift / 2`
/// to the image left, rolled by `roll` radians about the optical axis.
pub fn comparison_poses(rig: &StereoRig, center: &Vector3<f64>, shift: f64, roll: f64) -> (Pose7, Pose7) {
    let cam = rig.left.pose().rotation();
    let right = cam * Vector3::x();
    let axis = cam * Vector3::z();
    let base = facing_pose(center, rig);
    let start = Pose7::new(center + right * (shift / 2.0), *base.rotation());
    let goal = Pose7::new(center - right * (shift / 2.0), Rotation3::new(axis * roll) * base.rotation());
    (start, goal)
}

pub const COMPARISON_SHIFT: f64 = 0.10;
pub const COMPARISON_ROLL: f64 = 0.3;

pub type JacobianRuns = Vec<(JacobianChoice, Result<ServoTrace, ServoError>)>;

/// Kinematic runs of every Jacobian choice between the comparison poses
/// around the rig fixation point.
pub fn run_jacobian_comparison(cfg: &ScenarioConfig) -> Result<(Pose7, Pose7, JacobianRuns), PipelineError> {
    let rig = StereoRig::from_config(&cfg.rig).map_err(|e| PipelineError::at(Stage::Setup)(PipelineFailure::Geometry(e)))?;
    let (start, goal) = comparison_poses(&rig, &cfg.rig.fixation, COMPARISON_SHIFT, COMPARISON_ROLL);
    Ok((start, goal, compare_jacobians(&start, &goal, &rig, &cfg.servo)))
}

/// Feature vector of a pose, for callers holding only poses.
pub fn features_of(x: &Pose7, rig: &StereoRig, half_side: f64) -> Result<FeatureVector, ServoError> {
    make_feature(x, rig, half_side).map(|f| f.s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hand_pose() -> Pose7 {
        Pose7::from_array([-0.28, 0.08, 0.03, 0.213, -0.94, 0.265, 2.911])
    }

    fn world(bias: Pose7) -> SimWorld {
        SimWorld::new(hand_pose(), bias, None, StereoRig::default(), hand_landmarks(0.04).to_vec(), 3)
    }

    #[test]
    fn reported_pose_examples() {
        let w = world(Pose7::identity());
        assert_eq!(w.reported_pose(), w.ground_truth());
        let shift = Pose7::from_translation(Vector3::new(0.02, 0.0, 0.0));
        let w = world(shift);
        let t = w.ground_truth();
        assert_relative_eq!(w.reported_pose().position(), t.position() + t.rotation() * Vector3::new(0.02, 0.0, 0.0), epsilon = 1e-15);
        let tilt = Pose7::from_axis_angle(Vector3::zeros(), Vector3::new(1.0, 2.0, 0.5), 0.11);
        let w = world(tilt);
        assert_relative_eq!(w.reported_pose().angle_to(&w.ground_truth()), 0.11, epsilon = 1e-9);
    }

    #[test]
    fn bias_magnitudes() {
        let b = BiasConfig::default().to_pose();
        assert_relative_eq!(b.position().norm(), 0.025, epsilon = 1e-12);
        assert_relative_eq!(b.axis_angle().1.to_degrees(), 6.5, epsilon = 1e-9);
        assert_eq!(BiasConfig::zero().to_pose(), Pose7::identity());
    }

    #[test]
    fn noiseless_observation_is_exact_projection() {
        let mut w = world(Pose7::identity());
        let y = w.observe(0.0).unwrap();
        let pts = landmarks_at(&hand_pose(), &hand_landmarks(0.04));
        assert_eq!(y[0], VisualDescriptor::project(&w.rig().left, &pts));
        assert_eq!(y[1], VisualDescriptor::project(&w.rig().right, &pts));
    }

    #[test]
    fn observation_noise_has_requested_spread() {
        let mut w = world(Pose7::identity());
        let exact = w.observe(0.0).unwrap()[0].y[0];
        let n = 10_000;
        let samples: Vec<f64> = (0..n).map(|_| w.observe(1.5).unwrap()[0].y[0] - exact).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let sd = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd / 1.5 - 1.0).abs() < 0.05, "{sd}");
    }

    #[test]
    fn cloud_points_are_near_surface() {
        let obj = ObjectConfig::default().superquadric().unwrap();
        let mut w = SimWorld::new(hand_pose(), Pose7::identity(), Some(obj), StereoRig::default(), Vec::new(), 4);
        let cloud = w.observe_object([32, 40], 0.001).unwrap();
        assert!(cloud.len() > 300);
        // |F − 1| ≤ |∇F|·δ with δ = 5σ; F^(λ4/2) is roughly the scaled radial
        // distance, so compare in that form
        let e4 = obj.exponents()[0];
        let min_axis = obj.semi_axes().min();
        for p in &cloud.points {
            let r = obj.inside_outside(p).powf(e4 / 2.0);
            assert!((r - 1.0).abs() < 5.0 * 0.001 / min_axis * 2.0, "{r}");
        }
    }

    #[test]
    fn ideal_pipeline_reaches_goal() {
        let cfg = ScenarioConfig {
            bias: BiasConfig::zero(),
            pixel_noise: 0.0,
            cloud_noise: 0.0,
            feedback: FeedbackMode::Truth,
            ..ScenarioConfig::default()
        };
        let t = run_pipeline(&cfg).unwrap();
        assert!(t.converged, "{:?}", t.metrics);
        assert!(t.metrics.position_error < 1e-3, "{:?}", t.metrics);
    }

    #[test]
    fn pipeline_is_deterministic_and_blind_to_truth() {
        let cfg = ScenarioConfig::default();
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.truth_reads_during_servo, 0);
        assert!(a.converged);
        assert!(a.metrics.image_error < 1.0);
        assert!(a.metrics.position_error < 0.01, "{:?}", a.metrics);
    }

    #[test]
    fn comparison_goal_is_left_and_rolled() {
        let rig = StereoRig::default();
        let c = RigConfig::default().fixation;
        let (start, goal) = comparison_poses(&rig, &c, 0.1, 0.3);
        assert_relative_eq!(start.distance_to(&goal), 0.1, epsilon = 1e-12);
        assert_relative_eq!(start.angle_to(&goal), 0.3, epsilon = 1e-12);
        let fs = make_feature(&start, &rig, 0.04).unwrap();
        let fg = make_feature(&goal, &rig, 0.04).unwrap();
        let mean_u = |f: &crate::servo::StereoFeature| (0..4).map(|i| f.left(i).0).sum::<f64>() / 4.0;
        assert!(mean_u(&fg) < mean_u(&fs) - 20.0);
        assert!(fs.in_frame(&rig) && fg.in_frame(&rig));
    }

    #[test]
    fn presets_rest_on_the_default_table() {
        let table = ScenarioConfig::default().table;
        for o in [ObjectConfig::box_like(), ObjectConfig::bottle_like(), ObjectConfig::cylinder_like()] {
            let sq = o.superquadric().unwrap();
            let cloud = sample_surface(&sq, 30, 30, None).unwrap();
            let lowest = cloud.points.iter().map(|p| table.value(p)).fold(f64::INFINITY, f64::min);
            assert!(lowest > -1e-3 && lowest < 0.01, "{lowest}");
        }
    }
}
