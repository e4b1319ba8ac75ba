//! Desk-scale experiment runners and their metric reports.

use std::fmt;

use rayon::prelude::*;
use sqservo_core::geometry::StereoRig;
use sqservo_core::servo::{JacobianChoice, ServoError, ServoTrace};
use sqservo_core::sim::{run_jacobian_comparison, run_pipeline, run_reaching, FeedbackMode, ObjectConfig, PipelineError, PipelineFailure, RunTrace, ScenarioConfig, Stage};
use sqservo_core::Pose7;

use crate::io::KvRecord;

/// Terminal metrics of one completed trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialMetrics {
    pub converged: bool,
    pub iterations: usize,
    pub image_error: f64,
    pub image_error_true: f64,
    pub position_error: f64,
    pub orientation_error_deg: f64,
    pub estimate_position_error: f64,
    pub estimate_orientation_error_deg: f64,
    /// True hand position at termination.
    pub final_position: [f64; 3],
}

impl TrialMetrics {
    pub fn from_run(run: &RunTrace) -> Self {
        let m = &run.metrics;
        let p = run.truth.last().map(|x| x.position()).unwrap_or_default();
        Self {
            converged: run.converged,
            iterations: run.servo.iterations,
            image_error: m.image_error,
            image_error_true: m.image_error_true,
            position_error: m.position_error,
            orientation_error_deg: m.orientation_error_deg,
            estimate_position_error: m.estimate_position_error,
            estimate_orientation_error_deg: m.estimate_orientation_error_deg,
            final_position: [p.x, p.y, p.z],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialFailure {
    pub stage: String,
    pub message: String,
}

impl From<&PipelineError> for TrialFailure {
    fn from(e: &PipelineError) -> Self {
        Self {
            stage: e.stage.to_string(),
            message: e.failure.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub group: String,
    pub feedback: FeedbackMode,
    pub trial: usize,
    pub seed: u64,
    pub outcome: Result<TrialMetrics, TrialFailure>,
}

/// Aggregates over the completed trials of one group and feedback mode.
/// Each aggregate is the root mean square of the per-trial terminal errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub group: String,
    pub feedback: FeedbackMode,
    pub trials: usize,
    pub completed: usize,
    pub converged: usize,
    pub irmse: f64,
    pub irmse_true: f64,
    pub prmse: f64,
    pub ormse: f64,
}

pub fn rms<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let (n, s) = values.into_iter().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v * v));
    if n == 0 {
        f64::NAN
    } else {
        (s / n as f64).sqrt()
    }
}

impl ReportRow {
    pub fn from_trials(group: &str, feedback: FeedbackMode, trials: &[TrialRecord]) -> Self {
        let ok: Vec<&TrialMetrics> = trials
            .iter()
            .filter(|t| t.group == group && t.feedback == feedback)
            .filter_map(|t| t.outcome.as_ref().ok())
            .collect();
        let total = trials.iter().filter(|t| t.group == group && t.feedback == feedback).count();
        Self {
            group: group.to_string(),
            feedback,
            trials: total,
            completed: ok.len(),
            converged: ok.iter().filter(|m| m.converged).count(),
            irmse: rms(ok.iter().map(|m| m.image_error)),
            irmse_true: rms(ok.iter().map(|m| m.image_error_true)),
            prmse: rms(ok.iter().map(|m| m.position_error)),
            ormse: rms(ok.iter().map(|m| m.orientation_error_deg)),
        }
    }

    pub fn all_converged(&self) -> bool {
        self.completed == self.trials && self.converged == self.trials
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub experiment: &'static str,
    pub rows: Vec<ReportRow>,
    pub trials: Vec<TrialRecord>,
}

/// Outcome class that selects the process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    AllConverged,
    NotConverged,
    StageFailure,
}

impl MetricsReport {
    pub fn row(&self, group: &str, feedback: FeedbackMode) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.group == group && r.feedback == feedback)
    }

    pub fn verdict(&self) -> Verdict {
        if self.trials.iter().any(|t| t.outcome.is_err()) {
            Verdict::StageFailure
        } else if self.trials.iter().all(|t| t.outcome.as_ref().is_ok_and(|m| m.converged)) {
            Verdict::AllConverged
        } else {
            Verdict::NotConverged
        }
    }

    /// One-line key-value summary.
    pub fn summary(&self) -> KvRecord {
        let mut r = KvRecord::new();
        r.push("experiment", self.experiment);
        r.push("trials", self.trials.len());
        r.push(
            "converged",
            self.trials.iter().filter(|t| t.outcome.as_ref().is_ok_and(|m| m.converged)).count(),
        );
        r.push("failed", self.trials.iter().filter(|t| t.outcome.is_err()).count());
        for row in &self.rows {
            let p = format!("{}_{}_", row.group, row.feedback.label());
            r.push(format!("{p}irmse"), row.irmse);
            r.push(format!("{p}irmse_true"), row.irmse_true);
            r.push(format!("{p}prmse"), row.prmse);
            r.push(format!("{p}ormse"), row.ormse);
            r.push(format!("{p}converged"), row.converged);
            r.push(format!("{p}completed"), row.completed);
        }
        r
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:<15} {:>9} {:>10} {:>10} {:>10} {:>10}",
            "object", "feedback", "conv", "IRMSE px", "IRMSE* px", "PRMSE m", "ORMSE deg"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:<15} {:>4}/{:<4} {:>10.3} {:>10.3} {:>10.4} {:>10.3}",
                r.group,
                r.feedback.label(),
                r.converged,
                r.trials,
                r.irmse,
                r.irmse_true,
                r.prmse,
                r.ormse
            )?;
        }
        for t in &self.trials {
            if let Err(e) = &t.outcome {
                writeln!(f, "failed: {} {} trial {} (seed {}) at {}: {}", t.group, t.feedback.label(), t.trial, t.seed, e.stage, e.message)?;
            }
        }
        write!(f, "IRMSE* uses ground-truth hand features")
    }
}

/// Seed of trial `k`.
pub fn trial_seed(cfg: &ScenarioConfig, k: usize) -> u64 {
    cfg.seed.wrapping_add(k as u64)
}

fn map_trials<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, parallel: bool, f: F) -> Vec<T> {
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

pub fn experiment1_objects() -> [(&'static str, ObjectConfig); 3] {
    [
        ("box", ObjectConfig::box_like()),
        ("bottle", ObjectConfig::bottle_like()),
        ("cylinder", ObjectConfig::cylinder_like()),
    ]
}

pub struct Experiment1 {
    pub report: MetricsReport,
    /// Runs in the order of `report.trials`; `None` for failed trials.
    pub runs: Vec<Option<RunTrace>>,
}

/// Full pipeline on each object, once with filter feedback and once with raw
/// proprioception, over `trials` seeds. The configured object is replaced by
/// each preset in turn; everything else is taken from `cfg`.
pub fn experiment1(cfg: &ScenarioConfig, trials: usize, parallel: bool) -> Experiment1 {
    let modes = [FeedbackMode::Filter, FeedbackMode::Proprioception];
    let objects = experiment1_objects();
    let jobs: Vec<(&str, ObjectConfig, FeedbackMode, usize)> = objects
        .iter()
        .flat_map(|&(name, obj)| modes.iter().flat_map(move |&fb| (0..trials).map(move |k| (name, obj, fb, k))))
        .collect();
    let results = map_trials(jobs.len(), parallel, |j| {
        let (name, object, feedback, k) = jobs[j];
        let seed = trial_seed(cfg, k);
        let run = run_pipeline(&ScenarioConfig { seed, object, feedback, ..*cfg });
        record(name, feedback, k, seed, run)
    });
    let (trials_out, runs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let rows = objects
        .iter()
        .flat_map(|&(name, _)| modes.iter().map(move |&fb| (name, fb)))
        .map(|(name, fb)| ReportRow::from_trials(name, fb, &trials_out))
        .collect();
    Experiment1 {
        report: MetricsReport {
            experiment: "experiment1",
            rows,
            trials: trials_out,
        },
        runs,
    }
}

fn record(group: &str, feedback: FeedbackMode, trial: usize, seed: u64, run: Result<RunTrace, PipelineError>) -> (TrialRecord, Option<RunTrace>) {
    let outcome = run.as_ref().map(TrialMetrics::from_run).map_err(TrialFailure::from);
    (
        TrialRecord {
            group: group.to_string(),
            feedback,
            trial,
            seed,
            outcome,
        },
        run.ok(),
    )
}

pub struct Experiment2 {
    pub report: MetricsReport,
    pub runs: Vec<Option<RunTrace>>,
    /// Largest distance between the terminal true positions of two completed
    /// trials, meters.
    pub position_spread: f64,
}

/// Repeated reaching from `cfg.start` to `cfg.goal` with `cfg.feedback`.
pub fn experiment2(cfg: &ScenarioConfig, trials: usize, parallel: bool) -> Experiment2 {
    let results = map_trials(trials, parallel, |k| {
        let seed = trial_seed(cfg, k);
        record("reaching", cfg.feedback, k, seed, run_reaching(&ScenarioConfig { seed, ..*cfg }))
    });
    let (trials_out, runs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let finals: Vec<[f64; 3]> = trials_out.iter().filter_map(|t| t.outcome.as_ref().ok()).map(|m| m.final_position).collect();
    let mut spread: f64 = 0.0;
    for (i, a) in finals.iter().enumerate() {
        for b in &finals[i + 1..] {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            spread = spread.max(d);
        }
    }
    let rows = vec![ReportRow::from_trials("reaching", cfg.feedback, &trials_out)];
    Experiment2 {
        report: MetricsReport {
            experiment: "experiment2",
            rows,
            trials: trials_out,
        },
        runs,
        position_spread: spread,
    }
}

pub struct VariantRun {
    pub choice: JacobianChoice,
    pub run: Result<ServoTrace, ServoError>,
    pub in_frame: bool,
}

pub struct JacobianComparison {
    pub start: Pose7,
    pub goal: Pose7,
    pub variants: Vec<VariantRun>,
}

impl JacobianComparison {
    pub fn summary(&self) -> KvRecord {
        let mut r = KvRecord::new();
        r.push("experiment", "jacobian-compare");
        r.push("straight_line", self.start.distance_to(&self.goal));
        for v in &self.variants {
            let l = v.choice.label();
            match &v.run {
                Ok(t) => {
                    r.push(format!("{l}_converged"), t.converged);
                    r.push(format!("{l}_iterations"), t.iterations);
                    r.push(format!("{l}_final_error"), t.final_error);
                    r.push(format!("{l}_path_length"), t.path_length());
                }
                Err(e) => {
                    r.push(format!("{l}_converged"), false);
                    r.push(format!("{l}_error"), format!("{e:?}").replace(' ', ""));
                }
            }
            r.push(format!("{l}_in_frame"), v.in_frame);
        }
        r
    }

    pub fn decoupled(&self) -> Option<&VariantRun> {
        self.variants.iter().find(|v| v.choice == JacobianChoice::Decoupled)
    }
}

pub fn jacobian_compare(cfg: &ScenarioConfig) -> Result<JacobianComparison, PipelineError> {
    let (start, goal, runs) = run_jacobian_comparison(cfg)?;
    let rig = StereoRig::from_config(&cfg.rig).map_err(|e| PipelineError {
        stage: Stage::Setup,
        failure: PipelineFailure::Geometry(e),
    })?;
    let variants = runs
        .into_iter()
        .map(|(choice, run)| {
            let in_frame = run.as_ref().is_ok_and(|t| t.stays_in_frame(&rig));
            VariantRun { choice, run, in_frame }
        })
        .collect();
    Ok(JacobianComparison { start, goal, variants })
}
