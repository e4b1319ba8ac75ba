//! CSV traces. Every file starts with a header row.

use std::io::Write;

use sqservo_core::servo::ServoTrace;
use sqservo_core::sim::RunTrace;
use sqservo_core::Pose7;

use crate::experiments::TrialRecord;

pub type CsvResult = Result<(), csv::Error>;

fn pose_header(prefix: &str) -> Vec<String> {
    ["x", "y", "z", "ax", "ay", "az", "angle"].iter().map(|k| format!("{prefix}{k}")).collect()
}

fn feature_header() -> Vec<String> {
    (0..4)
        .flat_map(|i| ["ul", "ur", "vl", "vr"].map(move |k| format!("{k}{i}")))
        .collect()
}

/// One row per servo step: errors, gains, commanded twist, feedback pose,
/// true pose when known, and the 16 feedback features. The last row is the
/// terminal state with an empty command.
pub fn write_servo_steps<W: Write>(w: W, trace: &ServoTrace, truth: Option<&[Pose7]>) -> CsvResult {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["iteration", "error_norm", "e_t_norm", "e_o_norm", "gain_t", "gain_o", "vx", "vy", "vz", "wx", "wy", "wz"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(pose_header("est_"));
    header.extend(pose_header("true_"));
    header.extend(feature_header());
    out.write_record(&header)?;
    let blank = || String::new();
    let pose_cells = |p: Option<&Pose7>| -> Vec<String> {
        match p {
            Some(p) => p.to_array().iter().map(|v| v.to_string()).collect(),
            None => vec![blank(); 7],
        }
    };
    for s in &trace.steps {
        let c = &s.control;
        let mut row = vec![s.iteration.to_string()];
        row.extend([c.error_norm, c.e_t_norm, c.e_o_norm, c.gain_t, c.gain_o].iter().map(|v| v.to_string()));
        row.extend(c.twist.linear.iter().chain(c.twist.angular.iter()).map(|v| v.to_string()));
        row.extend(pose_cells(Some(&s.estimate)));
        row.extend(pose_cells(truth.and_then(|t| t.get(s.iteration))));
        row.extend(s.features.iter().map(|v| v.to_string()));
        out.write_record(&row)?;
    }
    let mut row = vec![trace.iterations.to_string(), trace.final_error.to_string()];
    row.extend(std::iter::repeat_n(blank(), 10));
    row.extend(pose_cells(Some(&trace.final_estimate)));
    row.extend(pose_cells(truth.and_then(|t| t.get(trace.iterations))));
    row.extend(trace.final_features.iter().map(|v| v.to_string()));
    out.write_record(&row)?;
    out.flush()?;
    Ok(())
}

pub fn write_run<W: Write>(w: W, run: &RunTrace) -> CsvResult {
    write_servo_steps(w, &run.servo, Some(&run.truth))
}

pub const TRIAL_HEADER: [&str; 17] = [
    "group",
    "feedback",
    "trial",
    "seed",
    "status",
    "converged",
    "iterations",
    "image_error",
    "image_error_true",
    "position_error",
    "orientation_error_deg",
    "estimate_position_error",
    "estimate_orientation_error_deg",
    "final_x",
    "final_y",
    "final_z",
    "failure",
];

/// Per-trial terminal metrics. Failed trials keep their row with empty
/// metric cells and the failure message.
pub fn write_trials<W: Write>(w: W, trials: &[TrialRecord]) -> CsvResult {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRIAL_HEADER)?;
    for t in trials {
        let mut row = vec![t.group.clone(), t.feedback.label().to_string(), t.trial.to_string(), t.seed.to_string()];
        match &t.outcome {
            Ok(m) => {
                row.push("ok".into());
                row.push(m.converged.to_string());
                row.push(m.iterations.to_string());
                row.extend(
                    [
                        m.image_error,
                        m.image_error_true,
                        m.position_error,
                        m.orientation_error_deg,
                        m.estimate_position_error,
                        m.estimate_orientation_error_deg,
                        m.final_position[0],
                        m.final_position[1],
                        m.final_position[2],
                    ]
                    .iter()
                    .map(|v| v.to_string()),
                );
                row.push(String::new());
            }
            Err(f) => {
                row.push(format!("failed:{}", f.stage));
                row.extend(std::iter::repeat_n(String::new(), 11));
                row.push(f.message.clone());
            }
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Left and right image tracks of the four feature points, one row per
/// variant, step and point.
pub fn write_image_tracks<W: Write>(w: W, series: &[(&str, &ServoTrace)]) -> CsvResult {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["variant", "iteration", "point", "u_left", "v_left", "u_right", "v_right"])?;
    for (label, trace) in series {
        let frames = trace
            .steps
            .iter()
            .map(|s| (s.iteration, &s.features))
            .chain(std::iter::once((trace.iterations, &trace.final_features)));
        for (k, s) in frames {
            for i in 0..4 {
                out.write_record([
                    label.to_string(),
                    k.to_string(),
                    i.to_string(),
                    s[4 * i].to_string(),
                    s[4 * i + 2].to_string(),
                    s[4 * i + 1].to_string(),
                    s[4 * i + 3].to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
