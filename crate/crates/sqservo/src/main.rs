use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sqservo::config;
use sqservo::experiments::{self, MetricsReport, Verdict};
use sqservo::io::{self, KvRecord};
use sqservo::trace;
use sqservo_core::grasp::{solve_grasp, GraspOptions};
use sqservo_core::sim::ScenarioConfig;
use sqservo_core::superquadric::fit_superquadric;

/// Exit status when some trial did not reach the image-error threshold.
const EXIT_NOT_CONVERGED: u8 = 3;
/// Exit status when some trial or standalone solve failed outright.
const EXIT_STAGE_FAILURE: u8 = 4;

#[derive(Parser)]
#[command(name = "sqservo", version, about = "Superquadric grasping and filter-fed stereo visual servoing, simulated")]
struct Cli {
    /// Scenario file (TOML). Missing keys take the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed. Trial k uses seed + k.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of trials per group.
    #[arg(long, global = true, default_value_t = 10)]
    trials: usize,
    /// Directory for CSV traces and the key-value summary.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run trials on all cores. Results do not depend on this flag.
    #[arg(long, global = true)]
    parallel: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Grasping pipeline on three objects, filter versus raw proprioception.
    Experiment1,
    /// Repeated reaching between the configured start and goal poses.
    Experiment2,
    /// One motion under each of the four image-Jacobian choices.
    JacobianCompare,
    /// Fits a superquadric to an XYZ point cloud.
    Fit {
        cloud: PathBuf,
        /// Point noise level, meters.
        #[arg(long, default_value_t = 0.001)]
        noise: f64,
    },
    /// Computes a grasp pose for a superquadric record file.
    Grasp { superquadric: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => config::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    match &cli.command {
        Command::Experiment1 => {
            let exp = experiments::experiment1(&cfg, cli.trials, cli.parallel);
            if let Some(dir) = &cli.out {
                write_report(dir, &exp.report, &exp.report.summary())?;
                let traces = dir.join("traces");
                fs::create_dir_all(&traces)?;
                for (t, run) in exp.report.trials.iter().zip(&exp.runs) {
                    if let Some(run) = run {
                        let name = format!("{}_{}_{:02}.csv", t.group, t.feedback.label(), t.trial);
                        trace::write_run(fs::File::create(traces.join(name))?, run)?;
                    }
                }
            }
            println!("{}", exp.report);
            println!("{}", exp.report.summary());
            Ok(exit_for(exp.report.verdict()))
        }
        Command::Experiment2 => {
            let exp = experiments::experiment2(&cfg, cli.trials, cli.parallel);
            let mut summary = exp.report.summary();
            summary.push("position_spread", exp.position_spread);
            if let Some(dir) = &cli.out {
                write_report(dir, &exp.report, &summary)?;
                let traces = dir.join("traces");
                fs::create_dir_all(&traces)?;
                for (t, run) in exp.report.trials.iter().zip(&exp.runs) {
                    if let Some(run) = run {
                        trace::write_run(fs::File::create(traces.join(format!("reaching_{:02}.csv", t.trial)))?, run)?;
                    }
                }
            }
            println!("{}", exp.report);
            println!("{summary}");
            Ok(exit_for(exp.report.verdict()))
        }
        Command::JacobianCompare => {
            let cmp = experiments::jacobian_compare(&cfg)?;
            let summary = cmp.summary();
            if let Some(dir) = &cli.out {
                fs::write(dir.join("summary.txt"), format!("{summary}\n"))?;
                let series: Vec<(&str, &sqservo_core::servo::ServoTrace)> = cmp
                    .variants
                    .iter()
                    .filter_map(|v| v.run.as_ref().ok().map(|t| (v.choice.label(), t)))
                    .collect();
                trace::write_image_tracks(fs::File::create(dir.join("tracks.csv"))?, &series)?;
            }
            for v in &cmp.variants {
                match &v.run {
                    Ok(t) => println!(
                        "{:<10} converged={} iterations={} final_error={:.3} in_frame={}",
                        v.choice.label(),
                        t.converged,
                        t.iterations,
                        t.final_error,
                        v.in_frame
                    ),
                    Err(e) => println!("{:<10} failed: {e}", v.choice.label()),
                }
            }
            println!("{summary}");
            let ok = cmp.decoupled().is_some_and(|d| d.in_frame && d.run.as_ref().is_ok_and(|t| t.converged));
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(EXIT_NOT_CONVERGED) })
        }
        Command::Fit { cloud, noise } => {
            let pc = io::load_xyz(cloud).with_context(|| format!("reading {}", cloud.display()))?;
            match fit_superquadric(&pc, *noise) {
                Ok((sq, report)) => {
                    let mut rec = io::superquadric_record(&sq, "");
                    rec.push("points", pc.len())
                        .push("cost", report.cost)
                        .push("residual_rms", report.residual_rms)
                        .push("iterations", report.iterations)
                        .push("stop", format!("{:?}", report.stop).to_lowercase());
                    if let Some(dir) = &cli.out {
                        io::save_superquadric(&dir.join("superquadric.txt"), &sq)?;
                    }
                    println!("{rec}");
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("fit failed: {e}");
                    Ok(ExitCode::from(EXIT_STAGE_FAILURE))
                }
            }
        }
        Command::Grasp { superquadric } => {
            let sq = io::load_superquadric(superquadric).with_context(|| format!("reading {}", superquadric.display()))?;
            let opts = GraspOptions {
                points: cfg.grasp.points,
                clearance: cfg.grasp.clearance,
                ..GraspOptions::default()
            };
            match solve_grasp(&sq, &cfg.grasp.hand, &cfg.table, &opts) {
                Ok(g) => {
                    let mut rec = KvRecord::new();
                    for (k, v) in ["x", "y", "z", "roll", "pitch", "yaw"].iter().zip(g.pose.to_array()) {
                        rec.push(*k, v);
                    }
                    let min_margin = g.constraint_margins.iter().copied().fold(f64::INFINITY, f64::min);
                    rec.push("cost", g.cost)
                        .push("initial_cost", g.initial_cost)
                        .push("min_margin", min_margin)
                        .push("start", g.start_index);
                    if let Some(dir) = &cli.out {
                        fs::write(dir.join("grasp.txt"), format!("{rec}\n"))?;
                    }
                    println!("{rec}");
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("grasp failed: {e}");
                    Ok(ExitCode::from(EXIT_STAGE_FAILURE))
                }
            }
        }
    }
}

fn write_report(dir: &Path, report: &MetricsReport, summary: &KvRecord) -> Result<()> {
    fs::write(dir.join("summary.txt"), format!("{summary}\n"))?;
    trace::write_trials(fs::File::create(dir.join("trials.csv"))?, &report.trials)?;
    Ok(())
}

fn exit_for(v: Verdict) -> ExitCode {
    match v {
        Verdict::AllConverged => ExitCode::SUCCESS,
        Verdict::NotConverged => ExitCode::from(EXIT_NOT_CONVERGED),
        Verdict::StageFailure => ExitCode::from(EXIT_STAGE_FAILURE),
    }
}
