//! `sgf`: experiment runner and verification harness.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sgf_core::experiment::{
    self, build_model, ensure_passed, evaluate, extended_windows, generate_negatives,
    generate_target, shifted_windows, ExperimentConfig, ModelConfig,
};
use sgf_core::flow::sampler::write_trajectory_csv;
use sgf_core::flow::{sample, Integrator, Mlp, Optimizer, TrainConfig, VelocityModel};
use sgf_core::guidance::ScheduleMode;
use sgf_core::verify::run_suite;
use sgf_core::{Error, Result};

/// Overrides the configured output directory.
const OUTPUT_ENV: &str = "SGF_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "sgf", version, about = "Safety-guided flow sampling: toy experiments and verification suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    integrator: Option<IntegratorArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum IntegratorArg {
    Euler,
    Midpoint,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    EqualStrength,
    EqualBudget,
    ShiftedWindow,
}

#[derive(Clone, Copy, ValueEnum)]
enum WindowSet {
    /// [1.0,0.8], [0.8,0.6], ..., [0.2,0.0]
    Shifted,
    /// [1.0,0.8], [1.0,0.6], ..., [1.0,0.0]
    Extended,
}

#[derive(Subcommand)]
enum Command {
    /// Draw samples with the configured model and guidance, then evaluate them.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Disable guidance.
        #[arg(long)]
        unguided: bool,
        /// Also write the per-step trajectory.
        #[arg(long)]
        trajectory: bool,
    },
    /// Train the velocity network and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Use the single-core preset (batch 512, 2000 steps, lr 1e-3, Adam).
        #[arg(long)]
        desk: bool,
        /// Override the optimizer of the chosen preset.
        #[arg(long, value_enum)]
        optimizer: Option<OptimizerArg>,
        /// Checkpoint path; defaults to `<output>/model-<hash>.bin`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unguided, full-window and early-stop arms.
    Fig2 {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep guidance windows.
    AblateWindows {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "equal-budget")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "shifted")]
        windows: WindowSet,
    },
    /// Run a verification suite: prop1, prop2, cbf, gradcheck, ot or all.
    Verify { suite: String },
    /// Summarize the run records in a directory.
    Report { dir: PathBuf },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(n) = c.steps {
        cfg.sampler.steps = n;
    }
    if let Some(i) = c.integrator {
        cfg.sampler.integrator = match i {
            IntegratorArg::Euler => Integrator::Euler,
            IntegratorArg::Midpoint => Integrator::Midpoint,
        };
    }
    if let Ok(root) = std::env::var(OUTPUT_ENV) {
        cfg.output_dir = PathBuf::from(root);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_points_csv(path: &Path, pts: &sgf_core::PointSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["point_id".to_string()];
    header.extend((0..pts.dim()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (i, p) in pts.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(p.iter().map(|v| format!("{v:e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_sample(common: &Common, unguided: bool, trajectory: bool) -> Result<bool> {
    let mut cfg = load_config(common)?;
    cfg.sampler.record_trajectory = trajectory;
    let (model, _) = build_model(&cfg)?;
    let hash = cfg.hash()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let csv_path = dir.join("eval.csv");
    let fresh = !csv_path.exists();
    let mut summary = fs::OpenOptions::new().create(true).append(true).open(&csv_path)?;
    if fresh {
        writeln!(summary, "config_hash,guided,seed,w2_squared,unsafe_rate,mmd_to_target,n_points")?;
    }
    for &seed in &cfg.seeds {
        let negatives = generate_negatives(&cfg, seed)?;
        let target = generate_target(&cfg, seed)?;
        let mut sampler = cfg.sampler.clone();
        sampler.seed = seed;
        sampler.guidance = (!unguided).then(|| cfg.guidance.clone());
        let out = sample(&model, &sampler, &negatives, cfg.eval.n_eval)?;
        let report = evaluate(&cfg, &out.points, &target, seed)?;
        let tag = if unguided { "unguided" } else { "guided" };
        let stem = format!("sample-{hash}-{tag}-seed{seed}");
        write_points_csv(&dir.join(format!("{stem}.csv")), &out.points)?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&report)?)?;
        if trajectory {
            write_trajectory_csv(&dir.join(format!("{stem}-trajectory.csv")), &out.trajectory)?;
        }
        writeln!(
            summary,
            "{hash},{},{seed},{:e},{:e},{:e},{}",
            !unguided, report.w2_squared, report.unsafe_rate, report.mmd_to_target, report.n_points
        )?;
        println!(
            "seed {seed}: W2 {:.4}  unsafe {:.4}  MMD {:.5}",
            report.w2_squared, report.unsafe_rate, report.mmd_to_target
        );
    }
    Ok(true)
}

fn cmd_train(common: &Common, desk: bool, optimizer: Option<OptimizerArg>, out: Option<PathBuf>) -> Result<bool> {
    let mut cfg = load_config(common)?;
    let mut train = match (&cfg.model, desk) {
        (_, true) => TrainConfig::desk(),
        (ModelConfig::Trained(t), false) => t.clone(),
        _ => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        train.seed = s;
    }
    if let Some(o) = optimizer {
        train.optimizer = match o {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => Optimizer::Adam,
        };
    }
    cfg.model = ModelConfig::Trained(train.clone());
    let hash = cfg.hash()?;
    let (model, report) = build_model(&cfg)?;
    let VelocityModel::TrainedMlp(net) = model else {
        unreachable!("trained model requested");
    };
    fs::create_dir_all(&cfg.output_dir)?;
    let path = out.unwrap_or_else(|| cfg.output_dir.join(format!("model-{hash}.bin")));
    net.save(&path)?;
    let report = report.expect("training produces a report");
    fs::write(
        cfg.output_dir.join(format!("train-{hash}.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "held-out loss {:.4} -> {:.4} after {} steps; checkpoint {}",
        report.initial_holdout_loss,
        report.final_holdout_loss,
        report.steps,
        path.display()
    );
    // Round-trip check of the written checkpoint.
    let back = Mlp::load(&path)?;
    if back != net {
        return Err(Error::Verification("checkpoint did not round-trip".into()));
    }
    Ok(true)
}

fn finish(rec: &experiment::RunRecord, dir: &Path) -> Result<bool> {
    let (json, csv) = experiment::write_record(rec, dir)?;
    print!("{}", experiment::summarize(rec));
    println!("wrote {} and {}", json.display(), csv.display());
    match ensure_passed(rec) {
        Ok(()) => Ok(true),
        Err(e) => {
            eprintln!("{e}");
            Ok(false)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Sample {
            common,
            unguided,
            trajectory,
        } => cmd_sample(&common, unguided, trajectory),
        Command::Train {
            common,
            desk,
            optimizer,
            out,
        } => cmd_train(&common, desk, optimizer, out),
        Command::Fig2 { common } => {
            let cfg = load_config(&common)?;
            let rec = experiment::run_fig2(&cfg)?;
            finish(&rec, &cfg.output_dir)
        }
        Command::AblateWindows {
            common,
            mode,
            windows,
        } => {
            let cfg = load_config(&common)?;
            let mode = match mode {
                ModeArg::EqualStrength => ScheduleMode::EqualStrength,
                ModeArg::EqualBudget => ScheduleMode::EqualBudget,
                ModeArg::ShiftedWindow => ScheduleMode::ShiftedWindow,
            };
            let ws = match windows {
                WindowSet::Shifted => shifted_windows(),
                WindowSet::Extended => extended_windows(),
            };
            let rec = experiment::run_window_ablation(&cfg, &ws, mode)?;
            finish(&rec, &cfg.output_dir)
        }
        Command::Verify { suite } => {
            let rep = run_suite(&suite)?;
            print!("{rep}");
            Ok(rep.passed())
        }
        Command::Report { dir } => {
            let records = experiment::load_records(&dir)?;
            if records.is_empty() {
                println!("no run records in {}", dir.display());
            }
            let mut ok = true;
            for r in &records {
                print!("{}", experiment::summarize(r));
                println!();
                ok &= r.passed();
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
