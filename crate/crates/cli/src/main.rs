use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use setspray::experiment::{emit_plot_data, run_matrix, ExperimentConfig, Preset, RunOptions};

/// Exit code when a set-based cell exceeds the FOV limit.
const EXIT_FOV_VIOLATION: u8 = 3;
/// Exit code when at least one cell failed to simulate.
const EXIT_CELL_FAILURE: u8 = 4;

#[derive(Parser)]
#[command(name = "setspray", version, about = "Spray-painting IK experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment matrix and write traces and a comparison report.
    Run(RunArgs),
    /// Convert a trace CSV into column files for plotting.
    Plotdata {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "source")]
struct Source {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in matrix: table1 (equal spray speed) or table2 (equal end-effector speed).
    #[arg(long)]
    preset: Option<Preset>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    /// Output directory; overrides the one in the config.
    #[arg(long, env = "SETSPRAY_OUT")]
    out: Option<PathBuf>,
    /// Number of worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let config = match (&args.source.config, args.source.preset) {
        (Some(path), _) => {
            ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        (None, Some(preset)) => ExperimentConfig::preset(preset),
        (None, None) => unreachable!("clap requires --config or --preset"),
    };
    let out = args.out.unwrap_or_else(|| config.output_dir.clone());
    let options = RunOptions {
        jobs: args.jobs,
        output_dir: Some(out.clone()),
    };
    let report = run_matrix(&config, &options)?;
    print!("{report}");
    println!("wrote {}", out.display());

    let failures: Vec<_> = report.failures().collect();
    for row in &failures {
        eprintln!(
            "cell r={} L={} v={} {} failed: {}",
            row.r,
            row.length,
            row.velocity,
            row.approach,
            row.error.as_deref().unwrap_or("")
        );
    }
    let violations = report.fov_violations();
    for row in &violations {
        let fov = row.metrics.as_ref().map_or(f64::NAN, |m| m.max_fov_deg);
        eprintln!(
            "FOV limit exceeded: r={} L={} v={} {} reached {fov:.3} deg",
            row.r, row.length, row.velocity, row.approach
        );
    }
    Ok(if !violations.is_empty() {
        ExitCode::from(EXIT_FOV_VIOLATION)
    } else if !failures.is_empty() {
        ExitCode::from(EXIT_CELL_FAILURE)
    } else {
        ExitCode::SUCCESS
    })
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Plotdata { trace, out } => {
            for path in emit_plot_data(&trace, &out)? {
                println!("{}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
