use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowprobe_core::error::exit;
use flowprobe_core::harness::{
    cmd_ablations, cmd_build_all, cmd_mech_sweep, cmd_replacement, cmd_report, render_pattern,
    ExperimentConfig, StageStatus,
};
use flowprobe_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "flowprobe",
    version,
    about = "Adapter transfer onto a distilled few-step flow backbone, with trajectory probes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts and results.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Multiply every identity count by this factor.
    #[arg(long, global = true)]
    id_scale: Option<f64>,

    /// Step counts for sweeps, e.g. `1,2,4,8`.
    #[arg(long, global = true, value_delimiter = ',')]
    steps: Option<Vec<usize>>,

    /// Worker threads for per-identity sampling (falls back to FLOWPROBE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Suppress stage progress on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build dataset, encoder, teacher, adapter, reflow and student artifacts.
    Build,
    /// Compare the teacher and the student with the same frozen adapter.
    Replacement,
    /// Step sweep of the teacher on the stress prompt, with the pattern check.
    MechSweep,
    /// Prompt-complexity and adapter-scale grids.
    Ablations,
    /// Collect all results into report.md.
    Report,
}

fn config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(scale) = cli.id_scale {
        cfg.scale_identities(scale)?;
    }
    if let Some(steps) = &cli.steps {
        cfg.sweep.steps_list = steps.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<i32, Error> {
    let cfg = config(cli)?;
    match cli.command {
        Command::Build => {
            let reports = cmd_build_all(&cfg, cli.quiet)?;
            for r in &reports {
                let status = match r.status {
                    StageStatus::Built => "built",
                    StageStatus::Skipped => "skipped",
                };
                println!("{:<8} {status:<8} {:>7.1}s {}", r.stage, r.seconds, r.detail);
            }
            Ok(exit::OK)
        }
        Command::Replacement => {
            let report = cmd_replacement(&cfg)?;
            print!("{}", report.render());
            Ok(exit::OK)
        }
        Command::MechSweep => {
            let outcome = cmd_mech_sweep(&cfg)?;
            print!("{}", render_pattern(&outcome.report, &outcome.window, cfg.sweep.theta));
            if outcome.phenomenon_present() {
                Ok(exit::OK)
            } else {
                eprintln!("invariants hold but the expected step-sweep pattern is absent");
                Ok(exit::PHENOMENON_ABSENT)
            }
        }
        Command::Ablations => {
            let outcome = cmd_ablations(&cfg)?;
            for g in [&outcome.prompt_grid, &outcome.alpha_grid] {
                for r in &g.rows {
                    println!("{} {r}: peak idsim {:.4}", g.row_label, g.peak(r).unwrap_or(f64::NAN));
                }
            }
            Ok(exit::OK)
        }
        Command::Report => {
            print!("{}", cmd_report(&cfg)?);
            Ok(exit::OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
