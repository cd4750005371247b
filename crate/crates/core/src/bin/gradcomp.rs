use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gradcomp::harness::{
    cmd_aggregate, cmd_sweep, config_hash, execute_run, load_run_config, ReportKind,
};
use gradcomp::simulator::RunStatus;
use gradcomp::Error;

/// Simulate compressed data-parallel SGD and sweep the compression grid.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Default root for outputs when `--out` is omitted.
    #[arg(long, env = "GRADCOMP_OUT_ROOT", global = true)]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the non-resetting early-stopping counter.
        #[arg(long)]
        legacy_patience: bool,
    },
    /// Random-search every grid cell of a sweep spec.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        legacy_patience: bool,
    },
    /// Build a tidy CSV report from sweep directories.
    Aggregate {
        /// perf_vs_ratio, time_stack, convergence or hyperparam_dist
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn resolve(
    out: Option<PathBuf>,
    root: &Option<PathBuf>,
    name: impl AsRef<Path>,
) -> gradcomp::Result<PathBuf> {
    match (out, root) {
        (Some(out), _) => Ok(out),
        (None, Some(root)) => Ok(root.join(name)),
        (None, None) => Err(Error::config("out", "pass --out or set GRADCOMP_OUT_ROOT")),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. }
                | Error::LevelsNotPowerOfTwo(_)
                | Error::WorkerCountRequired => 2,
                Error::Io { .. } | Error::Data { .. } => 3,
                _ => 1,
            })
        }
    }
}

fn execute(cli: Cli) -> gradcomp::Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            legacy_patience,
        } => {
            let out = resolve(out, &cli.out_root, stem(&config))?;
            let mut cfg = load_run_config(&config)?;
            cfg.legacy_patience |= legacy_patience;
            let result = execute_run(&cfg, &out)?;
            let status = match result.status {
                RunStatus::Completed => "completed",
                RunStatus::Diverged => "diverged",
            };
            println!(
                "{status}: {} epochs, best val CE {}, config {} -> {}",
                result.epochs.len(),
                result
                    .best_val_ce
                    .map_or("n/a".to_string(), |v| format!("{v:.6}")),
                config_hash(&cfg),
                out.display()
            );
        }
        Command::Sweep {
            spec,
            out,
            jobs,
            legacy_patience,
        } => {
            let out = resolve(out, &cli.out_root, stem(&spec))?;
            let rows = cmd_sweep(&spec, &out, jobs, legacy_patience)?;
            let ok = rows.iter().filter(|r| r.succeeded()).count();
            println!("{ok}/{} runs completed -> {}", rows.len(), out.display());
        }
        Command::Aggregate { kind, out, dirs } => {
            let report: ReportKind = kind.parse()?;
            let out = resolve(out, &cli.out_root, format!("{kind}.csv"))?;
            let rows = cmd_aggregate(report, &dirs, &out)?;
            println!("{rows} rows -> {}", out.display());
        }
    }
    Ok(())
}
