use std::path::{Path, PathBuf};
use std::process::ExitCode;

use boussinesq_core::experiment::{self, ExperimentConfig, ExperimentKind};
use boussinesq_core::par::{self, Execution};
use boussinesq_core::Error;
use clap::{Args, Parser, Subcommand};

/// Stochastic Boussinesq laboratory.
#[derive(Parser, Debug)]
#[command(name = "bqlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 keeps the default pool).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Run seeds one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the SDE with a tracked particle; writes checkpoints.
    Simulate(Common),
    /// Top Lyapunov exponent ensemble.
    Lyapunov(Common),
    /// Random steering plans and a matrix plan, verified numerically.
    ControlDemo(Common),
    /// Closed-form brackets against finite differences.
    BracketCheck(Common),
    /// Gram matrices, cone probe and regularized controls.
    MalliavinProbe(Common),
    /// Smallest singular values of the span matrices.
    SpanCheck(Common),
    /// Unforced decay and forced linear variance.
    EnergyAudit(Common),
    /// Resume a checkpoint to the configured horizon, or re-verify a plan.
    Replay {
        /// A `.bqck` checkpoint or a plan JSON document.
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, kind: Option<ExperimentKind>) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(k) = kind {
        if common.config.is_some() && cfg.kind != k {
            log::info!("config kind {} overridden by subcommand {}", cfg.kind.name(), k.name());
        }
        cfg.kind = k;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.sequential {
        cfg.execution = Execution::Sequential;
    }
    Ok(cfg)
}

fn is_checkpoint(path: &Path) -> std::io::Result<bool> {
    use std::io::Read;
    let mut head = [0u8; 4];
    let n = std::fs::File::open(path)?.read(&mut head)?;
    Ok(n == 4 && &head == b"BQCK")
}

fn execute(cli: Cli) -> Result<(), Error> {
    let (common, kind) = match &cli.command {
        Command::Simulate(c) => (c, Some(ExperimentKind::Simulate)),
        Command::Lyapunov(c) => (c, Some(ExperimentKind::Lyapunov)),
        Command::ControlDemo(c) => (c, Some(ExperimentKind::ControlDemo)),
        Command::BracketCheck(c) => (c, Some(ExperimentKind::BracketCheck)),
        Command::MalliavinProbe(c) => (c, Some(ExperimentKind::MalliavinProbe)),
        Command::SpanCheck(c) => (c, Some(ExperimentKind::SpanCheck)),
        Command::EnergyAudit(c) => (c, Some(ExperimentKind::EnergyAudit)),
        Command::Replay { common, .. } => (common, None),
    };
    if common.threads > 0 {
        par::init_threads(common.threads);
    }
    let cfg = load(common, kind)?;
    match &cli.command {
        Command::Replay { path, common } => {
            if is_checkpoint(path)? {
                let rec = experiment::replay_checkpoint(&cfg, path, &common.out)?;
                println!("replayed to step {} -> {}", (cfg.horizon / cfg.dt).round(), common.out.display());
                log::info!("config hash {}", rec.config_hash);
            } else {
                let reports = experiment::replay_plan(path, &experiment::steering_options(&cfg), &common.out)?;
                for (i, r) in reports.iter().enumerate() {
                    println!(
                        "plan {i}: endpoint error {:.3e}, pde residual {:.3e}, |A| = {:.6e}",
                        r.endpoint_error, r.pde_residual, r.matrix_norm
                    );
                }
            }
        }
        _ => {
            let rec = experiment::run(&cfg, &common.out)?;
            let failed = rec.seeds.iter().filter(|s| !s.ok).count();
            println!(
                "{}: {} ({} of {} seeds failed) in {:.2}s -> {}",
                cfg.kind.name(),
                rec.status,
                failed,
                rec.seeds.len(),
                rec.wall_clock_seconds,
                common.out.display()
            );
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidGrid(_)
        | Error::InvalidParams(_)
        | Error::InvalidMode { .. }
        | Error::Checkpoint(_)
        | Error::TimeMisalignment(_)
        | Error::Json(_) => 2,
        Error::Divergence { .. } | Error::Cfl { .. } | Error::NonFiniteGradient { .. } | Error::Numerical(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
