use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualfilter::acceptance::{self, Profile};
use dualfilter::commands::{self, Context};
use dualfilter::config::{DualAction, FilterKind, Tolerances};
use dualfilter::io::write_json;
use dualfilter::{CliError, ExperimentConfig, RayonExecutor, Result, ENV_OUT, ENV_THREADS};

#[derive(Parser)]
#[command(name = "dualfilter", version, about = "Filtering experiments through the dual control problem")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the configuration and DUALFILTER_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores); overrides DUALFILTER_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the path bundle and write the manifest.
    Simulate(Common),
    /// Run a filter over the bundle.
    Filter {
        #[command(flatten)]
        common: Common,
        /// Overrides `filter.kind` of the configuration.
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
    },
    /// Dual control computations on the bundle.
    Dual {
        #[command(flatten)]
        common: Common,
        /// Overrides `dual.action` of the configuration.
        #[arg(long, value_enum)]
        action: Option<ActionArg>,
    },
    /// Solve the deterministic linear-quadratic dual.
    Lq(Common),
    /// Run the acceptance suite.
    Acceptance {
        #[arg(long, value_enum, default_value = "quick")]
        profile: Profile,
        /// Configuration whose tolerances replace the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
enum KindArg {
    Wonham,
    Kalman,
    GridKushner,
    McKalman,
}

#[derive(Clone, Copy, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
enum ActionArg {
    Cost,
    Gap,
    PolicyIter,
    Martingale,
    Synthesis,
}

fn threads(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(ENV_THREADS) {
        Ok(v) => v
            .parse()
            .map_err(|_| CliError::config(format!("{ENV_THREADS} must be a nonnegative integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn out_dir(flag: Option<PathBuf>, configured: &Path) -> PathBuf {
    flag.or_else(|| std::env::var_os(ENV_OUT).map(PathBuf::from))
        .unwrap_or_else(|| configured.to_path_buf())
}

fn context(c: Common) -> Result<Context<RayonExecutor>> {
    let mut exp = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        exp.config.bundle.seed = seed;
    }
    let out = out_dir(c.out, &exp.config.output_dir);
    let exec = RayonExecutor::new(threads(c.threads)?)?;
    Ok(Context { exp, out, exec })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let ctx = context(c)?;
            let m = commands::simulate(&ctx)?;
            println!("simulated {} paths into {}", m.n_paths, ctx.out.display());
        }
        Command::Filter { common, kind } => {
            let ctx = context(common)?;
            let kind = match kind {
                Some(KindArg::Wonham) => FilterKind::Wonham,
                Some(KindArg::Kalman) => FilterKind::Kalman,
                Some(KindArg::GridKushner) => FilterKind::GridKushner,
                Some(KindArg::McKalman) => FilterKind::McKalman,
                None => ctx.exp.config.filter.kind,
            };
            let s = commands::filter(&ctx, kind)?;
            println!("{}: MSE {:.6e} (se {:.2e}) over {} paths", s.kind, s.mse.mean, s.mse.se, s.n_paths);
        }
        Command::Dual { common, action } => {
            let ctx = context(common)?;
            let action = match action {
                Some(ActionArg::Cost) => DualAction::Cost,
                Some(ActionArg::Gap) => DualAction::Gap,
                Some(ActionArg::PolicyIter) => DualAction::PolicyIter,
                Some(ActionArg::Martingale) => DualAction::Martingale,
                Some(ActionArg::Synthesis) => DualAction::Synthesis,
                None => ctx.exp.config.dual.action,
            };
            let doc = commands::dual(&ctx, action)?;
            println!("{}", serde_json::to_string(&doc).expect("report serializes"));
        }
        Command::Lq(c) => {
            let ctx = context(c)?;
            let doc = commands::lq(&ctx)?;
            println!("LQ value {:.10}", doc.solution.value);
        }
        Command::Acceptance {
            profile,
            config,
            out,
            threads: t,
            seed,
        } => {
            let (tol, configured) = match config {
                Some(path) => {
                    let exp = ExperimentConfig::load(&path)?;
                    (exp.config.tolerances, exp.config.output_dir)
                }
                None => (Tolerances::default(), PathBuf::from("out")),
            };
            let out = out_dir(out, &configured);
            let seed = seed.unwrap_or(acceptance::DEFAULT_SEED);
            let report = acceptance::run_suite(profile, &tol, seed, threads(t)?, |c, elapsed| {
                println!("{}", c.line(elapsed));
            })?;
            write_json(&out.join("acceptance.json"), &report)?;
            if !report.pass {
                return Err(CliError::Acceptance(format!("criteria {:?} failed", report.failed())));
            }
            println!("all {} criteria passed", report.criteria.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
