use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pac_lti::bounds::{LambdaPolicy, Theorem};
use pac_lti::cli::{self, ExperimentConfig};
use pac_lti::Error;

#[derive(Parser)]
#[command(name = "pac-lti", version, about = "PAC-Bayesian bounds for LTI predictors learned from one trajectory")]
struct Args {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one trajectory CSV per horizon of the grid.
    Simulate,
    /// Bound reports and plot data over the horizon grid.
    Sweep,
    /// Lemma checks and coverage; exits with 1 if any check fails.
    Verify {
        /// Halve every G_e handed to the checks (fault injection).
        #[arg(long)]
        corrupt_ge: bool,
    },
    /// One bound at one horizon.
    Bound {
        #[arg(long, value_parser = parse_theorem)]
        theorem: Theorem,
        #[arg(long)]
        n: usize,
        /// `schedule`, `sqrt_n`, `half_max`, `star` or a number.
        #[arg(long, default_value = "star", value_parser = parse_policy)]
        lambda: LambdaPolicy,
    },
    /// The minimizing lambda for every horizon of the grid.
    LambdaStar,
}

fn parse_theorem(s: &str) -> Result<Theorem, String> {
    Theorem::ALL.into_iter().find(|t| t.id() == s).ok_or_else(|| {
        let ids: Vec<_> = Theorem::ALL.iter().map(|t| t.id()).collect();
        format!("expected one of {}", ids.join(", "))
    })
}

fn parse_policy(s: &str) -> Result<LambdaPolicy, String> {
    match s {
        "schedule" => Ok(LambdaPolicy::Schedule),
        "sqrt_n" => Ok(LambdaPolicy::SqrtN),
        "half_max" => Ok(LambdaPolicy::HalfMax),
        "star" => Ok(LambdaPolicy::Star),
        _ => s.parse::<f64>().map(LambdaPolicy::Fixed).map_err(|e| e.to_string()),
    }
}

fn load(args: &Args) -> Result<ExperimentConfig, Error> {
    let path = args.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(args: &Args) -> Result<bool, Error> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let cfg = load(args)?;
    match &args.command {
        Command::Simulate => {
            for p in cli::cmd_simulate(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Sweep => {
            let rows = cli::cmd_sweep(&cfg)?;
            println!("{} rows written to {}", rows.len(), cfg.out.join("bounds.csv").display());
        }
        Command::Verify { corrupt_ge } => {
            let outcome = cli::cmd_verify(&cfg, *corrupt_ge)?;
            let failed: Vec<_> = outcome.lemmas.iter().filter(|r| !r.pass).collect();
            for r in &failed {
                eprintln!("FAIL {} r={:?} N={:?}: observed {:e} > bound {:e}", r.lemma_id, r.r, r.n, r.observed, r.bound);
            }
            for c in outcome.coverage.iter().filter(|c| !c.pass) {
                eprintln!("FAIL coverage {} N={}: {} < {}", c.theorem, c.n, c.fraction, c.required);
            }
            println!("{} lemma checks, {} coverage studies", outcome.lemmas.len(), outcome.coverage.len());
            return Ok(outcome.all_pass());
        }
        Command::Bound { theorem, n, lambda } => match cli::cmd_bound(&cfg, *theorem, *n, *lambda)? {
            Some(r) => println!("{theorem} N={n} lambda={:e} r_N={:e} vacuous={}", r.lambda, r.r_n, r.vacuous),
            None => {
                eprintln!("lambda is not admissible for {theorem}");
                return Ok(false);
            }
        },
        Command::LambdaStar => {
            for (star, _) in cli::cmd_lambda_star(&cfg)? {
                println!("{} N={} lambda*={:e} r_N={:e}", star.theorem, star.n, star.lambda, star.r_n);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
