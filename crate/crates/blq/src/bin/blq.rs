//! Command-line front end: load a problem file, solve, verify, or run the
//! eps-limit study, writing CSV and JSON artifacts.
//!
//! Exit codes: 0 success, 2 invalid input or failed validation, 3 solver
//! failure, 4 verification criteria failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use blq::pipeline::{
    run_eps_study, run_solve, run_validate, run_verify, Defect, RouteChoice, RunConfig,
    VerifySettings,
};

#[derive(Parser)]
#[command(
    name = "blq",
    version,
    about = "Riccati-based solver for backward LQ optimal control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Problem definition file (JSON).
    problem: PathBuf,
    /// Number of time steps K.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Number of Monte Carlo paths M.
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    /// RNG seed for the path ensemble.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Polynomial degree of the regression basis.
    #[arg(long, default_value_t = 4)]
    degree: usize,
    /// Drop the rational feature 1/(1+w^2) from the basis.
    #[arg(long)]
    no_rational: bool,
    /// Comma-separated decreasing eps sequence for the perturbation route.
    #[arg(long, value_delimiter = ',', default_value = "1,0.1,0.01,0.001")]
    eps: Vec<f64>,
    /// Riccati route: auto, ode, eps, or markov.
    #[arg(long, default_value = "auto")]
    route: String,
    /// Cap the rayon worker count.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Audit the standing assumptions of a problem file.
    Validate(CommonArgs),
    /// Solve the control problem and write Sigma.csv, control.csv,
    /// triple.csv, report.json.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write the Brownian ensemble to paths.csv.
        #[arg(long)]
        dump_paths: bool,
    },
    /// Solve and run the verification battery; exit 4 on failed criteria.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Inject a defect before verification: control or state.
        #[arg(long)]
        inject_defect: Option<String>,
        /// Steps for the conjugate-gradient oracle comparison.
        #[arg(long, default_value_t = 20)]
        oracle_steps: usize,
        /// Paths for the conjugate-gradient oracle comparison.
        #[arg(long, default_value_t = 200)]
        oracle_paths: usize,
    },
    /// Convergence table of the eps-perturbation limit.
    EpsStudy(CommonArgs),
}

fn to_config(common: &CommonArgs) -> Result<RunConfig, blq::Error> {
    let mut config = RunConfig::new(common.problem.clone(), common.out.clone());
    config.steps = common.steps;
    config.paths = common.paths;
    config.seed = common.seed;
    config.degree = common.degree;
    config.rational = !common.no_rational;
    config.eps_sequence = common.eps.clone();
    config.route = RouteChoice::parse(&common.route)?;
    Ok(config)
}

fn init_threads(threads: Option<usize>) {
    if let Some(t) = threads {
        // Ignore the error if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code() as u8
        }
    };
    ExitCode::from(code)
}

fn run(cli: Cli) -> Result<u8, blq::Error> {
    match cli.command {
        Command::Validate(common) => {
            init_threads(common.threads);
            let config = to_config(&common)?;
            let report = run_validate(&config)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.all_ok() { 0 } else { 2 })
        }
        Command::Solve { common, dump_paths } => {
            init_threads(common.threads);
            let mut config = to_config(&common)?;
            config.dump_paths = dump_paths;
            let report = run_solve(&config)?;
            println!(
                "route={} control_norm={:.6e} cost={:.6e} (stderr {:.2e}) -> {}",
                report.route,
                report.control_l2_norm,
                report.cost.total,
                report.cost.stderr,
                config.out_dir.display()
            );
            Ok(0)
        }
        Command::Verify {
            common,
            inject_defect,
            oracle_steps,
            oracle_paths,
        } => {
            init_threads(common.threads);
            let mut config = to_config(&common)?;
            if let Some(d) = &inject_defect {
                config.inject_defect = Some(Defect::parse(d)?);
            }
            let settings = VerifySettings {
                oracle_steps,
                oracle_paths,
                seed: config.seed,
                ..VerifySettings::default()
            };
            let report = run_verify(&config, &settings)?;
            println!(
                "stationarity={} variational={} oracle={} fbsde={} fixed_point={} overall={}",
                report.verification.pass_stationarity,
                report.verification.pass_variational,
                report.verification.pass_oracle,
                report.pass_fbsde,
                report.pass_fixed_point,
                report.overall_pass
            );
            Ok(if report.overall_pass { 0 } else { 4 })
        }
        Command::EpsStudy(common) => {
            init_threads(common.threads);
            let config = to_config(&common)?;
            let (table, _) = run_eps_study(&config)?;
            println!("{}", serde_json::to_string_pretty(&table)?);
            Ok(if table.all_monotone { 0 } else { 3 })
        }
    }
}
