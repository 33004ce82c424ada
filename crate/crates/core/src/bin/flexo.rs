//! Command-line front end for the flexible-optimization experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flexo_core::harness::{
    generate_example_scenario, frozen_scenario, render_solution_report, run_experiment, Command, RunOptions,
    Scenario,
};
use flexo_core::problem::Decision;
use flexo_core::saddle::ConstantsReport;
use flexo_core::FlexError;

#[derive(Parser)]
#[command(name = "flexo", version, about = "Flexible optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML); the frozen seven-user scenario when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory (overrides the scenario's).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the run-time random streams of the scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// B-PD / MS-PD iteration budget.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    realizations: Option<usize>,
    /// Flex-O iteration budget (replaces the sweep).
    #[arg(long = "T")]
    t: Option<usize>,
}

#[derive(Args, Clone)]
struct BoundsArgs {
    /// Evaluate the bounds at given constants instead of estimating them.
    #[arg(long, requires_all = ["lipschitz", "eps"])]
    mu: Option<f64>,
    #[arg(long)]
    lipschitz: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long = "B", default_value_t = 0.0)]
    b: f64,
    /// Step size at which the bounds are evaluated.
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the hyperbox-robust problem.
    Robust(Common),
    /// Stochastic primal-dual with real draws (aggregated over realizations).
    Bpd(Common),
    /// Model-based primal-dual under the misspecified model.
    Mspd(Common),
    /// Full workflow over the T sweep.
    Flexo(Common),
    /// True-model equilibrium.
    Reference(Common),
    /// Convergence constants, step-size range and error balls.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        bounds: BoundsArgs,
    },
    /// Vertex-oracle feasibility of a decision (JSON `{"x": [..], "beta": [..]}`).
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        decision: Option<PathBuf>,
    },
    /// Write a generated scenario file.
    GenExample {
        /// Generator seed; the frozen seven-user scenario when omitted.
        #[arg(long)]
        seed: Option<u64>,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_INVALID: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;

fn exit_code(err: &FlexError) -> u8 {
    match err {
        FlexError::NonConvergence { .. } => EXIT_NONCONVERGENCE,
        FlexError::Stage { source, .. } => exit_code(source),
        FlexError::Io(_) => 1,
        _ => EXIT_INVALID,
    }
}

fn load(common: &Common) -> Result<Scenario, FlexError> {
    let mut scenario = match &common.scenario {
        Some(path) => Scenario::load(path)?,
        None => frozen_scenario(),
    };
    if let Some(seed) = common.seed {
        scenario.seeds.override_runtime(seed);
    }
    if let Some(k) = common.iters {
        scenario.algorithm.iterations = k;
    }
    if let Some(r) = common.realizations {
        scenario.algorithm.realizations = r;
    }
    if let Some(t) = common.t {
        scenario.algorithm.t = t;
        scenario.algorithm.t_sweep = vec![t];
    }
    if let Some(dir) = &common.out {
        scenario.output.dir = dir.clone();
    }
    scenario.validate()?;
    Ok(scenario)
}

fn run(cli: Cli) -> Result<u8, FlexError> {
    let (command, common, options) = match cli.command {
        Cmd::GenExample { seed, out } => {
            let scenario = seed.map_or_else(frozen_scenario, generate_example_scenario);
            let text = scenario.to_toml_string()?;
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
            return Ok(0);
        }
        Cmd::Robust(c) => (Command::Robust, c, RunOptions::default()),
        Cmd::Bpd(c) => (Command::Bpd, c, RunOptions::default()),
        Cmd::Mspd(c) => (Command::Mspd, c, RunOptions::default()),
        Cmd::Flexo(c) => (Command::Flexo, c, RunOptions::default()),
        Cmd::Reference(c) => (Command::Reference, c, RunOptions::default()),
        Cmd::Bounds { common, bounds } => {
            let constants = match bounds.mu {
                Some(mu) => Some(ConstantsReport::from_constants(
                    mu,
                    bounds.lipschitz.unwrap_or_default(),
                    bounds.eps.unwrap_or_default(),
                    bounds.sigma,
                    bounds.b,
                )?),
                None => None,
            };
            let mut scenario = load(&common)?;
            if let Some(eta) = bounds.eta {
                scenario.algorithm.eta = eta;
            }
            return finish(&scenario, Command::Bounds, &RunOptions { constants, decision: None });
        }
        Cmd::Check { common, decision } => {
            let decision = match decision {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)?;
                    Some(serde_json::from_str::<Decision>(&text).map_err(|e| FlexError::Scenario(e.to_string()))?)
                }
                None => None,
            };
            (Command::Check, common, RunOptions { decision, constants: None })
        }
    };
    let scenario = load(&common)?;
    finish(&scenario, command, &options)
}

fn finish(scenario: &Scenario, command: Command, options: &RunOptions) -> Result<u8, FlexError> {
    let output = run_experiment(scenario, command, options)?;
    let written = output.write(&scenario.output.dir)?;
    let text = render_solution_report(&output.report)?;
    let human = text.split(flexo_core::harness::MACHINE_MARKER).next().unwrap_or_default();
    print!("{human}");
    for path in written {
        println!("wrote {}", path.display());
    }
    if output.report.check.as_ref().is_some_and(|c| !c.feasible) {
        return Ok(EXIT_INFEASIBLE);
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
