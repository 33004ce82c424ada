//! Scenario files, the n = 7 corridor generator and experiment orchestration.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::flexo::{run_flexo, PipelineConfig};
use crate::problem::{corridor, vertex_feasibility_oracle, Decision, FlexProblem, RobustCertificate, SOLVER_FEAS_TOL, VERTEX_ORACLE_CAP};
use crate::response::ResponseModel;
use crate::robust::{build_reformulation, solve_reformulation, SolveReport, SolverSettings};
use crate::saddle::{
    bpd_run, compute_reference_equilibrium, constraint_violation_metric, convergence_bounds, estimate_constants,
    mspd_run, ChanceParams, ConstantsReport, ConvergenceBounds, CvMethod, EstimatorSettings, IterateTrace,
    ReferenceEquilibrium, ReferenceSettings, SaddlePoint, SearchRegion, TraceOptions,
};

pub mod report;

pub use report::{parse_solution_report, read_trace_csv, render_solution_report, write_solution_report, write_trace_csv, TraceRow, TraceTable, MACHINE_MARKER};

/// Seed of the frozen seven-user scenario.
pub const FROZEN_SEED: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpecs {
    #[serde(rename = "true")]
    pub truth: ResponseModel,
    pub misspecified: ResponseModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlgorithmSettings {
    pub eta: f64,
    /// Step size of the reference fixed-point computation.
    pub reference_eta: f64,
    pub reference_step_tol: f64,
    pub reference_max_iters: usize,
    /// Iteration budget of B-PD and MS-PD runs.
    pub iterations: usize,
    /// Flex-O budget used when no sweep is given.
    pub t: usize,
    pub t_sweep: Vec<usize>,
    pub realizations: usize,
    pub guard: bool,
    pub round: bool,
    pub resolution: f64,
    pub cv_samples: usize,
    pub cv_window: usize,
}

impl Default for AlgorithmSettings {
    fn default() -> Self {
        AlgorithmSettings {
            eta: 0.05,
            reference_eta: 0.01,
            reference_step_tol: 1e-10,
            reference_max_iters: 1_000_000,
            iterations: 10_000,
            t: 500,
            t_sweep: vec![50, 500, 5000],
            realizations: 50,
            guard: true,
            round: false,
            resolution: 0.1,
            cv_samples: 10_000,
            cv_window: 100,
        }
    }
}

/// One seed per random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub weights: u64,
    pub x_ref: u64,
    pub model_noise: u64,
    pub bpd: u64,
    pub estimators: u64,
}

impl Seeds {
    pub fn from_base(seed: u64) -> Self {
        Seeds {
            weights: seed,
            x_ref: seed.wrapping_add(1),
            model_noise: seed.wrapping_add(2),
            bpd: seed.wrapping_add(3),
            estimators: seed.wrapping_add(4),
        }
    }

    /// Replaces the streams consumed at run time; the problem data is untouched.
    pub fn override_runtime(&mut self, seed: u64) {
        let base = Seeds::from_base(seed);
        self.model_noise = base.model_noise;
        self.bpd = base.bpd;
        self.estimators = base.estimators;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSettings {
    pub dir: PathBuf,
}

impl Default for OutputSettings {
    fn default() -> Self {
        OutputSettings { dir: PathBuf::from("out") }
    }
}

/// Everything a run needs; two runs of the same scenario agree bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seeds: Seeds,
    pub problem: FlexProblem,
    pub chance: ChanceParams,
    pub region: SearchRegion,
    pub models: ModelSpecs,
    #[serde(default)]
    pub algorithm: AlgorithmSettings,
    #[serde(default)]
    pub estimators: EstimatorSettings,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub output: OutputSettings,
}

fn invalid(e: FlexError) -> FlexError {
    match e {
        FlexError::Scenario(_) => e,
        other => FlexError::Scenario(other.to_string()),
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| FlexError::Scenario(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FlexError::Scenario(format!("cannot read {}: {e}", path.display())))?;
        Scenario::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FlexError::Scenario(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.chance.validate().map_err(invalid)?;
        self.region.validate().map_err(invalid)?;
        if self.region.n() != self.problem.n() {
            return Err(FlexError::Scenario(format!(
                "region has {} users, problem has {}",
                self.region.n(),
                self.problem.n()
            )));
        }
        for model in [self.models.truth, self.models.misspecified] {
            ResponseModel::new(model.shift, model.noise).map_err(invalid)?;
        }
        let a = &self.algorithm;
        let positive = [("eta", a.eta), ("reference_eta", a.reference_eta), ("resolution", a.resolution)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(FlexError::Scenario(format!("{name} must be positive, got {v}")));
        }
        if a.realizations == 0 || a.cv_window == 0 || a.cv_samples == 0 {
            return Err(FlexError::Scenario(
                "realizations, cv_window and cv_samples must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn pipeline_config(&self, t: usize) -> PipelineConfig {
        PipelineConfig {
            t,
            guard: self.algorithm.guard,
            round: self.algorithm.round,
            resolution: self.algorithm.resolution,
            eta: self.algorithm.eta,
            chance: self.chance,
            region: self.region.clone(),
            model_ms: self.models.misspecified,
            solver: self.solver.clone(),
        }
    }
}

/// The n = 7 corridor experiment: weights from U(0.1, 1), reference levels
/// from N(19.5, 1), gamma = 2n, unit corridor bounds.
pub fn generate_example_scenario(seed: u64) -> Scenario {
    generate_corridor_scenario(seed, 7, false)
}

pub fn generate_corridor_scenario(seed: u64, n: usize, two_sided: bool) -> Scenario {
    let seeds = Seeds::from_base(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.weights);
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..=1.0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.x_ref);
    let normal = Normal::new(19.5, 1.0).expect("valid normal");
    let x_ref: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let (d, e) = corridor(n, 1.0, two_sided);
    let problem = FlexProblem::new(0.001, 0.01, weights, x_ref, 2.0 * n as f64, d, e).expect("valid generated problem");
    let region = SearchRegion::around(problem.x_ref(), 5.0, 1.0, 100.0).expect("valid region");
    Scenario {
        name: format!("corridor-{seed}"),
        seeds,
        problem,
        chance: ChanceParams::default(),
        region,
        models: ModelSpecs {
            truth: ResponseModel::thermostat_true(),
            misspecified: ResponseModel::thermostat_misspecified(),
        },
        algorithm: AlgorithmSettings::default(),
        estimators: EstimatorSettings::default(),
        solver: SolverSettings::default(),
        output: OutputSettings::default(),
    }
}

/// The frozen scenario the qualitative checks run on.
pub fn frozen_scenario() -> Scenario {
    Scenario {
        name: "frozen-7".into(),
        ..generate_example_scenario(FROZEN_SEED)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Robust,
    Bpd,
    Mspd,
    Flexo,
    Reference,
    Bounds,
    Check,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Robust => "robust",
            Command::Bpd => "bpd",
            Command::Mspd => "mspd",
            Command::Flexo => "flexo",
            Command::Reference => "reference",
            Command::Bounds => "bounds",
            Command::Check => "check",
        }
    }
}

impl std::str::FromStr for Command {
    type Err = FlexError;

    fn from_str(s: &str) -> Result<Self> {
        [
            Command::Robust,
            Command::Bpd,
            Command::Mspd,
            Command::Flexo,
            Command::Reference,
            Command::Bounds,
            Command::Check,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| FlexError::Scenario(format!("unknown command `{s}`")))
    }
}

/// One line of the solution table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRow {
    pub algorithm: String,
    pub x: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda: Option<Vec<f64>>,
    pub objective: f64,
    /// Windowed `<CV(z)>` under the true law.
    pub cv: Option<f64>,
    /// Vertex-oracle verdict on `(x, beta)`.
    pub robust_feasible: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub iterations: usize,
    pub final_step: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSummary {
    pub constants: ConstantsReport,
    pub bounds: ConvergenceBounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub command: String,
    pub rows: Vec<SolutionRow>,
    pub reference: Option<ReferenceSummary>,
    pub bounds: Option<BoundsSummary>,
    pub check: Option<RobustCertificate>,
    /// File names of the emitted traces, relative to the output directory.
    pub traces: Vec<String>,
}

/// A named trace table to be written next to the report.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTrace {
    pub file: String,
    pub table: TraceTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub traces: Vec<NamedTrace>,
    pub reference_point: Option<SaddlePoint>,
}

impl ExperimentOutput {
    pub fn report_file(&self) -> String {
        format!("{}_report.txt", self.report.command)
    }

    /// Writes every trace and the report into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for trace in &self.traces {
            let path = dir.join(&trace.file);
            write_trace_csv(&trace.table, &path)?;
            written.push(path);
        }
        let path = dir.join(self.report_file());
        write_solution_report(&self.report, &path)?;
        written.push(path);
        Ok(written)
    }
}

/// Optional inputs a command may take besides the scenario.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Decision examined by `check` (defaults to the robust solution).
    pub decision: Option<Decision>,
    /// Constants used by `bounds` instead of the estimators.
    pub constants: Option<ConstantsReport>,
}

fn robust_solution(scenario: &Scenario) -> Result<SolveReport> {
    let report = solve_reformulation(&build_reformulation(&scenario.problem), &scenario.solver)?;
    if !report.converged {
        return Err(FlexError::NonConvergence {
            stage: "robust solve",
            residual: report.kkt_residual,
            iterations: report.iterations,
        });
    }
    Ok(report)
}

fn reference(scenario: &Scenario, robust: &Decision) -> Result<ReferenceEquilibrium> {
    compute_reference_equilibrium(
        &scenario.problem,
        &scenario.chance,
        &scenario.region,
        &scenario.models.truth,
        scenario.algorithm.reference_eta,
        &SaddlePoint::primal(robust.clone(), scenario.problem.m()),
        &ReferenceSettings {
            step_tol: scenario.algorithm.reference_step_tol,
            max_iters: scenario.algorithm.reference_max_iters,
        },
    )
}

fn oracle_verdict(problem: &FlexProblem, decision: &Decision) -> Option<bool> {
    if problem.n() > VERTEX_ORACLE_CAP {
        return problem.robust_worst_margin(decision).ok().map(|m| m <= SOLVER_FEAS_TOL);
    }
    vertex_feasibility_oracle(problem, decision, SOLVER_FEAS_TOL).ok().map(|c| c.feasible)
}

/// Windowed `<CV(z)>` with its own random stream per row.
fn window_cv(scenario: &Scenario, decisions: &[Decision], stream: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seeds.model_noise);
    rng.set_stream(stream);
    constraint_violation_metric(
        &scenario.problem,
        decisions,
        &scenario.models.truth,
        CvMethod::MonteCarlo {
            samples: scenario.algorithm.cv_samples,
        },
        &mut rng,
    )
}

fn row(scenario: &Scenario, algorithm: String, point: &SaddlePoint, window: &[Decision], stream: u64) -> Result<SolutionRow> {
    Ok(SolutionRow {
        algorithm,
        x: point.y.x().to_vec(),
        beta: point.y.beta().to_vec(),
        lambda: Some(point.lambda.clone()),
        objective: scenario.problem.objective(&point.y)?,
        cv: Some(window_cv(scenario, window, stream)?),
        robust_feasible: oracle_verdict(&scenario.problem, &point.y),
    })
}

fn decision_row(scenario: &Scenario, algorithm: String, decision: &Decision, stream: u64) -> Result<SolutionRow> {
    Ok(SolutionRow {
        algorithm,
        x: decision.x().to_vec(),
        beta: decision.beta().to_vec(),
        lambda: None,
        objective: scenario.problem.objective(decision)?,
        cv: Some(window_cv(scenario, std::slice::from_ref(decision), stream)?),
        robust_feasible: oracle_verdict(&scenario.problem, decision),
    })
}

fn tail_decisions(trace: &IterateTrace) -> Vec<Decision> {
    trace.tail.iter().map(|p| p.y.clone()).collect()
}

fn reference_summary(scenario: &Scenario, r: &ReferenceEquilibrium) -> ReferenceSummary {
    ReferenceSummary {
        iterations: r.iterations,
        final_step: r.final_step,
        eta: scenario.algorithm.reference_eta,
    }
}

fn empty_report(scenario: &Scenario, command: Command) -> ExperimentReport {
    ExperimentReport {
        scenario: scenario.name.clone(),
        command: command.name().to_string(),
        rows: Vec::new(),
        reference: None,
        bounds: None,
        check: None,
        traces: Vec::new(),
    }
}

/// Per-iteration mean and standard deviation of several distance traces.
pub fn aggregate_traces(traces: &[IterateTrace]) -> TraceTable {
    let first = &traces[0];
    let count = traces.len() as f64;
    let rows = (0..first.records.len())
        .map(|k| {
            let d: Vec<f64> = traces
                .iter()
                .map(|t| t.records[k].dist_to_ref.unwrap_or(f64::NAN))
                .collect();
            let mean = d.iter().sum::<f64>() / count;
            let var = if traces.len() > 1 {
                d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0)
            } else {
                0.0
            };
            let rec = &first.records[k];
            TraceRow {
                iter: rec.k,
                dist_to_ref: rec.dist_to_ref,
                objective: rec.objective,
                cv_estimate: rec.cv_estimate,
                dist_mean: Some(mean),
                dist_sd: Some(var.sqrt()),
            }
        })
        .collect();
    TraceTable { aggregated: true, rows }
}

/// Dispatches one command on a scenario. Nothing is written to disk.
pub fn run_experiment(scenario: &Scenario, command: Command, options: &RunOptions) -> Result<ExperimentOutput> {
    scenario.validate()?;
    let mut report = empty_report(scenario, command);
    let mut traces = Vec::new();
    let mut reference_point = None;
    let p = &scenario.problem;
    let alg = &scenario.algorithm;

    match command {
        Command::Robust => {
            let robust = robust_solution(scenario)?;
            report.rows.push(decision_row(scenario, "robust".into(), &robust.decision, 0)?);
        }
        Command::Reference => {
            let robust = robust_solution(scenario)?;
            let r = reference(scenario, &robust.decision)?;
            report.rows.push(row(scenario, "reference (true model)".into(), &r.point, std::slice::from_ref(&r.point.y), 0)?);
            report.reference = Some(reference_summary(scenario, &r));
            reference_point = Some(r.point);
        }
        Command::Bpd | Command::Mspd => {
            let robust = robust_solution(scenario)?;
            let r = reference(scenario, &robust.decision)?;
            let start = SaddlePoint::primal(robust.decision.clone(), p.m());
            let options = TraceOptions {
                reference: Some(r.point.clone()),
                cv_model: Some(scenario.models.truth),
                keep_tail: alg.cv_window,
            };
            if command == Command::Bpd {
                let runs: Vec<IterateTrace> = (0..alg.realizations)
                    .into_par_iter()
                    .map(|k| {
                        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seeds.bpd);
                        rng.set_stream(k as u64);
                        bpd_run(p, &scenario.chance, &scenario.region, &scenario.models.truth, alg.eta, alg.iterations, &start, &mut rng, &options)
                    })
                    .collect::<Result<_>>()?;
                let first = &runs[0];
                report.rows.push(row(scenario, "B-PD".into(), &first.last, &tail_decisions(first), 0)?);
                traces.push(NamedTrace {
                    file: "bpd_trace.csv".into(),
                    table: aggregate_traces(&runs),
                });
            } else {
                let trace = mspd_run(p, &scenario.chance, &scenario.region, &scenario.models.misspecified, alg.eta, alg.iterations, &start, None, &options)?;
                report.rows.push(row(scenario, "MS-PD".into(), &trace.last, &tail_decisions(&trace), 0)?);
                traces.push(NamedTrace {
                    file: "mspd_trace.csv".into(),
                    table: TraceTable::from_trace(&trace),
                });
            }
            report.rows.push(row(scenario, "reference (true model)".into(), &r.point, std::slice::from_ref(&r.point.y), 1)?);
            report.reference = Some(reference_summary(scenario, &r));
            reference_point = Some(r.point);
        }
        Command::Flexo => {
            let robust = robust_solution(scenario)?;
            let r = reference(scenario, &robust.decision)?;
            let sweep = if alg.t_sweep.is_empty() { vec![alg.t] } else { alg.t_sweep.clone() };
            let results: Vec<_> = sweep
                .par_iter()
                .map(|&t| run_flexo(p, &scenario.pipeline_config(t), Some(&scenario.models.truth), Some(&r.point)))
                .collect::<Result<_>>()?;
            report.rows.push(decision_row(scenario, "robust".into(), &robust.decision, 0)?);
            for (i, (t, (assignment, trace))) in sweep.iter().zip(&results).enumerate() {
                report.rows.push(decision_row(scenario, format!("Flex-O T={t}"), &assignment.decision, i as u64 + 1)?);
                traces.push(NamedTrace {
                    file: format!("flexo_T{t}_trace.csv"),
                    table: TraceTable::from_trace(trace),
                });
            }
            report.reference = Some(reference_summary(scenario, &r));
            reference_point = Some(r.point);
        }
        Command::Bounds => {
            let constants = match options.constants {
                Some(c) => c,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seeds.estimators);
                    estimate_constants(
                        p,
                        &scenario.chance,
                        &scenario.region,
                        &scenario.models.truth,
                        Some(&scenario.models.misspecified),
                        &scenario.estimators,
                        &mut rng,
                    )?
                }
            };
            let bounds = convergence_bounds(&constants, alg.eta)?;
            report.bounds = Some(BoundsSummary { constants, bounds });
        }
        Command::Check => {
            let decision = match &options.decision {
                Some(d) => d.clone(),
                None => robust_solution(scenario)?.decision,
            };
            let cert = vertex_feasibility_oracle(p, &decision, SOLVER_FEAS_TOL)?;
            report.rows.push(SolutionRow {
                algorithm: "checked".into(),
                x: decision.x().to_vec(),
                beta: decision.beta().to_vec(),
                lambda: None,
                objective: p.objective(&decision)?,
                cv: None,
                robust_feasible: Some(cert.feasible),
            });
            report.check = Some(cert);
        }
    }
    report.traces = traces.iter().map(|t| t.file.clone()).collect();
    Ok(ExperimentOutput {
        report,
        traces,
        reference_point,
    })
}
