//! The end-to-end workflow: robust warm start, `T` model-based primal-dual
//! steps, optional guarding, optional inner rounding, per-user intervals.

use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::problem::{vertex_feasibility_oracle, Decision, FlexProblem, RobustCertificate, SOLVER_FEAS_TOL, VERTEX_ORACLE_CAP};
use crate::response::{expected_constraints, ResponseModel};
use crate::robust::{build_reformulation, guard_project, inner_round, solve_reformulation, SolveReport, SolverSettings};
use crate::saddle::{mspd_run, ChanceParams, IterateTrace, SaddlePoint, SearchRegion, TraceOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Model-based primal-dual iteration budget.
    pub t: usize,
    pub guard: bool,
    pub round: bool,
    /// Grid step of the inner rounding of `beta`.
    pub resolution: f64,
    pub eta: f64,
    pub chance: ChanceParams,
    pub region: SearchRegion,
    pub model_ms: ResponseModel,
    pub solver: SolverSettings,
}

impl PipelineConfig {
    pub fn new(region: SearchRegion, model_ms: ResponseModel) -> Self {
        PipelineConfig {
            t: 500,
            guard: true,
            round: false,
            resolution: 0.1,
            eta: 0.05,
            chance: ChanceParams::default(),
            region,
            model_ms,
            solver: SolverSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.chance.validate()?;
        self.region.validate()?;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(FlexError::param("eta", format!("must be positive, got {}", self.eta)));
        }
        if self.round && !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(FlexError::param(
                "resolution",
                format!("must be positive when rounding, got {}", self.resolution),
            ));
        }
        Ok(())
    }
}

/// One user's admissible set `[x_i - beta_i, x_i + beta_i]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserInterval {
    pub user: usize,
    pub center: f64,
    pub radius: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Intermediate decisions of every stage that ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub robust: Decision,
    pub robust_kkt_residual: f64,
    /// Last model-based iterate, when `T > 0`.
    pub primal_dual: Option<Decision>,
    pub guarded: Option<Decision>,
    pub rounded: Option<Decision>,
    pub stages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexibleAssignment {
    pub decision: Decision,
    pub intervals: Vec<UserInterval>,
    pub provenance: Provenance,
    /// `max_j E[h_j]` under the true law, when one was supplied.
    pub cv_estimate: Option<f64>,
    /// Vertex-oracle certificate of the output, when guarded.
    pub certificate: Option<RobustCertificate>,
}

/// Per-user interval records of a decision.
pub fn user_sets(decision: &Decision) -> Vec<UserInterval> {
    decision
        .x()
        .iter()
        .zip(decision.beta())
        .enumerate()
        .map(|(user, (&center, &radius))| UserInterval {
            user,
            center,
            radius,
            lower: center - radius,
            upper: center + radius,
        })
        .collect()
}

pub fn emit_user_sets(assignment: &FlexibleAssignment) -> Vec<UserInterval> {
    user_sets(&assignment.decision)
}

fn stage<T>(name: &'static str, result: Result<T>) -> Result<T> {
    result.map_err(|e| e.in_stage(name))
}

fn require_converged(name: &'static str, report: &SolveReport) -> Result<()> {
    if report.converged {
        Ok(())
    } else {
        Err(FlexError::NonConvergence {
            stage: name,
            residual: report.kkt_residual,
            iterations: report.iterations,
        }
        .in_stage(name))
    }
}

/// Runs the workflow. `reference` only feeds the trace's distance column;
/// `true_model` only feeds the CV columns and the final CV estimate.
pub fn run_flexo(
    problem: &FlexProblem,
    config: &PipelineConfig,
    true_model: Option<&ResponseModel>,
    reference: Option<&SaddlePoint>,
) -> Result<(FlexibleAssignment, IterateTrace)> {
    config.validate()?;
    let robust = stage("robust", solve_reformulation(&build_reformulation(problem), &config.solver))?;
    require_converged("robust", &robust)?;
    let mut stages = vec!["robust".to_string()];

    let start = SaddlePoint::primal(robust.decision.clone(), problem.m());
    let options = TraceOptions {
        reference: reference.cloned(),
        cv_model: true_model.cloned(),
        keep_tail: 0,
    };
    let trace = stage(
        "primal-dual",
        mspd_run(problem, &config.chance, &config.region, &config.model_ms, config.eta, config.t, &start, None, &options),
    )?;
    let mut decision = robust.decision.clone();
    let primal_dual = (config.t > 0).then(|| {
        stages.push("primal-dual".to_string());
        decision = trace.last.y.clone();
        decision.clone()
    });

    let mut certificate = None;
    let guarded = if config.guard {
        let report = stage("guard", guard_project(problem, &decision, &config.solver))?;
        require_converged("guard", &report)?;
        stages.push("guard".to_string());
        decision = report.decision;
        Some(decision.clone())
    } else {
        None
    };
    let rounded = if config.round {
        decision = stage("round", inner_round(&decision, config.resolution))?;
        stages.push("round".to_string());
        Some(decision.clone())
    } else {
        None
    };
    if config.guard && problem.n() <= VERTEX_ORACLE_CAP {
        let cert = stage("guard", vertex_feasibility_oracle(problem, &decision, SOLVER_FEAS_TOL))?;
        if !cert.feasible {
            return Err(FlexError::NonConvergence {
                stage: "guard",
                residual: cert.worst_margin,
                iterations: 0,
            }
            .in_stage("guard"));
        }
        certificate = Some(cert);
    }

    let cv_estimate = true_model.map(|model| {
        expected_constraints(problem, &decision, &model.laws(&decision))
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let assignment = FlexibleAssignment {
        intervals: user_sets(&decision),
        decision,
        provenance: Provenance {
            robust: robust.decision,
            robust_kkt_residual: robust.kkt_residual,
            primal_dual,
            guarded,
            rounded,
            stages,
        },
        cv_estimate,
        certificate,
    };
    Ok((assignment, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::corridor;

    fn instance() -> FlexProblem {
        let (d, e) = corridor(3, 1.0, false);
        FlexProblem::new(0.001, 0.01, vec![0.3, 0.9, 0.6], vec![19.2, 20.4, 19.8], 6.0, d, e).unwrap()
    }

    fn config(p: &FlexProblem) -> PipelineConfig {
        PipelineConfig::new(
            SearchRegion::around(p.x_ref(), 5.0, 1.0, 100.0).unwrap(),
            ResponseModel::thermostat_misspecified(),
        )
    }

    #[test]
    fn degenerate_pipeline_is_the_robust_solution() {
        let p = instance();
        let cfg = PipelineConfig {
            t: 0,
            guard: false,
            round: false,
            ..config(&p)
        };
        let (a, trace) = run_flexo(&p, &cfg, None, None).unwrap();
        let robust = solve_reformulation(&build_reformulation(&p), &SolverSettings::default()).unwrap();
        assert_eq!(a.decision, robust.decision);
        assert_eq!(trace.len(), 1);
        assert_eq!(a.provenance.stages, vec!["robust"]);
    }

    #[test]
    fn guarded_output_passes_the_oracle() {
        let p = instance();
        let cfg = PipelineConfig {
            t: 50,
            round: true,
            ..config(&p)
        };
        let (a, _) = run_flexo(&p, &cfg, Some(&ResponseModel::thermostat_true()), None).unwrap();
        assert!(vertex_feasibility_oracle(&p, &a.decision, SOLVER_FEAS_TOL).unwrap().feasible);
        assert!(a.certificate.unwrap().feasible);
        assert_eq!(a.provenance.stages, vec!["robust", "primal-dual", "guard", "round"]);
        assert!(a.cv_estimate.is_some());
    }

    #[test]
    fn intervals() {
        let y = Decision::new(vec![19.4, 20.0], vec![1.0, 0.0]).unwrap();
        let sets = user_sets(&y);
        assert!((sets[0].lower - 18.4).abs() < 1e-12 && (sets[0].upper - 20.4).abs() < 1e-12);
        assert_eq!(sets[1].lower, sets[1].upper);
        let text = serde_json::to_string(&sets).unwrap();
        assert_eq!(serde_json::from_str::<Vec<UserInterval>>(&text).unwrap(), sets);
    }
}
