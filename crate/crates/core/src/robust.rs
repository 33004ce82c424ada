//! Convex worst-case reformulation of the hyperbox-robust problem and a
//! first-order primal-dual solver for it.
//!
//! Variables are stacked as `q = [x; beta; s; t]` where `s` are the
//! ball envelopes and `t_i >= |x_i - x_ref_i|` are the absolute-value
//! auxiliaries. The program is
//!
//! ```text
//! min  F(x, beta)
//! s.t. ||s||^2 <= gamma
//!      beta_i + t_i <= s_i
//!      +-(x_i - x_ref_i) <= t_i
//!      d_j x - e_j + sum_i |d_ji| beta_i <= 0
//!      beta, s, t >= 0
//! ```
//!
//! with `F = g` for the robust solve and `F = ||y - y_T||^2 / 2` for guarding.

use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::problem::{
    dot, vertex_feasibility_oracle, Decision, FlexProblem, RobustCertificate, SOLVER_FEAS_TOL,
    VERTEX_ORACLE_CAP,
};

/// Constraint families of the reformulated program, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReformulatedConstraint {
    /// `||s||^2 - gamma <= 0`.
    BallEnvelope,
    /// `beta_i + t_i - s_i <= 0`.
    Envelope(usize),
    /// `x_i - x_ref_i - t_i <= 0`.
    AbsUpper(usize),
    /// `x_ref_i - x_i - t_i <= 0`.
    AbsLower(usize),
    /// Worst case of affine row `j`.
    RobustAffine(usize),
}

#[derive(Debug, Clone, PartialEq)]
enum ProgramObjective {
    Cost,
    Distance(Vec<f64>),
}

/// The convex program whose feasible set, projected onto `(x, beta)`, is the
/// hyperbox-robust feasible set of the problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ReformulatedProgram {
    problem: FlexProblem,
    objective: ProgramObjective,
    constraints: Vec<ReformulatedConstraint>,
}

pub fn build_reformulation(problem: &FlexProblem) -> ReformulatedProgram {
    let n = problem.n();
    let mut constraints = vec![ReformulatedConstraint::BallEnvelope];
    constraints.extend((0..n).map(ReformulatedConstraint::Envelope));
    constraints.extend((0..n).map(ReformulatedConstraint::AbsUpper));
    constraints.extend((0..n).map(ReformulatedConstraint::AbsLower));
    constraints.extend((0..problem.c()).map(ReformulatedConstraint::RobustAffine));
    ReformulatedProgram {
        problem: problem.clone(),
        objective: ProgramObjective::Cost,
        constraints,
    }
}

impl ReformulatedProgram {
    pub fn problem(&self) -> &FlexProblem {
        &self.problem
    }

    /// Decision and envelope variables `(x, beta, s)`.
    pub fn decision_variable_count(&self) -> usize {
        3 * self.problem.n()
    }

    /// Absolute-value auxiliaries `t`.
    pub fn auxiliary_variable_count(&self) -> usize {
        self.problem.n()
    }

    pub fn variable_count(&self) -> usize {
        4 * self.problem.n()
    }

    pub fn constraints(&self) -> &[ReformulatedConstraint] {
        &self.constraints
    }

    /// Same feasible set with objective `||y - target||^2 / 2`.
    fn with_distance_objective(&self, target: &Decision) -> ReformulatedProgram {
        ReformulatedProgram {
            problem: self.problem.clone(),
            objective: ProgramObjective::Distance(target.stacked()),
            constraints: self.constraints.clone(),
        }
    }

    fn n(&self) -> usize {
        self.problem.n()
    }

    fn objective_value(&self, q: &[f64]) -> f64 {
        let n = self.n();
        match &self.objective {
            ProgramObjective::Cost => self.problem.objective_unchecked(&q[..n], &q[n..2 * n]),
            ProgramObjective::Distance(target) => {
                0.5 * q[..2 * n]
                    .iter()
                    .zip(target)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            }
        }
    }

    fn objective_gradient(&self, q: &[f64], out: &mut [f64]) {
        let n = self.n();
        out.iter_mut().for_each(|v| *v = 0.0);
        match &self.objective {
            ProgramObjective::Cost => {
                let p = &self.problem;
                for i in 0..n {
                    out[i] = p.eps_x() * q[i];
                    out[n + i] = p.weights()[i] * (-1.0 + p.eps_beta() * q[n + i]);
                }
            }
            ProgramObjective::Distance(target) => {
                for i in 0..2 * n {
                    out[i] = q[i] - target[i];
                }
            }
        }
    }

    fn eval_constraints(&self, q: &[f64], out: &mut Vec<f64>) {
        let n = self.n();
        let p = &self.problem;
        let (x, beta, s, t) = (&q[..n], &q[n..2 * n], &q[2 * n..3 * n], &q[3 * n..]);
        out.clear();
        out.push(s.iter().map(|v| v * v).sum::<f64>() - p.gamma());
        out.extend((0..n).map(|i| beta[i] + t[i] - s[i]));
        out.extend((0..n).map(|i| x[i] - p.x_ref()[i] - t[i]));
        out.extend((0..n).map(|i| p.x_ref()[i] - x[i] - t[i]));
        for (row, e) in p.d().iter().zip(p.e()) {
            let spread: f64 = row.iter().zip(beta).map(|(d, b)| d.abs() * b).sum();
            out.push(dot(row, x) - e + spread);
        }
    }

    /// Adds `sum_k weights_k * grad c_k(q)` to `out`.
    fn add_constraint_gradients(&self, q: &[f64], weights: &[f64], out: &mut [f64]) {
        let n = self.n();
        let (xo, bo, so, to) = (0, n, 2 * n, 3 * n);
        let w0 = weights[0];
        if w0 != 0.0 {
            for i in 0..n {
                out[so + i] += 2.0 * w0 * q[so + i];
            }
        }
        for i in 0..n {
            let env = weights[1 + i];
            out[bo + i] += env;
            out[to + i] += env;
            out[so + i] -= env;
            let up = weights[1 + n + i];
            let lo = weights[1 + 2 * n + i];
            out[xo + i] += up - lo;
            out[to + i] -= up + lo;
        }
        for (j, row) in self.problem.d().iter().enumerate() {
            let wj = weights[1 + 3 * n + j];
            if wj == 0.0 {
                continue;
            }
            for i in 0..n {
                out[xo + i] += wj * row[i];
                out[bo + i] += wj * row[i].abs();
            }
        }
    }

    fn project_box(&self, q: &mut [f64]) {
        let n = self.n();
        for v in &mut q[n..] {
            *v = v.max(0.0);
        }
    }

    fn initial_point(&self) -> Vec<f64> {
        let n = self.n();
        let mut q = vec![0.0; 4 * n];
        match &self.objective {
            ProgramObjective::Cost => q[..n].copy_from_slice(self.problem.x_ref()),
            ProgramObjective::Distance(target) => {
                q[..2 * n].copy_from_slice(target);
                self.project_box(&mut q);
            }
        }
        let r = self.problem.x_ref();
        for i in 0..n {
            q[3 * n + i] = (q[i] - r[i]).abs();
            q[2 * n + i] = q[n + i] + q[3 * n + i];
        }
        q
    }

    fn decision_of(&self, q: &[f64]) -> Decision {
        let n = self.n();
        Decision::from_parts_unchecked(
            q[..n].to_vec(),
            q[n..2 * n].iter().map(|b| b.max(0.0)).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// KKT residual tolerance.
    pub tol: f64,
    /// Budget on inner gradient iterations, summed over all outer rounds.
    pub max_iters: usize,
    /// Multipliers are clipped to `[0, lambda_max]`.
    pub lambda_max: f64,
    pub initial_penalty: f64,
    pub max_penalty: f64,
    /// Bisection steps of the feasibility polish.
    pub polish_bisections: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol: 1e-6,
            max_iters: 200_000,
            lambda_max: 1e8,
            initial_penalty: 10.0,
            max_penalty: 1e8,
            polish_bisections: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub decision: Decision,
    pub objective_value: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Uniform factor applied to beta by the feasibility polish (1 when untouched).
    pub polish_factor: f64,
    /// Vertex-oracle certificate, when `n` is within the enumeration cap.
    pub certificate: Option<RobustCertificate>,
}

struct AugmentedLagrangian<'a> {
    program: &'a ReformulatedProgram,
    lambda: &'a [f64],
    rho: f64,
    cons: Vec<f64>,
    weights: Vec<f64>,
}

impl AugmentedLagrangian<'_> {
    fn value(&mut self, q: &[f64]) -> f64 {
        self.program.eval_constraints(q, &mut self.cons);
        let penalty: f64 = self
            .cons
            .iter()
            .zip(self.lambda)
            .map(|(c, l)| {
                let shifted = (l + self.rho * c).max(0.0);
                shifted * shifted - l * l
            })
            .sum();
        self.program.objective_value(q) + penalty / (2.0 * self.rho)
    }

    fn value_and_gradient(&mut self, q: &[f64], grad: &mut [f64]) -> f64 {
        let value = self.value(q);
        self.weights.clear();
        self.weights.extend(
            self.cons
                .iter()
                .zip(self.lambda)
                .map(|(c, l)| (l + self.rho * c).max(0.0)),
        );
        self.program.objective_gradient(q, grad);
        self.program.add_constraint_gradients(q, &self.weights, grad);
        value
    }
}

/// Accelerated projected gradient with adaptive restart on the augmented
/// Lagrangian. Returns the number of iterations used.
fn minimize_inner(
    al: &mut AugmentedLagrangian<'_>,
    q: &mut [f64],
    lipschitz: &mut f64,
    tol: f64,
    budget: usize,
) -> usize {
    let dim = q.len();
    let mut y = q.to_vec();
    let mut prev = q.to_vec();
    let mut next = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut momentum = 1.0f64;
    let mut iters = 0;
    while iters < budget {
        iters += 1;
        let fy = al.value_and_gradient(&y, &mut grad);
        let mut gap;
        loop {
            for k in 0..dim {
                next[k] = y[k] - grad[k] / *lipschitz;
            }
            al.program.project_box(&mut next);
            let fnext = al.value(&next);
            let mut lin = 0.0;
            let mut sq = 0.0;
            gap = 0.0f64;
            for k in 0..dim {
                let d = next[k] - y[k];
                lin += grad[k] * d;
                sq += d * d;
                gap = gap.max(d.abs());
            }
            if fnext <= fy + lin + 0.5 * *lipschitz * sq + 1e-13 * fy.abs().max(1.0) {
                break;
            }
            *lipschitz *= 2.0;
        }
        let stationarity = gap * *lipschitz;
        let restart = (0..dim)
            .map(|k| (y[k] - next[k]) * (next[k] - prev[k]))
            .sum::<f64>()
            > 0.0;
        if stationarity <= tol {
            q.copy_from_slice(&next);
            return iters;
        }
        if restart {
            momentum = 1.0;
            y.copy_from_slice(&next);
        } else {
            let m_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = (momentum - 1.0) / m_next;
            for k in 0..dim {
                y[k] = next[k] + beta * (next[k] - prev[k]);
            }
            momentum = m_next;
        }
        prev.copy_from_slice(&next);
        *lipschitz = (*lipschitz * 0.98).max(1e-8);
    }
    q.copy_from_slice(&prev);
    iters
}

/// KKT residual: max of primal violation, projected-gradient norm of the
/// Lagrangian and complementarity gap.
fn kkt_residual(program: &ReformulatedProgram, q: &[f64], lambda: &[f64]) -> f64 {
    let mut cons = Vec::new();
    program.eval_constraints(q, &mut cons);
    let violation = cons.iter().copied().fold(0.0f64, f64::max);
    let complementarity = cons
        .iter()
        .zip(lambda)
        .map(|(c, l)| (c * l).abs())
        .fold(0.0f64, f64::max);
    let mut grad = vec![0.0; q.len()];
    program.objective_gradient(q, &mut grad);
    program.add_constraint_gradients(q, lambda, &mut grad);
    let mut moved: Vec<f64> = q.iter().zip(&grad).map(|(a, g)| a - g).collect();
    program.project_box(&mut moved);
    let stationarity = q
        .iter()
        .zip(&moved)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    violation.max(complementarity).max(stationarity)
}

/// Shrinks beta uniformly by the smallest amount restoring robust feasibility.
/// Returns the factor applied, or `None` when even `beta = 0` is infeasible.
fn polish(problem: &FlexProblem, decision: &Decision, bisections: usize) -> Option<(Decision, f64)> {
    let scaled = |f: f64| {
        Decision::from_parts_unchecked(
            decision.x().to_vec(),
            decision.beta().iter().map(|b| b * f).collect(),
        )
    };
    let margin = |d: &Decision| problem.robust_worst_margin(d).unwrap_or(f64::INFINITY);
    if margin(decision) <= 0.0 {
        return Some((decision.clone(), 1.0));
    }
    if margin(&scaled(0.0)) > 0.0 {
        return None;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..bisections {
        let mid = 0.5 * (lo + hi);
        if margin(&scaled(mid)) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some((scaled(lo), lo))
}

fn certify(problem: &FlexProblem, decision: &Decision) -> Option<RobustCertificate> {
    if problem.n() > VERTEX_ORACLE_CAP {
        return None;
    }
    vertex_feasibility_oracle(problem, decision, SOLVER_FEAS_TOL).ok()
}

fn run_solver(program: &ReformulatedProgram, settings: &SolverSettings) -> Result<SolveReport> {
    if !(settings.tol > 0.0) {
        return Err(FlexError::param("tol", "must be positive"));
    }
    let mut q = program.initial_point();
    let mut lambda = vec![0.0; program.constraints.len()];
    let mut rho = settings.initial_penalty;
    let mut lipschitz = 1.0;
    let mut iterations = 0;
    let mut inner_tol = 1e-2f64;
    let mut prev_violation = f64::INFINITY;
    let mut residual = kkt_residual(program, &q, &lambda);
    let mut cons = Vec::new();
    while iterations < settings.max_iters {
        let mut al = AugmentedLagrangian {
            program,
            lambda: &lambda,
            rho,
            cons: Vec::new(),
            weights: Vec::new(),
        };
        let budget = settings.max_iters - iterations;
        iterations += minimize_inner(&mut al, &mut q, &mut lipschitz, inner_tol.max(0.1 * settings.tol), budget);
        program.eval_constraints(&q, &mut cons);
        for (l, c) in lambda.iter_mut().zip(&cons) {
            *l = (*l + rho * c).clamp(0.0, settings.lambda_max);
        }
        residual = kkt_residual(program, &q, &lambda);
        if residual <= settings.tol {
            break;
        }
        let violation = cons.iter().copied().fold(0.0f64, f64::max);
        if violation > 0.25 * prev_violation && rho < settings.max_penalty {
            rho = (rho * 10.0).min(settings.max_penalty);
        }
        prev_violation = violation;
        inner_tol *= 0.2;
    }
    let converged = residual <= settings.tol;
    let raw = program.decision_of(&q);
    let (decision, polish_factor) = match polish(&program.problem, &raw, settings.polish_bisections) {
        Some(done) => done,
        None => (raw, 1.0),
    };
    let objective_value = match &program.objective {
        ProgramObjective::Cost => program.problem.objective_unchecked(decision.x(), decision.beta()),
        ProgramObjective::Distance(target) => {
            0.5 * decision
                .stacked()
                .iter()
                .zip(target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        }
    };
    let certificate = certify(&program.problem, &decision);
    Ok(SolveReport {
        decision,
        objective_value,
        kkt_residual: residual,
        iterations,
        converged,
        polish_factor,
        certificate,
    })
}

/// Minimizes the flexible cost over the hyperbox-robust feasible set.
pub fn solve_reformulation(program: &ReformulatedProgram, settings: &SolverSettings) -> Result<SolveReport> {
    run_solver(program, settings)
}

/// Euclidean projection of `target` onto the hyperbox-robust feasible set.
pub fn guard_project(problem: &FlexProblem, target: &Decision, settings: &SolverSettings) -> Result<SolveReport> {
    if target.n() != problem.n() {
        return Err(FlexError::DimensionMismatch {
            what: "guard target",
            expected: problem.n(),
            got: target.n(),
        });
    }
    // A robust-feasible target is its own projection.
    if problem.robust_worst_margin(target)? <= 0.0 {
        return Ok(SolveReport {
            decision: target.clone(),
            objective_value: 0.0,
            kkt_residual: 0.0,
            iterations: 0,
            converged: true,
            polish_factor: 1.0,
            certificate: certify(problem, target),
        });
    }
    let program = build_reformulation(problem).with_distance_objective(target);
    run_solver(&program, settings)
}

/// Floors every radius to the grid `resolution * k`; `x` is left unchanged.
pub fn inner_round(decision: &Decision, resolution: f64) -> Result<Decision> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(FlexError::param("resolution", format!("must be positive, got {resolution}")));
    }
    let beta = decision
        .beta()
        .iter()
        .map(|b| {
            // Snap values within rounding noise of a grid point onto it.
            let k = (b / resolution * (1.0 + 1e-12)).floor();
            (k * resolution).min(*b).max(0.0)
        })
        .collect();
    decision.with_beta(beta)
}
