//! Regularized Chernoff Lagrangian and the primal-dual iterations on it.
//!
//! Per-sample integrand:
//!
//! ```text
//! phi(y, lambda, z) = g(y) + sum_j lambda_j (exp(h_j(x + beta z) / u) - delta) - (nu/2) ||lambda||^2
//! ```
//!
//! B-PD draws one response per step from the law the current decision
//! induces; MS-PD and the reference computation replace the draw by an
//! expectation under a model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, FlexError, Result};
use crate::problem::{Decision, FlexProblem};
use crate::response::{expected_constraints, ChernoffMoments, Quadrature, ResponseModel};

pub mod constants;
pub mod metric;

pub use constants::{
    convergence_bounds, estimate_constants, estimate_mu_lipschitz, step_size_range, ConstantsReport,
    ConvergenceBounds, EstimatorSettings, MuLipschitzEstimate, StepSizeRange,
};
pub use metric::{constraint_violation_metric, CvMethod};

/// Chernoff temperature, risk level and dual regularization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanceParams {
    pub u: f64,
    pub delta: f64,
    pub nu: f64,
}

impl ChanceParams {
    pub fn new(u: f64, delta: f64, nu: f64) -> Result<Self> {
        let p = ChanceParams { u, delta, nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.u > 0.0 && self.u.is_finite()) {
            return Err(FlexError::param("u", format!("must be positive, got {}", self.u)));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(FlexError::param("delta", format!("must lie in (0, 1], got {}", self.delta)));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(FlexError::param("nu", format!("must be nonnegative, got {}", self.nu)));
        }
        Ok(())
    }
}

impl Default for ChanceParams {
    fn default() -> Self {
        ChanceParams {
            u: 1.5,
            delta: 0.2,
            nu: 0.01,
        }
    }
}

/// Compact search region: a box for `(x, beta)` and a cap on every multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRegion {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub beta_lo: Vec<f64>,
    pub beta_hi: Vec<f64>,
    pub lambda_max: f64,
}

impl SearchRegion {
    pub fn new(x_lo: Vec<f64>, x_hi: Vec<f64>, beta_lo: Vec<f64>, beta_hi: Vec<f64>, lambda_max: f64) -> Result<Self> {
        let r = SearchRegion {
            x_lo,
            x_hi,
            beta_lo,
            beta_hi,
            lambda_max,
        };
        r.validate()?;
        Ok(r)
    }

    /// `x in x_ref +- half_width`, `beta in [0, beta_cap]`.
    pub fn around(x_ref: &[f64], half_width: f64, beta_cap: f64, lambda_max: f64) -> Result<Self> {
        SearchRegion::new(
            x_ref.iter().map(|r| r - half_width).collect(),
            x_ref.iter().map(|r| r + half_width).collect(),
            vec![0.0; x_ref.len()],
            vec![beta_cap; x_ref.len()],
            lambda_max,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x_lo.len();
        check_len("x_hi", n, self.x_hi.len())?;
        check_len("beta_lo", n, self.beta_lo.len())?;
        check_len("beta_hi", n, self.beta_hi.len())?;
        for i in 0..n {
            if !(self.x_lo[i] <= self.x_hi[i]) || !(self.beta_lo[i] <= self.beta_hi[i]) {
                return Err(FlexError::param("region", format!("empty box at coordinate {i}")));
            }
            if !(self.beta_lo[i] >= 0.0) {
                return Err(FlexError::param("region", "beta lower bound must be nonnegative"));
            }
        }
        if !(self.lambda_max > 0.0 && self.lambda_max.is_finite()) {
            return Err(FlexError::param("lambda_max", "must be positive and finite"));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x_lo.len()
    }

    pub fn project_decision(&self, y: &Decision) -> Decision {
        let x = y
            .x()
            .iter()
            .enumerate()
            .map(|(i, v)| v.clamp(self.x_lo[i], self.x_hi[i]))
            .collect();
        let beta = y
            .beta()
            .iter()
            .enumerate()
            .map(|(i, v)| v.clamp(self.beta_lo[i], self.beta_hi[i]))
            .collect();
        Decision::from_parts_unchecked(x, beta)
    }

    pub fn project_lambda(&self, lambda: &mut [f64]) {
        for l in lambda {
            *l = l.clamp(0.0, self.lambda_max);
        }
    }

    pub fn project(&self, point: &SaddlePoint) -> SaddlePoint {
        let mut lambda = point.lambda.clone();
        self.project_lambda(&mut lambda);
        SaddlePoint {
            y: self.project_decision(&point.y),
            lambda,
        }
    }

    pub fn contains(&self, point: &SaddlePoint) -> bool {
        let y = &point.y;
        (0..self.n()).all(|i| {
            (self.x_lo[i]..=self.x_hi[i]).contains(&y.x()[i]) && (self.beta_lo[i]..=self.beta_hi[i]).contains(&y.beta()[i])
        }) && point.lambda.iter().all(|l| (0.0..=self.lambda_max).contains(l))
    }

    pub fn sample_decision<R: Rng + ?Sized>(&self, rng: &mut R) -> Decision {
        let uniform = |lo: f64, hi: f64, rng: &mut R| lo + (hi - lo) * rng.random::<f64>();
        let x = (0..self.n()).map(|i| uniform(self.x_lo[i], self.x_hi[i], rng)).collect();
        let beta = (0..self.n()).map(|i| uniform(self.beta_lo[i], self.beta_hi[i], rng)).collect();
        Decision::from_parts_unchecked(x, beta)
    }

    pub fn sample_lambda<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<f64> {
        (0..m).map(|_| self.lambda_max * rng.random::<f64>()).collect()
    }

    /// Random nearby decision; `scale` is relative to the box widths.
    pub fn perturb_decision<R: Rng + ?Sized>(&self, y: &Decision, scale: f64, rng: &mut R) -> Decision {
        let step = |lo: f64, hi: f64, rng: &mut R| scale * (hi - lo).max(1e-12) * (2.0 * rng.random::<f64>() - 1.0);
        let x = (0..self.n()).map(|i| y.x()[i] + step(self.x_lo[i], self.x_hi[i], rng)).collect();
        let beta = (0..self.n())
            .map(|i| (y.beta()[i] + step(self.beta_lo[i], self.beta_hi[i], rng)).max(0.0))
            .collect();
        Decision::from_parts_unchecked(x, beta)
    }
}

/// Primal-dual state `p = (y, lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddlePoint {
    pub y: Decision,
    pub lambda: Vec<f64>,
}

impl SaddlePoint {
    pub fn new(y: Decision, lambda: Vec<f64>) -> Self {
        SaddlePoint { y, lambda }
    }

    /// `(y, 0)`.
    pub fn primal(y: Decision, m: usize) -> Self {
        SaddlePoint { y, lambda: vec![0.0; m] }
    }

    /// `[x; beta; lambda]`.
    pub fn stacked(&self) -> Vec<f64> {
        let mut p = self.y.stacked();
        p.extend_from_slice(&self.lambda);
        p
    }

    pub fn distance(&self, other: &SaddlePoint) -> f64 {
        let a = self.y.distance(&other.y);
        let b: f64 = self
            .lambda
            .iter()
            .zip(&other.lambda)
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        (a * a + b).sqrt()
    }
}

/// `(grad_y phi, grad_lambda phi)`; `y` is stacked `[d/dx; d/dbeta]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiGradient {
    pub y: Vec<f64>,
    pub lambda: Vec<f64>,
}

fn check_point(problem: &FlexProblem, point: &SaddlePoint) -> Result<()> {
    check_len("decision", problem.n(), point.y.n())?;
    check_len("lambda", problem.m(), point.lambda.len())
}

fn check_z(problem: &FlexProblem, z: &[f64]) -> Result<()> {
    check_len("z", problem.n(), z.len())?;
    if let Some((index, &value)) = z.iter().enumerate().find(|(_, v)| !(v.abs() <= 1.0)) {
        return Err(FlexError::SampleOutOfBox { index, value });
    }
    Ok(())
}

/// Per-sample integrand `phi(y, lambda, z)`.
pub fn phi_value(problem: &FlexProblem, chance: &ChanceParams, point: &SaddlePoint, z: &[f64]) -> Result<f64> {
    chance.validate()?;
    check_point(problem, point)?;
    check_z(problem, z)?;
    let v = crate::problem::realize_unchecked(&point.y, z);
    let h = problem.eval_constraints(&v)?;
    let coupling: f64 = point
        .lambda
        .iter()
        .zip(&h.values)
        .map(|(l, h)| l * ((h / chance.u).exp() - chance.delta))
        .sum();
    let reg = 0.5 * chance.nu * point.lambda.iter().map(|l| l * l).sum::<f64>();
    Ok(problem.objective(&point.y)? + coupling - reg)
}

/// Assembles `grad phi` from Chernoff moments (sampled or expected).
pub fn assemble_gradient(
    problem: &FlexProblem,
    chance: &ChanceParams,
    point: &SaddlePoint,
    moments: &ChernoffMoments,
) -> PhiGradient {
    let n = problem.n();
    let mut gy = Vec::with_capacity(2 * n);
    problem.objective_gradient_into(point.y.x(), point.y.beta(), &mut gy);
    for (j, l) in point.lambda.iter().enumerate() {
        if *l == 0.0 {
            continue;
        }
        let scale = l / chance.u;
        for i in 0..n {
            gy[i] += scale * moments.grad_x[j][i];
            gy[n + i] += scale * moments.grad_beta[j][i];
        }
    }
    let gl = moments
        .value
        .iter()
        .zip(&point.lambda)
        .map(|(e, l)| e - chance.delta - chance.nu * l)
        .collect();
    PhiGradient { y: gy, lambda: gl }
}

/// Gradient of `phi` at a single realization `z`.
pub fn grad_phi(problem: &FlexProblem, chance: &ChanceParams, point: &SaddlePoint, z: &[f64]) -> Result<PhiGradient> {
    chance.validate()?;
    check_point(problem, point)?;
    check_z(problem, z)?;
    let moments = ChernoffMoments::at_sample(problem, chance.u, &point.y, z);
    Ok(assemble_gradient(problem, chance, point, &moments))
}

/// `E_{z ~ D(y)} grad phi(y, lambda, z)` with `D` the model law at the point's own decision.
pub fn mean_grad_phi(
    problem: &FlexProblem,
    chance: &ChanceParams,
    point: &SaddlePoint,
    model: &ResponseModel,
    quad: &Quadrature,
) -> PhiGradient {
    let moments = ChernoffMoments::under_model(problem, chance.u, model, &point.y, &point.y, quad);
    assemble_gradient(problem, chance, point, &moments)
}

/// Projected descent in `y`, ascent in `lambda`.
pub fn projected_step(region: &SearchRegion, point: &SaddlePoint, grad: &PhiGradient, eta: f64) -> SaddlePoint {
    let n = point.y.n();
    let x: Vec<f64> = (0..n)
        .map(|i| (point.y.x()[i] - eta * grad.y[i]).clamp(region.x_lo[i], region.x_hi[i]))
        .collect();
    let beta: Vec<f64> = (0..n)
        .map(|i| (point.y.beta()[i] - eta * grad.y[n + i]).clamp(region.beta_lo[i], region.beta_hi[i]))
        .collect();
    let lambda = point
        .lambda
        .iter()
        .zip(&grad.lambda)
        .map(|(l, g)| (l + eta * g).clamp(0.0, region.lambda_max))
        .collect();
    SaddlePoint {
        y: Decision::from_parts_unchecked(x, beta),
        lambda,
    }
}

/// One step of the deterministic mean-field iteration under `model`.
pub fn mean_field_step(
    problem: &FlexProblem,
    chance: &ChanceParams,
    region: &SearchRegion,
    model: &ResponseModel,
    quad: &Quadrature,
    point: &SaddlePoint,
    eta: f64,
) -> SaddlePoint {
    let grad = mean_grad_phi(problem, chance, point, model, quad);
    projected_step(region, point, &grad, eta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    /// `||p_k - p_ref||` when a reference point was supplied.
    pub dist_to_ref: Option<f64>,
    pub objective: f64,
    /// `max_j E[h_j]` under the evaluation model, when one was supplied.
    pub cv_estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateTrace {
    pub records: Vec<TraceRecord>,
    /// The last iterates, oldest first (length set by `TraceOptions::keep_tail`).
    pub tail: Vec<SaddlePoint>,
    pub last: SaddlePoint,
}

impl IterateTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TraceOptions {
    pub reference: Option<SaddlePoint>,
    /// Law used for the per-iterate `cv_estimate` (exact expectation).
    pub cv_model: Option<ResponseModel>,
    pub keep_tail: usize,
}

struct TraceBuilder<'a> {
    problem: &'a FlexProblem,
    options: &'a TraceOptions,
    records: Vec<TraceRecord>,
    tail: std::collections::VecDeque<SaddlePoint>,
}

impl<'a> TraceBuilder<'a> {
    fn new(problem: &'a FlexProblem, options: &'a TraceOptions, capacity: usize) -> Self {
        TraceBuilder {
            problem,
            options,
            records: Vec::with_capacity(capacity),
            tail: std::collections::VecDeque::with_capacity(options.keep_tail + 1),
        }
    }

    fn push(&mut self, k: usize, point: &SaddlePoint) {
        let cv_estimate = self.options.cv_model.as_ref().map(|model| {
            expected_constraints(self.problem, &point.y, &model.laws(&point.y))
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
        });
        self.records.push(TraceRecord {
            k,
            dist_to_ref: self.options.reference.as_ref().map(|r| point.distance(r)),
            objective: self.problem.objective_unchecked(point.y.x(), point.y.beta()),
            cv_estimate,
        });
        if self.options.keep_tail > 0 {
            if self.tail.len() == self.options.keep_tail {
                self.tail.pop_front();
            }
            self.tail.push_back(point.clone());
        }
    }

    fn finish(self, last: SaddlePoint) -> IterateTrace {
        IterateTrace {
            records: self.records,
            tail: self.tail.into_iter().collect(),
            last,
        }
    }
}

fn check_run_inputs(problem: &FlexProblem, chance: &ChanceParams, region: &SearchRegion, start: &SaddlePoint, eta: f64) -> Result<()> {
    chance.validate()?;
    region.validate()?;
    check_len("region", problem.n(), region.n())?;
    check_point(problem, start)?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(FlexError::param("eta", format!("must be positive, got {eta}")));
    }
    Ok(())
}

/// Stochastic primal-dual: one response drawn from `D(y_k)` per step.
#[allow(clippy::too_many_arguments)]
pub fn bpd_run<R: Rng + ?Sized>(
    problem: &FlexProblem,
    chance: &ChanceParams,
    region: &SearchRegion,
    model: &ResponseModel,
    eta: f64,
    iterations: usize,
    start: &SaddlePoint,
    rng: &mut R,
    options: &TraceOptions,
) -> Result<IterateTrace> {
    check_run_inputs(problem, chance, region, start, eta)?;
    let mut point = region.project(start);
    let mut trace = TraceBuilder::new(problem, options, iterations + 1);
    trace.push(0, &point);
    for k in 1..=iterations {
        let z = model.sample(&point.y, rng);
        let moments = ChernoffMoments::at_sample(problem, chance.u, &point.y, &z);
        let grad = assemble_gradient(problem, chance, &point, &moments);
        point = projected_step(region, &point, &grad, eta);
        trace.push(k, &point);
    }
    Ok(trace.finish(point))
}

/// Model-based primal-dual: expectations under `model` replace the draws.
/// Stops after `iterations` steps, or earlier once the step norm falls to `stop_tol`.
#[allow(clippy::too_many_arguments)]
pub fn mspd_run(
    problem: &FlexProblem,
    chance: &ChanceParams,
    region: &SearchRegion,
    model: &ResponseModel,
    eta: f64,
    iterations: usize,
    start: &SaddlePoint,
    stop_tol: Option<f64>,
    options: &TraceOptions,
) -> Result<IterateTrace> {
    check_run_inputs(problem, chance, region, start, eta)?;
    let quad = Quadrature::default();
    let mut point = region.project(start);
    let mut trace = TraceBuilder::new(problem, options, iterations + 1);
    trace.push(0, &point);
    for k in 1..=iterations {
        let next = mean_field_step(problem, chance, region, model, &quad, &point, eta);
        let step = next.distance(&point);
        point = next;
        trace.push(k, &point);
        if stop_tol.is_some_and(|tol| step <= tol) {
            break;
        }
    }
    Ok(trace.finish(point))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSettings {
    /// Stop once `||p_{k+1} - p_k|| <= step_tol`.
    pub step_tol: f64,
    pub max_iters: usize,
}

impl Default for ReferenceSettings {
    fn default() -> Self {
        ReferenceSettings {
            step_tol: 1e-10,
            max_iters: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEquilibrium {
    pub point: SaddlePoint,
    pub iterations: usize,
    pub final_step: f64,
}

/// Fixed point of the mean-field primal-dual map under the true law.
#[allow(clippy::too_many_arguments)]
pub fn compute_reference_equilibrium(
    problem: &FlexProblem,
    chance: &ChanceParams,
    region: &SearchRegion,
    true_model: &ResponseModel,
    eta: f64,
    start: &SaddlePoint,
    settings: &ReferenceSettings,
) -> Result<ReferenceEquilibrium> {
    check_run_inputs(problem, chance, region, start, eta)?;
    let quad = Quadrature::default();
    let mut point = region.project(start);
    let mut step = f64::INFINITY;
    for k in 1..=settings.max_iters {
        let next = mean_field_step(problem, chance, region, true_model, &quad, &point, eta);
        step = next.distance(&point);
        point = next;
        if step <= settings.step_tol {
            return Ok(ReferenceEquilibrium {
                point,
                iterations: k,
                final_step: step,
            });
        }
    }
    Err(FlexError::NonConvergence {
        stage: "reference equilibrium",
        residual: step,
        iterations: settings.max_iters,
    })
}
