//! Convergence constants: curvature floor, Lipschitz estimates, step-size range,
//! contraction factor and the two error-ball radii.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, FlexError, Result};
use crate::problem::{Decision, FlexProblem};
use crate::response::{estimate_lipschitz_eps, estimate_misspecification_bound, estimate_sigma, ResponseModel};
use crate::saddle::{grad_phi, ChanceParams, SaddlePoint, SearchRegion};

/// The admissible step sizes `(0, eta_max)`; `eta_max` is `None` when the range is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizeRange {
    pub eta_max: Option<f64>,
}

impl StepSizeRange {
    pub fn is_empty(&self) -> bool {
        self.eta_max.is_none()
    }

    pub fn contains(&self, eta: f64) -> bool {
        self.eta_max.is_some_and(|m| eta > 0.0 && eta < m)
    }
}

/// `eta_max = 2(mu - eps L) / (L^2 (1 - eps^2))` when `eps L / mu < 1` and `eps < 1`.
pub fn step_size_range(mu: f64, lipschitz: f64, eps: f64) -> Result<StepSizeRange> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(FlexError::param("mu", format!("must be positive, got {mu}")));
    }
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(FlexError::param("L", format!("must be positive, got {lipschitz}")));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(FlexError::param("eps", format!("must be nonnegative, got {eps}")));
    }
    let eta_max = (eps * lipschitz < mu && eps < 1.0)
        .then(|| 2.0 * (mu - eps * lipschitz) / (lipschitz * lipschitz * (1.0 - eps * eps)));
    Ok(StepSizeRange { eta_max })
}

/// Estimated constants of the saddle problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    /// Analytic curvature floor `min(eps_x, min_i w_i eps_beta, nu)`.
    pub mu: f64,
    /// Sampled Lipschitz constant of the gradient map (a lower estimate).
    pub lipschitz: f64,
    /// Distributional Lipschitz constant of the true law (closed-form upper bound).
    pub eps: f64,
    /// Sampled counterpart of `eps` (a lower estimate).
    pub eps_sampled: f64,
    /// Closed-form `eps` of the misspecified model, when one was given.
    pub eps_ms: Option<f64>,
    /// Gradient noise level.
    pub sigma: f64,
    /// Misspecification bound `B` (zero without a misspecified model).
    pub misspecification: f64,
    /// Upper end of the admissible step sizes, `None` when empty.
    pub eta_max: Option<f64>,
    pub lipschitz_points: usize,
    pub lipschitz_pairs: usize,
}

impl ConstantsReport {
    /// Assembles a report from given constants (the step-size range is derived).
    pub fn from_constants(mu: f64, lipschitz: f64, eps: f64, sigma: f64, misspecification: f64) -> Result<Self> {
        if !(sigma >= 0.0 && misspecification >= 0.0) {
            return Err(FlexError::param("sigma/B", "must be nonnegative"));
        }
        let range = step_size_range(mu, lipschitz, eps)?;
        Ok(ConstantsReport {
            mu,
            lipschitz,
            eps,
            eps_sampled: eps,
            eps_ms: None,
            sigma,
            misspecification,
            eta_max: range.eta_max,
            lipschitz_points: 0,
            lipschitz_pairs: 0,
        })
    }

    pub fn step_range(&self) -> StepSizeRange {
        StepSizeRange { eta_max: self.eta_max }
    }

    /// `sqrt(1 - 2 eta mu + eta^2 L^2) + eta eps L`.
    pub fn rho(&self, eta: f64) -> f64 {
        let inner = 1.0 - 2.0 * eta * self.mu + eta * eta * self.lipschitz * self.lipschitz;
        inner.max(0.0).sqrt() + eta * self.eps * self.lipschitz
    }
}

/// Contraction factor and error-ball radii at a step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceBounds {
    pub eta: f64,
    pub rho: f64,
    /// `eta sigma / (1 - rho)`; `None` when `rho >= 1`.
    pub ball_stochastic: Option<f64>,
    /// `sqrt(2) eta L B / (1 - rho)`; `None` when `rho >= 1`.
    pub ball_model: Option<f64>,
    /// `rho < 1`.
    pub valid: bool,
}

pub fn convergence_bounds(constants: &ConstantsReport, eta: f64) -> Result<ConvergenceBounds> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(FlexError::param("eta", format!("must be positive, got {eta}")));
    }
    let rho = constants.rho(eta);
    let valid = rho < 1.0;
    let radius = |numerator: f64| {
        valid.then(|| if numerator == 0.0 { 0.0 } else { numerator / (1.0 - rho) })
    };
    Ok(ConvergenceBounds {
        eta,
        rho,
        ball_stochastic: radius(eta * constants.sigma),
        ball_model: radius(std::f64::consts::SQRT_2 * eta * constants.lipschitz * constants.misspecification),
        valid,
    })
}

/// Sample sizes and finite-difference step of the constant estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorSettings {
    /// Points at which the gradient-map Jacobian is probed.
    pub lipschitz_points: usize,
    /// Additional random pairs for the secant ratio.
    pub lipschitz_pairs: usize,
    pub fd_step: f64,
    pub eps_pairs: usize,
    pub sigma_points: usize,
    pub sigma_samples: usize,
    pub ms_points: usize,
    pub ms_samples: usize,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        EstimatorSettings {
            lipschitz_points: 20,
            lipschitz_pairs: 200,
            fd_step: 1e-6,
            eps_pairs: 2000,
            sigma_points: 20,
            sigma_samples: 200,
            ms_points: 20,
            ms_samples: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuLipschitzEstimate {
    pub mu: f64,
    pub lipschitz: f64,
    pub points: usize,
    pub pairs: usize,
}

/// The gradient map `psi(p, z) = [grad_y phi; -grad_lambda phi]` at a stacked point.
fn psi(problem: &FlexProblem, chance: &ChanceParams, p: &[f64], z: &[f64]) -> Vec<f64> {
    let n = problem.n();
    let y = Decision::from_parts_unchecked(p[..n].to_vec(), p[n..2 * n].to_vec());
    let point = SaddlePoint::new(y, p[2 * n..].to_vec());
    let g = grad_phi(problem, chance, &point, z).expect("validated inputs");
    let mut out = g.y;
    out.extend(g.lambda.iter().map(|v| -v));
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Spectral norm of a dense matrix given by columns, by power iteration on `J^T J`.
fn spectral_norm(columns: &[Vec<f64>]) -> f64 {
    let dim = columns.len();
    let rows = columns.first().map_or(0, Vec::len);
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut estimate = 0.0;
    for _ in 0..500 {
        let mut jv = vec![0.0; rows];
        for (c, col) in columns.iter().enumerate() {
            for (r, a) in col.iter().enumerate() {
                jv[r] += a * v[c];
            }
        }
        let w: Vec<f64> = columns.iter().map(|col| col.iter().zip(&jv).map(|(a, b)| a * b).sum()).collect();
        let wn = norm(&w);
        if wn == 0.0 {
            return 0.0;
        }
        let next = wn.sqrt();
        v = w.into_iter().map(|a| a / wn).collect();
        if (next - estimate).abs() <= 1e-12 * next {
            return next;
        }
        estimate = next;
    }
    estimate
}

fn sample_point<R: Rng + ?Sized>(region: &SearchRegion, m: usize, rng: &mut R) -> Vec<f64> {
    let mut p = region.sample_decision(rng).stacked();
    p.extend(region.sample_lambda(m, rng));
    p
}

fn sample_z<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// `mu` from the analytic curvature floor; `L` as the largest of the
/// finite-difference Jacobian norms at sampled points and the secant
/// ratios over sampled pairs, both at sampled `z` in the unit box.
pub fn estimate_mu_lipschitz<R: Rng + ?Sized>(
    problem: &FlexProblem,
    chance: &ChanceParams,
    region: &SearchRegion,
    settings: &EstimatorSettings,
    rng: &mut R,
) -> Result<MuLipschitzEstimate> {
    chance.validate()?;
    region.validate()?;
    check_len("region", problem.n(), region.n())?;
    if !(settings.fd_step > 0.0) {
        return Err(FlexError::param("fd_step", "must be positive"));
    }
    let (n, m) = (problem.n(), problem.m());
    let dim = 2 * n + m;
    let mu = problem.cost_modulus().min(chance.nu);
    let mut lipschitz = 0.0f64;
    for _ in 0..settings.lipschitz_points {
        let p = sample_point(region, m, rng);
        let z = sample_z(n, rng);
        let h = settings.fd_step;
        let columns: Vec<Vec<f64>> = (0..dim)
            .map(|k| {
                let (mut a, mut b) = (p.clone(), p.clone());
                a[k] += h;
                b[k] -= h;
                let (fa, fb) = (psi(problem, chance, &a, &z), psi(problem, chance, &b, &z));
                fa.iter().zip(&fb).map(|(u, v)| (u - v) / (2.0 * h)).collect()
            })
            .collect();
        lipschitz = lipschitz.max(spectral_norm(&columns));
    }
    for _ in 0..settings.lipschitz_pairs {
        let a = sample_point(region, m, rng);
        let b = sample_point(region, m, rng);
        let z = sample_z(n, rng);
        let dp = a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        if dp == 0.0 {
            continue;
        }
        let (fa, fb) = (psi(problem, chance, &a, &z), psi(problem, chance, &b, &z));
        let df = fa.iter().zip(&fb).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        lipschitz = lipschitz.max(df / dp);
    }
    Ok(MuLipschitzEstimate {
        mu,
        lipschitz,
        points: settings.lipschitz_points,
        pairs: settings.lipschitz_pairs,
    })
}

/// Estimates every constant the convergence bounds use.
pub fn estimate_constants<R: Rng + ?Sized>(
    problem: &FlexProblem,
    chance: &ChanceParams,
    region: &SearchRegion,
    true_model: &ResponseModel,
    ms_model: Option<&ResponseModel>,
    settings: &EstimatorSettings,
    rng: &mut R,
) -> Result<ConstantsReport> {
    let ml = estimate_mu_lipschitz(problem, chance, region, settings, rng)?;
    let eps = estimate_lipschitz_eps(true_model, region, settings.eps_pairs.max(1), rng)?;
    let sigma = estimate_sigma(
        true_model,
        |y, lambda, z| {
            let point = SaddlePoint::new(y.clone(), lambda.to_vec());
            let g = grad_phi(problem, chance, &point, z).expect("validated inputs");
            (g.y, g.lambda)
        },
        region,
        problem.m(),
        settings.sigma_points.max(1),
        settings.sigma_samples.max(2),
        rng,
    )?;
    let (eps_ms, misspecification) = match ms_model {
        Some(ms) => {
            let eps_ms = estimate_lipschitz_eps(ms, region, 1, rng)?.closed_form;
            let b = estimate_misspecification_bound(
                true_model,
                ms,
                region,
                settings.ms_points.max(1),
                settings.ms_samples.max(1),
                rng,
            )?;
            (Some(eps_ms), b.bound())
        }
        None => (None, 0.0),
    };
    let range = if ml.lipschitz > 0.0 {
        step_size_range(ml.mu, ml.lipschitz, eps.closed_form)?
    } else {
        StepSizeRange { eta_max: None }
    };
    Ok(ConstantsReport {
        mu: ml.mu,
        lipschitz: ml.lipschitz,
        eps: eps.closed_form,
        eps_sampled: eps.sampled,
        eps_ms,
        sigma: sigma.sigma,
        misspecification,
        eta_max: range.eta_max,
        lipschitz_points: ml.points,
        lipschitz_pairs: ml.pairs,
    })
}
