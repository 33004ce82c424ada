//! Decision-dependent response laws `z ~ D(y)`.
//!
//! Each user answers independently with `z_i = clamp(Psi(x_i, beta_i) + xi_i, -1, 1)`.
//! Clamping puts atoms at `+-1`; every expectation engine below carries those
//! atoms explicitly and integrates the interior with Gauss-Legendre nodes.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{FlexError, Result};
use crate::problem::{realize_unchecked, Decision, FlexProblem};

pub mod estimate;

pub use estimate::{
    estimate_lipschitz_eps, estimate_misspecification_bound, estimate_sigma, LipschitzEstimate,
    MisspecificationEstimate, SigmaEstimate,
};

/// Default Gauss-Legendre order for interior integration.
pub const DEFAULT_QUADRATURE_NODES: usize = 64;

/// Per-user shift `Psi(x_i, beta_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ShiftRule {
    /// `beta (low - x)` below `low`, `-beta (x - high)` above `high`, zero between.
    TruePiecewise { low: f64, high: f64 },
    /// `-beta (x - center)`.
    MisspecifiedLinear { center: f64 },
    /// `a_x x + a_beta beta + offset`.
    CustomAdditive { a_x: f64, a_beta: f64, offset: f64 },
}

impl ShiftRule {
    pub fn eval(&self, x: f64, beta: f64) -> f64 {
        match *self {
            ShiftRule::TruePiecewise { low, high } => {
                if x <= low {
                    beta * (low - x)
                } else if x >= high {
                    -beta * (x - high)
                } else {
                    0.0
                }
            }
            ShiftRule::MisspecifiedLinear { center } => -beta * (x - center),
            ShiftRule::CustomAdditive { a_x, a_beta, offset } => a_x * x + a_beta * beta + offset,
        }
    }

    /// Supremum of `||grad Psi||` over `x in [x_lo, x_hi]`, `beta in [0, beta_hi]`.
    pub fn slope_bound(&self, x_lo: f64, x_hi: f64, beta_hi: f64) -> f64 {
        match *self {
            ShiftRule::TruePiecewise { low, high } => {
                let reach = (low - x_lo).max(x_hi - high).max(0.0);
                let x_slope = if x_lo < low || x_hi > high { beta_hi } else { 0.0 };
                x_slope.hypot(reach)
            }
            ShiftRule::MisspecifiedLinear { center } => {
                let reach = (x_lo - center).abs().max((x_hi - center).abs());
                beta_hi.hypot(reach)
            }
            ShiftRule::CustomAdditive { a_x, a_beta, .. } => a_x.hypot(a_beta),
        }
    }
}

/// Static noise `xi_i` added to the shift before clamping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Noise {
    None,
    Gaussian { mean: f64, std_dev: f64 },
    Uniform { half_width: f64 },
}

impl Noise {
    pub fn is_none(&self) -> bool {
        match *self {
            Noise::None => true,
            Noise::Gaussian { std_dev, .. } => std_dev == 0.0,
            Noise::Uniform { half_width } => half_width == 0.0,
        }
    }

    fn offset(&self) -> f64 {
        match *self {
            Noise::Gaussian { mean, .. } => mean,
            _ => 0.0,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Noise::None => 0.0,
            Noise::Gaussian { mean, std_dev } => {
                let g: f64 = rng.sample(StandardNormal);
                mean + std_dev * g
            }
            Noise::Uniform { half_width } => half_width * (2.0 * rng.random::<f64>() - 1.0),
        }
    }

    /// Returns a copy with the spread multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Noise {
        match *self {
            Noise::None => Noise::None,
            Noise::Gaussian { mean, std_dev } => Noise::Gaussian {
                mean,
                std_dev: std_dev * factor,
            },
            Noise::Uniform { half_width } => Noise::Uniform {
                half_width: half_width * factor,
            },
        }
    }
}

/// Additive-shift response model applied identically to every user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseModel {
    pub shift: ShiftRule,
    pub noise: Noise,
}

impl ResponseModel {
    pub fn new(shift: ShiftRule, noise: Noise) -> Result<Self> {
        match noise {
            Noise::Gaussian { std_dev, mean } if !(std_dev >= 0.0 && mean.is_finite()) => {
                return Err(FlexError::param("noise", "gaussian std_dev must be nonnegative"))
            }
            Noise::Uniform { half_width } if !(half_width >= 0.0) => {
                return Err(FlexError::param("noise", "uniform half_width must be nonnegative"))
            }
            _ => {}
        }
        Ok(ResponseModel { shift, noise })
    }

    /// Dead zone `[19.0, 20.5]` with Gaussian noise of variance 0.1.
    pub fn thermostat_true() -> Self {
        ResponseModel {
            shift: ShiftRule::TruePiecewise { low: 19.0, high: 20.5 },
            noise: Noise::Gaussian {
                mean: 0.0,
                std_dev: 0.1f64.sqrt(),
            },
        }
    }

    /// Deterministic linear reaction around 19.75.
    pub fn thermostat_misspecified() -> Self {
        ResponseModel {
            shift: ShiftRule::MisspecifiedLinear { center: 19.75 },
            noise: Noise::None,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.noise.is_none()
    }

    pub fn shifts(&self, decision: &Decision) -> Vec<f64> {
        decision
            .x()
            .iter()
            .zip(decision.beta())
            .map(|(x, b)| self.shift.eval(*x, *b))
            .collect()
    }

    /// Response for given noise draws (common random numbers).
    pub fn respond(&self, decision: &Decision, noise: &[f64]) -> Vec<f64> {
        decision
            .x()
            .iter()
            .zip(decision.beta())
            .zip(noise)
            .map(|((x, b), xi)| (self.shift.eval(*x, *b) + xi).clamp(-1.0, 1.0))
            .collect()
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.noise.draw(rng)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, decision: &Decision, rng: &mut R) -> Vec<f64> {
        let noise = self.draw_noise(decision.n(), rng);
        self.respond(decision, &noise)
    }

    /// Per-user clamped laws at a decision.
    pub fn laws(&self, decision: &Decision) -> Vec<ClampedLaw> {
        self.shifts(decision)
            .into_iter()
            .map(|shift| ClampedLaw {
                shift,
                noise: self.noise,
            })
            .collect()
    }
}

/// Law of `clamp(shift + xi, -1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampedLaw {
    pub shift: f64,
    pub noise: Noise,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl ClampedLaw {
    fn location(&self) -> f64 {
        self.shift + self.noise.offset()
    }

    /// `P[z = -1]`.
    pub fn mass_low(&self) -> f64 {
        let m = self.location();
        match self.noise {
            Noise::Gaussian { std_dev, .. } if std_dev > 0.0 => std_normal_cdf((-1.0 - m) / std_dev),
            Noise::Uniform { half_width } if half_width > 0.0 => {
                ((-1.0 - (m - half_width)) / (2.0 * half_width)).clamp(0.0, 1.0)
            }
            _ => f64::from(u8::from(m <= -1.0)),
        }
    }

    /// `P[z = +1]`.
    pub fn mass_high(&self) -> f64 {
        let m = self.location();
        match self.noise {
            Noise::Gaussian { std_dev, .. } if std_dev > 0.0 => std_normal_cdf((m - 1.0) / std_dev),
            Noise::Uniform { half_width } if half_width > 0.0 => {
                ((m + half_width - 1.0) / (2.0 * half_width)).clamp(0.0, 1.0)
            }
            _ => f64::from(u8::from(m >= 1.0)),
        }
    }

    /// `(E[z], E[z^2])` in closed form.
    pub fn moments(&self) -> (f64, f64) {
        let m = self.location();
        let (lo, hi) = (self.mass_low(), self.mass_high());
        match self.noise {
            Noise::Gaussian { std_dev: s, .. } if s > 0.0 => {
                let a = (-1.0 - m) / s;
                let b = (1.0 - m) / s;
                let mass = std_normal_cdf(b) - std_normal_cdf(a);
                let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
                let first = m * mass + s * (pa - pb);
                let second = m * m * mass + 2.0 * m * s * (pa - pb) + s * s * (mass + a * pa - b * pb);
                (first - lo + hi, second + lo + hi)
            }
            Noise::Uniform { half_width: h } if h > 0.0 => {
                let a = (m - h).max(-1.0);
                let b = (m + h).min(1.0);
                let (first, second) = if b > a {
                    (
                        (b * b - a * a) / (4.0 * h),
                        (b * b * b - a * a * a) / (6.0 * h),
                    )
                } else {
                    (0.0, 0.0)
                };
                (first - lo + hi, second + lo + hi)
            }
            _ => {
                let z = m.clamp(-1.0, 1.0);
                (z, z * z)
            }
        }
    }

    /// Interior support `(a, b)` carrying continuous density, if any.
    fn interior(&self) -> Option<(f64, f64)> {
        let m = self.location();
        let (a, b) = match self.noise {
            Noise::Gaussian { std_dev: s, .. } if s > 0.0 => ((m - 12.0 * s).max(-1.0), (m + 12.0 * s).min(1.0)),
            Noise::Uniform { half_width: h } if h > 0.0 => ((m - h).max(-1.0), (m + h).min(1.0)),
            _ => return None,
        };
        (b > a).then_some((a, b))
    }

    fn density(&self, t: f64) -> f64 {
        let m = self.location();
        match self.noise {
            Noise::Gaussian { std_dev: s, .. } if s > 0.0 => std_normal_pdf((t - m) / s) / s,
            Noise::Uniform { half_width: h } if h > 0.0 => 1.0 / (2.0 * h),
            _ => 0.0,
        }
    }

    /// Weighted point set reproducing expectations under this law: the two
    /// atoms plus quadrature nodes on the interior.
    pub fn discretize(&self, quad: &Quadrature) -> DiscreteLaw {
        if self.noise.is_none() {
            return DiscreteLaw {
                points: vec![(self.location().clamp(-1.0, 1.0), 1.0)],
            };
        }
        let mut points = Vec::with_capacity(quad.len() + 2);
        let (lo, hi) = (self.mass_low(), self.mass_high());
        if lo > 0.0 {
            points.push((-1.0, lo));
        }
        if let Some((a, b)) = self.interior() {
            let half = 0.5 * (b - a);
            let mid = 0.5 * (b + a);
            for &(node, weight) in quad.pairs() {
                let t = mid + half * node;
                points.push((t, half * weight * self.density(t)));
            }
        }
        if hi > 0.0 {
            points.push((1.0, hi));
        }
        DiscreteLaw { points }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Quadrature {
    pairs: Vec<(f64, f64)>,
}

impl Quadrature {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(FlexError::param("nodes", format!("need at least 2, got {nodes}")));
        }
        let rule = GaussLegendre::new(NonZeroUsize::new(nodes).expect("nodes >= 2"));
        Ok(Quadrature {
            pairs: rule.as_node_weight_pairs().to_vec(),
        })
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature::new(DEFAULT_QUADRATURE_NODES).expect("default order is valid")
    }
}

/// A finite weighted point set standing in for a 1-D law.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLaw {
    pub points: Vec<(f64, f64)>,
}

impl DiscreteLaw {
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.points.iter().map(|(t, w)| w * f(*t)).sum()
    }

    /// For the exponential tilt `exp(q(t))` returns `ln E[exp q]` together with
    /// the tilted means of `g0` and `g1`, computed without overflow.
    fn tilted(&self, q: impl Fn(f64) -> f64, g0: impl Fn(f64) -> f64, g1: impl Fn(f64) -> f64) -> (f64, f64, f64) {
        let peak = self
            .points
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(t, _)| q(*t))
            .fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut a, mut b) = (0.0, 0.0, 0.0);
        for &(t, w) in &self.points {
            if w <= 0.0 {
                continue;
            }
            let e = w * (q(t) - peak).exp();
            z += e;
            a += e * g0(t);
            b += e * g1(t);
        }
        (peak + z.ln(), a / z, b / z)
    }
}

/// Summary of `D(y)` needed by mean-field gradients.
#[derive(Debug, Clone, PartialEq)]
pub enum DistributionSummary {
    /// Deterministic response.
    Point(Vec<f64>),
    /// Independent per-user clamped laws.
    Laws(Vec<ClampedLaw>),
}

pub fn mean_gradient_inputs(model: &ResponseModel, decision: &Decision) -> DistributionSummary {
    if model.is_deterministic() {
        DistributionSummary::Point(model.respond(decision, &vec![0.0; decision.n()]))
    } else {
        DistributionSummary::Laws(model.laws(decision))
    }
}

/// Expectations of the Chernoff terms and their chain-rule pieces:
/// `value[j] = E[exp(h_j(v)/u)]`,
/// `grad_x[j][i] = E[exp(h_j(v)/u) dh_j/dv_i]`,
/// `grad_beta[j][i] = E[exp(h_j(v)/u) dh_j/dv_i z_i]`, with `v = x + beta z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChernoffMoments {
    pub value: Vec<f64>,
    pub grad_x: Vec<Vec<f64>>,
    pub grad_beta: Vec<Vec<f64>>,
}

impl ChernoffMoments {
    fn zeros(m: usize, n: usize) -> Self {
        ChernoffMoments {
            value: vec![0.0; m],
            grad_x: vec![vec![0.0; n]; m],
            grad_beta: vec![vec![0.0; n]; m],
        }
    }

    /// Single realization `z`.
    pub fn at_sample(problem: &FlexProblem, u: f64, decision: &Decision, z: &[f64]) -> Self {
        let mut out = ChernoffMoments::zeros(problem.m(), problem.n());
        out.accumulate(problem, u, decision, z, 1.0);
        out
    }

    fn accumulate(&mut self, problem: &FlexProblem, u: f64, decision: &Decision, z: &[f64], weight: f64) {
        let v = realize_unchecked(decision, z);
        let n = problem.n();
        let ball = (problem.ball_value(&v) / u).exp() * weight;
        self.value[0] += ball;
        for i in 0..n {
            let dh = 2.0 * (v[i] - problem.x_ref()[i]);
            self.grad_x[0][i] += ball * dh;
            self.grad_beta[0][i] += ball * dh * z[i];
        }
        for (j, (row, e)) in problem.d().iter().zip(problem.e()).enumerate() {
            let h = crate::problem::dot(row, &v) - e;
            let ex = (h / u).exp() * weight;
            self.value[j + 1] += ex;
            for i in 0..n {
                self.grad_x[j + 1][i] += ex * row[i];
                self.grad_beta[j + 1][i] += ex * row[i] * z[i];
            }
        }
    }

    /// Empirical average over samples.
    pub fn from_samples(problem: &FlexProblem, u: f64, decision: &Decision, samples: &[Vec<f64>]) -> Self {
        let mut out = ChernoffMoments::zeros(problem.m(), problem.n());
        let w = 1.0 / samples.len() as f64;
        for z in samples {
            out.accumulate(problem, u, decision, z, w);
        }
        out
    }

    /// Exact (up to quadrature) expectation exploiting per-user independence:
    /// every Chernoff integrand factors into per-coordinate terms.
    pub fn from_laws(problem: &FlexProblem, u: f64, decision: &Decision, laws: &[DiscreteLaw]) -> Self {
        let n = problem.n();
        let mut out = ChernoffMoments::zeros(problem.m(), n);
        let (x, beta, r) = (decision.x(), decision.beta(), problem.x_ref());

        let mut log_total = -problem.gamma() / u;
        let mut tilted = Vec::with_capacity(n);
        for i in 0..n {
            let dev = |t: f64| x[i] - r[i] + beta[i] * t;
            let (log_f, a, b) = laws[i].tilted(
                |t| dev(t) * dev(t) / u,
                |t| 2.0 * dev(t),
                |t| 2.0 * dev(t) * t,
            );
            log_total += log_f;
            tilted.push((a, b));
        }
        let ball = log_total.exp();
        out.value[0] = ball;
        for (i, (a, b)) in tilted.into_iter().enumerate() {
            out.grad_x[0][i] = ball * a;
            out.grad_beta[0][i] = ball * b;
        }

        for (j, (row, e)) in problem.d().iter().zip(problem.e()).enumerate() {
            let mut log_total = -e / u;
            let mut tilt_z = vec![0.0; n];
            for i in 0..n {
                let d = row[i];
                if d == 0.0 {
                    continue;
                }
                let (log_f, mean_z, _) =
                    laws[i].tilted(|t| d * (x[i] + beta[i] * t) / u, |t| t, |_| 0.0);
                log_total += log_f;
                tilt_z[i] = mean_z;
            }
            let value = log_total.exp();
            out.value[j + 1] = value;
            for i in 0..n {
                out.grad_x[j + 1][i] = value * row[i];
                out.grad_beta[j + 1][i] = value * row[i] * tilt_z[i];
            }
        }
        out
    }

    /// Moments under the model's law at `law_at` (the decision that induces
    /// the distribution), integrated along `decision`.
    pub fn under_model(
        problem: &FlexProblem,
        u: f64,
        model: &ResponseModel,
        law_at: &Decision,
        decision: &Decision,
        quad: &Quadrature,
    ) -> Self {
        let laws: Vec<DiscreteLaw> = model.laws(law_at).iter().map(|l| l.discretize(quad)).collect();
        ChernoffMoments::from_laws(problem, u, decision, &laws)
    }
}

/// Expected constraint values `E[h_j(x + beta z)]` under independent laws.
pub fn expected_constraints(problem: &FlexProblem, decision: &Decision, laws: &[ClampedLaw]) -> Vec<f64> {
    let moments: Vec<(f64, f64)> = laws.iter().map(ClampedLaw::moments).collect();
    let (x, beta, r) = (decision.x(), decision.beta(), problem.x_ref());
    let mean_v: Vec<f64> = (0..problem.n()).map(|i| x[i] + beta[i] * moments[i].0).collect();
    let mut out = Vec::with_capacity(problem.m());
    let ball: f64 = (0..problem.n())
        .map(|i| {
            let a = x[i] - r[i];
            a * a + 2.0 * a * beta[i] * moments[i].0 + beta[i] * beta[i] * moments[i].1
        })
        .sum();
    out.push(ball - problem.gamma());
    for (row, e) in problem.d().iter().zip(problem.e()) {
        out.push(crate::problem::dot(row, &mean_v) - e);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExpectationMethod {
    MonteCarlo { samples: usize, seed: u64 },
    FactorizedQuadrature { nodes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectationRequest {
    pub decision: Decision,
    /// Constraint index in `[ball; affine rows]` order.
    pub constraint: usize,
    /// Chernoff temperature.
    pub u: f64,
    pub method: ExpectationMethod,
}

/// `E_{z ~ D(y)}[exp(h_j(x + beta z) / u)]` where `D(y)` is induced by the request's decision.
pub fn expect_exp_constraint(problem: &FlexProblem, model: &ResponseModel, request: &ExpectationRequest) -> Result<f64> {
    if !(request.u > 0.0) {
        return Err(FlexError::param("u", format!("must be positive, got {}", request.u)));
    }
    if request.constraint >= problem.m() {
        return Err(FlexError::param(
            "constraint",
            format!("index {} out of range for m = {}", request.constraint, problem.m()),
        ));
    }
    if request.decision.n() != problem.n() {
        return Err(FlexError::DimensionMismatch {
            what: "decision",
            expected: problem.n(),
            got: request.decision.n(),
        });
    }
    let y = &request.decision;
    let moments = match request.method {
        ExpectationMethod::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(FlexError::param("samples", "need at least one sample"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draws: Vec<Vec<f64>> = (0..samples).map(|_| model.sample(y, &mut rng)).collect();
            ChernoffMoments::from_samples(problem, request.u, y, &draws)
        }
        ExpectationMethod::FactorizedQuadrature { nodes } => {
            let quad = Quadrature::new(nodes)?;
            ChernoffMoments::under_model(problem, request.u, model, y, y, &quad)
        }
    };
    Ok(moments.value[request.constraint])
}
