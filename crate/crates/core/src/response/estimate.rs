//! Sampled estimators of the response-law constants used by the convergence
//! bounds: distributional Lipschitzness, gradient noise level and model
//! misspecification.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{FlexError, Result};
use crate::problem::Decision;
use crate::response::{Noise, ResponseModel};
use crate::saddle::SearchRegion;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// Largest sampled ratio `||Psi(y) - Psi(y')|| / ||y - y'||` (a lower estimate).
    pub sampled: f64,
    /// Closed-form bound from the shift slopes over the region (an upper bound).
    pub closed_form: f64,
    pub pairs: usize,
}

pub fn estimate_lipschitz_eps<R: Rng + ?Sized>(
    model: &ResponseModel,
    region: &SearchRegion,
    pair_count: usize,
    rng: &mut R,
) -> Result<LipschitzEstimate> {
    if pair_count < 1 {
        return Err(FlexError::param("pair_count", "need at least one pair"));
    }
    let n = region.n();
    let closed_form = (0..n)
        .map(|i| model.shift.slope_bound(region.x_lo[i], region.x_hi[i], region.beta_hi[i]))
        .fold(0.0f64, f64::max);
    let mut sampled = 0.0f64;
    for k in 0..pair_count {
        let a = region.sample_decision(rng);
        let b = if k % 2 == 0 {
            region.perturb_decision(&a, 1e-5, rng)
        } else {
            region.sample_decision(rng)
        };
        let dy = a.distance(&b);
        if dy == 0.0 {
            continue;
        }
        let (sa, sb) = (model.shifts(&a), model.shifts(&b));
        let ds = sa.iter().zip(&sb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        sampled = sampled.max(ds / dy);
    }
    Ok(LipschitzEstimate {
        sampled,
        closed_form,
        pairs: pair_count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    /// `sqrt(2) * max(dev_y, dev_lambda)`.
    pub sigma: f64,
    /// Largest sampled `E||grad_y phi - E grad_y phi||`.
    pub dev_y: f64,
    /// Largest sampled `E||grad_lambda phi - E grad_lambda phi||`.
    pub dev_lambda: f64,
    pub points: usize,
    pub samples: usize,
}

/// Mean absolute deviation (in norm) of a set of vectors from their mean.
pub(crate) fn mean_deviation(vectors: &[Vec<f64>]) -> f64 {
    let count = vectors.len() as f64;
    let dim = vectors.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / count;
        }
    }
    vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>().sqrt())
        .sum::<f64>()
        / count
}

/// Empirical noise level of the stochastic gradients over sampled `(y, lambda)`.
///
/// `gradients(y, lambda, z)` returns `(grad_y phi, grad_lambda phi)`.
pub fn estimate_sigma<R, G>(
    model: &ResponseModel,
    gradients: G,
    region: &SearchRegion,
    m: usize,
    points: usize,
    samples: usize,
    rng: &mut R,
) -> Result<SigmaEstimate>
where
    R: Rng + ?Sized,
    G: Fn(&Decision, &[f64], &[f64]) -> (Vec<f64>, Vec<f64>),
{
    if points == 0 || samples < 2 {
        return Err(FlexError::param("samples", "need at least one point and two samples"));
    }
    let (mut dev_y, mut dev_lambda) = (0.0f64, 0.0f64);
    if model.is_deterministic() {
        return Ok(SigmaEstimate {
            sigma: 0.0,
            dev_y,
            dev_lambda,
            points,
            samples,
        });
    }
    for _ in 0..points {
        let y = region.sample_decision(rng);
        let lambda = region.sample_lambda(m, rng);
        let (mut gy, mut gl) = (Vec::with_capacity(samples), Vec::with_capacity(samples));
        for _ in 0..samples {
            let z = model.sample(&y, rng);
            let (a, b) = gradients(&y, &lambda, &z);
            gy.push(a);
            gl.push(b);
        }
        dev_y = dev_y.max(mean_deviation(&gy));
        dev_lambda = dev_lambda.max(mean_deviation(&gl));
    }
    Ok(SigmaEstimate {
        sigma: std::f64::consts::SQRT_2 * dev_y.max(dev_lambda),
        dev_y,
        dev_lambda,
        points,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisspecificationEstimate {
    /// Largest sampled `E||z_true - z_ms||` under the shared-noise coupling;
    /// an upper estimate of `W1(D_ms(y), D(y))` at each sampled `y`.
    pub coupling_bound: f64,
    /// Support-diameter bound `2 sqrt(n)`.
    pub trivial_cap: f64,
    pub points: usize,
    pub samples: usize,
}

impl MisspecificationEstimate {
    /// The smaller of the two bounds.
    pub fn bound(&self) -> f64 {
        self.coupling_bound.min(self.trivial_cap)
    }
}

/// Maps a standard normal draw to the noise law by its quantile, so that
/// different noise families can share one source of randomness.
fn coupled_noise(noise: &Noise, g: f64) -> f64 {
    match *noise {
        Noise::None => 0.0,
        Noise::Gaussian { mean, std_dev } => mean + std_dev * g,
        Noise::Uniform { half_width } => {
            let p = 0.5 * erfc(-g / std::f64::consts::SQRT_2);
            half_width * (2.0 * p - 1.0)
        }
    }
}

pub fn estimate_misspecification_bound<R: Rng + ?Sized>(
    true_model: &ResponseModel,
    ms_model: &ResponseModel,
    region: &SearchRegion,
    points: usize,
    samples: usize,
    rng: &mut R,
) -> Result<MisspecificationEstimate> {
    if points == 0 || samples == 0 {
        return Err(FlexError::param("samples", "need at least one point and one sample"));
    }
    let n = region.n();
    let mut coupling_bound = 0.0f64;
    for _ in 0..points {
        let y = region.sample_decision(rng);
        let mut total = 0.0;
        for _ in 0..samples {
            let g: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let xi_true: Vec<f64> = g.iter().map(|g| coupled_noise(&true_model.noise, *g)).collect();
            let xi_ms: Vec<f64> = g.iter().map(|g| coupled_noise(&ms_model.noise, *g)).collect();
            let a = true_model.respond(&y, &xi_true);
            let b = ms_model.respond(&y, &xi_ms);
            total += a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        }
        coupling_bound = coupling_bound.max(total / samples as f64);
    }
    Ok(MisspecificationEstimate {
        coupling_bound,
        trivial_cap: 2.0 * (n as f64).sqrt(),
        points,
        samples,
    })
}
