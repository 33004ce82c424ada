//! Windowed constraint-violation metric `<CV(z)>`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, FlexError, Result};
use crate::problem::{realize_unchecked, Decision, FlexProblem};
use crate::response::{expected_constraints, ResponseModel};

/// How `max_j E[h_j]` is evaluated per iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CvMethod {
    /// Closed-form moments of the clamped law.
    Exact,
    MonteCarlo { samples: usize },
}

impl Default for CvMethod {
    fn default() -> Self {
        CvMethod::MonteCarlo { samples: 10_000 }
    }
}

fn max_of(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Average over `decisions` of `max_j E_{z ~ D(y)}[h_j(x + beta z)]`.
///
/// Deterministic models and `beta = 0` are evaluated exactly regardless of `method`.
pub fn constraint_violation_metric<R: Rng + ?Sized>(
    problem: &FlexProblem,
    decisions: &[Decision],
    model: &ResponseModel,
    method: CvMethod,
    rng: &mut R,
) -> Result<f64> {
    if decisions.is_empty() {
        return Err(FlexError::param("decisions", "window must hold at least one iterate"));
    }
    let mut total = 0.0;
    for y in decisions {
        check_len("decision", problem.n(), y.n())?;
        let exact = matches!(method, CvMethod::Exact)
            || model.is_deterministic()
            || y.beta().iter().all(|b| *b == 0.0);
        let value = match method {
            CvMethod::MonteCarlo { samples } if !exact => {
                if samples == 0 {
                    return Err(FlexError::param("samples", "must be positive"));
                }
                let mut sums = vec![0.0; problem.m()];
                let mut h = Vec::with_capacity(problem.m());
                for _ in 0..samples {
                    let z = model.sample(y, rng);
                    problem.constraints_into(&realize_unchecked(y, &z), &mut h);
                    for (s, v) in sums.iter_mut().zip(&h) {
                        *s += v;
                    }
                }
                max_of(sums.into_iter().map(|s| s / samples as f64))
            }
            _ => max_of(expected_constraints(problem, y, &model.laws(y))),
        };
        total += value;
    }
    Ok(total / decisions.len() as f64)
}
