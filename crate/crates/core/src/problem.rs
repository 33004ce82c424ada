//! The flexible resource problem: cost, constraint system and the exact
//! worst-case envelopes of its constraints over the unit hyperbox.
//!
//! Constraints are always indexed as `[norm ball; affine rows in D order]`,
//! so a problem with `c` affine rows has `m = 1 + c` scalar constraints.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, FlexError, Result};

/// Default cap on `n` for the brute-force vertex enumeration.
pub const VERTEX_ORACLE_CAP: usize = 20;

/// Tolerance used when comparing oracle quantities for equality.
pub const ORACLE_TOL: f64 = 1e-9;

/// Tolerance used when certifying first-order solver outputs.
pub const SOLVER_FEAS_TOL: f64 = 1e-6;

/// Cost parameters and constraint system of a flexible problem.
///
/// Cost: `g(y) = (eps_x/2)||x||^2 + sum_i w_i (-beta_i + (eps_beta/2) beta_i^2)`.
/// Constraints on a realized point `v`: `||v - x_ref||^2 <= gamma` and `D v <= e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProblem", into = "RawProblem")]
pub struct FlexProblem {
    eps_x: f64,
    eps_beta: f64,
    weights: Vec<f64>,
    x_ref: Vec<f64>,
    gamma: f64,
    d: Vec<Vec<f64>>,
    e: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawProblem {
    eps_x: f64,
    eps_beta: f64,
    weights: Vec<f64>,
    x_ref: Vec<f64>,
    gamma: f64,
    #[serde(default)]
    d: Vec<Vec<f64>>,
    #[serde(default)]
    e: Vec<f64>,
}

impl TryFrom<RawProblem> for FlexProblem {
    type Error = FlexError;

    fn try_from(raw: RawProblem) -> Result<Self> {
        FlexProblem::new(
            raw.eps_x,
            raw.eps_beta,
            raw.weights,
            raw.x_ref,
            raw.gamma,
            raw.d,
            raw.e,
        )
    }
}

impl From<FlexProblem> for RawProblem {
    fn from(p: FlexProblem) -> Self {
        RawProblem {
            eps_x: p.eps_x,
            eps_beta: p.eps_beta,
            weights: p.weights,
            x_ref: p.x_ref,
            gamma: p.gamma,
            d: p.d,
            e: p.e,
        }
    }
}

impl FlexProblem {
    pub fn new(
        eps_x: f64,
        eps_beta: f64,
        weights: Vec<f64>,
        x_ref: Vec<f64>,
        gamma: f64,
        d: Vec<Vec<f64>>,
        e: Vec<f64>,
    ) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(FlexError::param("weights", "at least one user is required"));
        }
        check_len("x_ref", n, x_ref.len())?;
        check_len("e", d.len(), e.len())?;
        for row in &d {
            check_len("row of D", n, row.len())?;
        }
        if !(eps_x > 0.0 && eps_x.is_finite()) {
            return Err(FlexError::param("eps_x", format!("must be positive, got {eps_x}")));
        }
        if !(eps_beta > 0.0 && eps_beta.is_finite()) {
            return Err(FlexError::param(
                "eps_beta",
                format!("must be positive, got {eps_beta}"),
            ));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(FlexError::param("gamma", format!("must be positive, got {gamma}")));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(FlexError::param("weights", format!("must be nonnegative, got {w}")));
        }
        let all_finite = x_ref.iter().chain(e.iter()).chain(d.iter().flatten()).all(|v| v.is_finite());
        if !all_finite {
            return Err(FlexError::param("problem data", "non-finite entry"));
        }
        Ok(FlexProblem {
            eps_x,
            eps_beta,
            weights,
            x_ref,
            gamma,
            d,
            e,
        })
    }

    /// Number of users.
    pub fn n(&self) -> usize {
        self.weights.len()
    }

    /// Number of affine rows.
    pub fn c(&self) -> usize {
        self.d.len()
    }

    /// Total number of scalar constraints.
    pub fn m(&self) -> usize {
        1 + self.d.len()
    }

    pub fn eps_x(&self) -> f64 {
        self.eps_x
    }

    pub fn eps_beta(&self) -> f64 {
        self.eps_beta
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn x_ref(&self) -> &[f64] {
        &self.x_ref
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn d(&self) -> &[Vec<f64>] {
        &self.d
    }

    pub fn e(&self) -> &[f64] {
        &self.e
    }

    /// Strong-convexity modulus of the cost, `min(eps_x, min_i w_i eps_beta)`.
    pub fn cost_modulus(&self) -> f64 {
        let wmin = self.weights.iter().copied().fold(f64::INFINITY, f64::min);
        self.eps_x.min(wmin * self.eps_beta)
    }

    fn check_decision(&self, decision: &Decision) -> Result<()> {
        check_len("decision", self.n(), decision.n())
    }

    /// Evaluates the cost `g(y)`.
    pub fn objective(&self, decision: &Decision) -> Result<f64> {
        self.check_decision(decision)?;
        Ok(self.objective_unchecked(&decision.x, &decision.beta))
    }

    pub(crate) fn objective_unchecked(&self, x: &[f64], beta: &[f64]) -> f64 {
        let nominal = 0.5 * self.eps_x * x.iter().map(|v| v * v).sum::<f64>();
        let flex: f64 = self
            .weights
            .iter()
            .zip(beta)
            .map(|(w, b)| w * (-b + 0.5 * self.eps_beta * b * b))
            .sum();
        nominal + flex
    }

    /// Gradient of `g` stacked as `[d/dx; d/dbeta]`.
    pub fn objective_gradient(&self, decision: &Decision) -> Result<Vec<f64>> {
        self.check_decision(decision)?;
        let mut grad = Vec::with_capacity(2 * self.n());
        self.objective_gradient_into(&decision.x, &decision.beta, &mut grad);
        Ok(grad)
    }

    pub(crate) fn objective_gradient_into(&self, x: &[f64], beta: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(x.iter().map(|v| self.eps_x * v));
        out.extend(
            self.weights
                .iter()
                .zip(beta)
                .map(|(w, b)| w * (-1.0 + self.eps_beta * b)),
        );
    }

    /// Evaluates all `m` constraint functions at a realized point `v`.
    pub fn eval_constraints(&self, v: &[f64]) -> Result<ConstraintValues> {
        check_len("realized point", self.n(), v.len())?;
        let mut values = Vec::with_capacity(self.m());
        self.constraints_into(v, &mut values);
        Ok(ConstraintValues { values })
    }

    pub(crate) fn constraints_into(&self, v: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(self.ball_value(v));
        for (row, e) in self.d.iter().zip(&self.e) {
            out.push(dot(row, v) - e);
        }
    }

    pub(crate) fn ball_value(&self, v: &[f64]) -> f64 {
        v.iter()
            .zip(&self.x_ref)
            .map(|(a, r)| (a - r) * (a - r))
            .sum::<f64>()
            - self.gamma
    }

    /// Exact worst-case constraint values of a decision over the unit hyperbox.
    pub fn robust_margins(&self, decision: &Decision) -> Result<ConstraintValues> {
        self.check_decision(decision)?;
        let s = worst_case_norm_envelope(decision, &self.x_ref)?;
        let mut values = Vec::with_capacity(self.m());
        values.push(s.iter().map(|v| v * v).sum::<f64>() - self.gamma);
        for (row, e) in self.d.iter().zip(&self.e) {
            values.push(worst_case_affine_margin(row, *e, decision)?);
        }
        Ok(ConstraintValues { values })
    }

    /// Largest worst-case constraint value; robust-feasible iff `<= 0`.
    pub fn robust_worst_margin(&self, decision: &Decision) -> Result<f64> {
        Ok(self.robust_margins(decision)?.max())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Corridor coupling rows for `n` adjacent areas.
///
/// One-sided: row `j` is `v_j - v_{j+1} <= bound` (`n - 1` rows).
/// Two-sided additionally adds `v_{j+1} - v_j <= bound`.
pub fn corridor(n: usize, bound: f64, two_sided: bool) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut d = Vec::new();
    for j in 0..n.saturating_sub(1) {
        let mut row = vec![0.0; n];
        row[j] = 1.0;
        row[j + 1] = -1.0;
        d.push(row);
    }
    if two_sided {
        for j in 0..n.saturating_sub(1) {
            let mut row = vec![0.0; n];
            row[j] = -1.0;
            row[j + 1] = 1.0;
            d.push(row);
        }
    }
    let e = vec![bound; d.len()];
    (d, e)
}

/// A flexible decision `y = (x, beta)`: nominal levels plus per-user radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDecision", into = "RawDecision")]
pub struct Decision {
    x: Vec<f64>,
    beta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawDecision {
    x: Vec<f64>,
    beta: Vec<f64>,
}

impl TryFrom<RawDecision> for Decision {
    type Error = FlexError;

    fn try_from(raw: RawDecision) -> Result<Self> {
        Decision::new(raw.x, raw.beta)
    }
}

impl From<Decision> for RawDecision {
    fn from(d: Decision) -> Self {
        RawDecision { x: d.x, beta: d.beta }
    }
}

impl Decision {
    pub fn new(x: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        check_len("beta", x.len(), beta.len())?;
        if let Some(b) = beta.iter().find(|b| !(**b >= 0.0)) {
            return Err(FlexError::param("beta", format!("radii must be nonnegative, got {b}")));
        }
        if x.iter().chain(beta.iter()).any(|v| !v.is_finite()) {
            return Err(FlexError::param("decision", "non-finite entry"));
        }
        Ok(Decision { x, beta })
    }

    /// Builds a decision from a stacked `[x; beta]` vector, clipping beta at zero.
    pub fn from_stacked(y: &[f64]) -> Self {
        let n = y.len() / 2;
        Decision {
            x: y[..n].to_vec(),
            beta: y[n..2 * n].iter().map(|b| b.max(0.0)).collect(),
        }
    }

    pub(crate) fn from_parts_unchecked(x: Vec<f64>, beta: Vec<f64>) -> Self {
        debug_assert!(beta.iter().all(|b| *b >= 0.0));
        Decision { x, beta }
    }

    pub fn zeros(n: usize) -> Self {
        Decision {
            x: vec![0.0; n],
            beta: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// `[x; beta]`.
    pub fn stacked(&self) -> Vec<f64> {
        let mut y = self.x.clone();
        y.extend_from_slice(&self.beta);
        y
    }

    pub fn with_beta(&self, beta: Vec<f64>) -> Result<Self> {
        Decision::new(self.x.clone(), beta)
    }

    pub fn distance(&self, other: &Decision) -> f64 {
        self.x
            .iter()
            .chain(&self.beta)
            .zip(other.x.iter().chain(&other.beta))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Values of the `m` constraint functions; feasible iff all entries are `<= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintValues {
    pub values: Vec<f64>,
}

impl ConstraintValues {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// Result of the brute-force vertex enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustCertificate {
    pub feasible: bool,
    /// Sign pattern in `{-1, +1}^n` attaining the worst margin.
    pub worst_vertex: Vec<i8>,
    /// Index of the constraint attaining the worst margin.
    pub worst_constraint: usize,
    pub worst_margin: f64,
}

/// `v = x + beta * z` for `z` in the unit hyperbox.
pub fn realize(decision: &Decision, z: &[f64]) -> Result<Vec<f64>> {
    check_len("z", decision.n(), z.len())?;
    if let Some((index, &value)) = z.iter().enumerate().find(|(_, v)| !(v.abs() <= 1.0)) {
        return Err(FlexError::SampleOutOfBox { index, value });
    }
    Ok(realize_unchecked(decision, z))
}

pub(crate) fn realize_unchecked(decision: &Decision, z: &[f64]) -> Vec<f64> {
    decision
        .x
        .iter()
        .zip(&decision.beta)
        .zip(z)
        .map(|((x, b), z)| x + b * z)
        .collect()
}

/// Worst case of `d.(x + beta*z) - e` over `z` in `[-1, 1]^n`.
pub fn worst_case_affine_margin(d_row: &[f64], e: f64, decision: &Decision) -> Result<f64> {
    check_len("row of D", decision.n(), d_row.len())?;
    let spread: f64 = d_row.iter().zip(&decision.beta).map(|(d, b)| d.abs() * b).sum();
    Ok(dot(d_row, &decision.x) - e + spread)
}

/// Coordinatewise envelope `s_i = beta_i + |x_i - x_ref_i|`; `||s||^2` is the
/// worst case of `||x + beta*z - x_ref||^2` over the hyperbox.
pub fn worst_case_norm_envelope(decision: &Decision, x_ref: &[f64]) -> Result<Vec<f64>> {
    check_len("x_ref", decision.n(), x_ref.len())?;
    Ok(decision
        .x
        .iter()
        .zip(&decision.beta)
        .zip(x_ref)
        .map(|((x, b), r)| b + (x - r).abs())
        .collect())
}

/// Enumerates all `2^n` vertices of the hyperbox and reports the worst constraint value.
pub fn vertex_feasibility_oracle(
    problem: &FlexProblem,
    decision: &Decision,
    tol: f64,
) -> Result<RobustCertificate> {
    vertex_feasibility_oracle_capped(problem, decision, tol, VERTEX_ORACLE_CAP)
}

pub fn vertex_feasibility_oracle_capped(
    problem: &FlexProblem,
    decision: &Decision,
    tol: f64,
    cap: usize,
) -> Result<RobustCertificate> {
    let n = problem.n();
    check_len("decision", n, decision.n())?;
    if n > cap {
        return Err(FlexError::OracleCapExceeded { n, cap });
    }
    let mut z = vec![-1.0; n];
    let mut v = vec![0.0; n];
    let mut values = Vec::with_capacity(problem.m());
    let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
    for mask in 0..(1usize << n) {
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
        }
        for i in 0..n {
            v[i] = decision.x[i] + decision.beta[i] * z[i];
        }
        problem.constraints_into(&v, &mut values);
        for (j, h) in values.iter().enumerate() {
            if *h > best.0 {
                best = (*h, mask, j);
            }
        }
    }
    let (worst_margin, mask, worst_constraint) = best;
    Ok(RobustCertificate {
        feasible: worst_margin <= tol,
        worst_vertex: (0..n).map(|i| if mask >> i & 1 == 1 { 1 } else { -1 }).collect(),
        worst_constraint,
        worst_margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_user() -> FlexProblem {
        FlexProblem::new(
            0.001,
            0.01,
            vec![1.0, 1.0],
            vec![20.0, 20.0],
            4.0,
            vec![vec![1.0, -1.0]],
            vec![1.0],
        )
        .unwrap()
    }

    #[test]
    fn realize_examples() {
        let d = Decision::new(vec![19.0, 18.0], vec![1.0, 0.5]).unwrap();
        assert_eq!(realize(&d, &[0.0, 0.0]).unwrap(), vec![19.0, 18.0]);
        assert_eq!(realize(&d, &[1.0, -1.0]).unwrap(), vec![20.0, 17.5]);
        let flat = Decision::new(vec![3.0, -2.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(realize(&flat, &[0.7, -0.3]).unwrap(), vec![3.0, -2.0]);
    }

    #[test]
    fn realize_rejects_bad_inputs() {
        let d = Decision::new(vec![19.0, 18.0], vec![1.0, 0.5]).unwrap();
        assert!(matches!(realize(&d, &[0.0]), Err(FlexError::DimensionMismatch { .. })));
        assert!(matches!(
            realize(&d, &[0.0, 1.5]),
            Err(FlexError::SampleOutOfBox { index: 1, .. })
        ));
    }

    #[test]
    fn objective_examples() {
        let p = FlexProblem::new(0.001, 0.01, vec![1.0], vec![20.0], 4.0, vec![], vec![]).unwrap();
        assert_eq!(p.objective(&Decision::zeros(1)).unwrap(), 0.0);
        let d = Decision::new(vec![20.0], vec![2.0]).unwrap();
        assert!((p.objective(&d).unwrap() - (-1.78)).abs() < 1e-12);

        let q = two_user();
        let heavy = FlexProblem::new(0.001, 0.01, vec![2.0, 2.0], vec![20.0, 20.0], 4.0, vec![], vec![])
            .unwrap();
        let flat = Decision::new(vec![19.0, 21.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(q.objective(&flat).unwrap(), heavy.objective(&flat).unwrap());
    }

    #[test]
    fn constraint_examples() {
        let p = two_user();
        let at_ref = p.eval_constraints(&[20.0, 20.0]).unwrap();
        assert_eq!(at_ref.values[0], -4.0);
        let c = p.eval_constraints(&[21.0, 20.0]).unwrap();
        assert_eq!(c.values, vec![-3.0, 0.0]);
        let bad = p.eval_constraints(&[22.0, 20.0]).unwrap();
        assert!(bad.values[1] > 0.0);
    }

    #[test]
    fn affine_margin_examples() {
        let d = Decision::new(vec![19.0, 18.5], vec![0.5, 0.5]).unwrap();
        let m = worst_case_affine_margin(&[1.0, -1.0], 1.0, &d).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
        let flat = Decision::new(vec![19.0, 18.5], vec![0.0, 0.0]).unwrap();
        assert_eq!(worst_case_affine_margin(&[1.0, -1.0], 1.0, &flat).unwrap(), 19.0 - 18.5 - 1.0);
        assert_eq!(worst_case_affine_margin(&[0.0, 0.0], 1.0, &d).unwrap(), -1.0);
    }

    #[test]
    fn norm_envelope_examples() {
        let d = Decision::new(vec![20.0], vec![0.0]).unwrap();
        assert_eq!(worst_case_norm_envelope(&d, &[20.0]).unwrap(), vec![0.0]);
        let d = Decision::new(vec![21.0], vec![0.5]).unwrap();
        let s = worst_case_norm_envelope(&d, &[20.0]).unwrap();
        assert_eq!(s, vec![1.5]);
        assert_eq!(s[0] * s[0], 2.25);
        let d = Decision::new(vec![21.0, 18.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(worst_case_norm_envelope(&d, &[20.0, 20.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn oracle_examples() {
        let p = two_user();
        let point = Decision::new(vec![20.0, 20.0], vec![0.0, 0.0]).unwrap();
        let cert = vertex_feasibility_oracle(&p, &point, ORACLE_TOL).unwrap();
        assert!(cert.feasible && cert.worst_margin < 0.0);

        let wide = FlexProblem::new(0.001, 0.01, vec![1.0, 1.0], vec![20.0, 20.0], 100.0, vec![vec![1.0, -1.0]], vec![1.0])
            .unwrap();
        let d = Decision::new(vec![19.0, 18.5], vec![0.5, 0.5]).unwrap();
        let cert = vertex_feasibility_oracle(&wide, &d, ORACLE_TOL).unwrap();
        assert!((cert.worst_margin - 0.5).abs() < 1e-12);
        assert_eq!(cert.worst_vertex, vec![1, -1]);
        assert_eq!(cert.worst_constraint, 1);
        assert!(!cert.feasible);
    }

    #[test]
    fn oracle_refuses_above_cap() {
        let p = FlexProblem::new(1.0, 1.0, vec![1.0; 5], vec![0.0; 5], 1.0, vec![], vec![]).unwrap();
        let err = vertex_feasibility_oracle_capped(&p, &Decision::zeros(5), 0.0, 4).unwrap_err();
        assert!(err.to_string().contains("cap of 4"));
    }

    #[test]
    fn rejects_invalid_problems() {
        assert!(FlexProblem::new(0.0, 0.01, vec![1.0], vec![20.0], 4.0, vec![], vec![]).is_err());
        assert!(FlexProblem::new(0.1, 0.01, vec![-1.0], vec![20.0], 4.0, vec![], vec![]).is_err());
        assert!(FlexProblem::new(0.1, 0.01, vec![1.0], vec![20.0], 0.0, vec![], vec![]).is_err());
        assert!(FlexProblem::new(0.1, 0.01, vec![1.0, 1.0], vec![20.0], 4.0, vec![], vec![]).is_err());
        assert!(Decision::new(vec![1.0], vec![-0.1]).is_err());
    }

    #[test]
    fn corridor_shapes() {
        let (d, e) = corridor(7, 1.0, false);
        assert_eq!(d.len(), 6);
        assert_eq!(e, vec![1.0; 6]);
        assert_eq!(d[2][2], 1.0);
        assert_eq!(d[2][3], -1.0);
        let (d2, _) = corridor(7, 1.0, true);
        assert_eq!(d2.len(), 12);
    }
}
