//! Trace CSV files and the solution report (fixed-precision table plus a
//! full-precision JSON block).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{FlexError, Result};
use crate::harness::{ExperimentReport, SolutionRow};
use crate::saddle::IterateTrace;

/// Line separating the human table from the machine-readable block.
pub const MACHINE_MARKER: &str = "--- machine-readable ---";

const HEADER: &str = "iter,dist_to_ref,objective,cv_estimate";
const AGGREGATE_HEADER: &str = ",dist_mean,dist_sd";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub dist_to_ref: Option<f64>,
    pub objective: f64,
    pub cv_estimate: Option<f64>,
    pub dist_mean: Option<f64>,
    pub dist_sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceTable {
    /// Aggregated tables carry the `dist_mean` and `dist_sd` columns.
    pub aggregated: bool,
    pub rows: Vec<TraceRow>,
}

impl TraceTable {
    pub fn from_trace(trace: &IterateTrace) -> Self {
        let rows = trace
            .records
            .iter()
            .map(|r| TraceRow {
                iter: r.k,
                dist_to_ref: r.dist_to_ref,
                objective: r.objective,
                cv_estimate: r.cv_estimate,
                dist_mean: None,
                dist_sd: None,
            })
            .collect();
        TraceTable { aggregated: false, rows }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(HEADER);
        if self.aggregated {
            out.push_str(AGGREGATE_HEADER);
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{}", r.iter, cell(r.dist_to_ref), r.objective, cell(r.cv_estimate));
            if self.aggregated {
                let _ = write!(out, ",{},{}", cell(r.dist_mean), cell(r.dist_sd));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| FlexError::Scenario("empty trace file".into()))?;
        let aggregated = if header == HEADER {
            false
        } else if header == format!("{HEADER}{AGGREGATE_HEADER}") {
            true
        } else {
            return Err(FlexError::Scenario(format!("unexpected trace header `{header}`")));
        };
        let bad = |line: &str| FlexError::Scenario(format!("malformed trace row `{line}`"));
        let mut rows = Vec::new();
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != if aggregated { 6 } else { 4 } {
                return Err(bad(line));
            }
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(line))
                }
            };
            rows.push(TraceRow {
                iter: cells[0].parse().map_err(|_| bad(line))?,
                dist_to_ref: opt(cells[1])?,
                objective: cells[2].parse().map_err(|_| bad(line))?,
                cv_estimate: opt(cells[3])?,
                dist_mean: if aggregated { opt(cells[4])? } else { None },
                dist_sd: if aggregated { opt(cells[5])? } else { None },
            });
        }
        Ok(TraceTable { aggregated, rows })
    }
}

pub fn write_trace_csv(table: &TraceTable, path: &Path) -> Result<()> {
    std::fs::write(path, table.to_csv_string())?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<TraceTable> {
    TraceTable::parse_csv(&std::fs::read_to_string(path)?)
}

/// One decimal without a negative zero.
fn one_decimal(v: f64) -> String {
    let s = format!("{v:.1}");
    if s == "-0.0" {
        "0.0".into()
    } else {
        s
    }
}

fn vector(values: &[f64]) -> String {
    let cells: Vec<String> = values.iter().map(|v| one_decimal(*v)).collect();
    format!("[{}]", cells.join(", "))
}

fn table_row(row: &SolutionRow) -> String {
    let cv = row.cv.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    let verdict = match row.robust_feasible {
        Some(true) => "yes",
        Some(false) => "no",
        None => "-",
    };
    format!(
        "{:<24} x = {}\n{:<24} beta = {}\n{:<24} <CV(z)> = {cv}  objective = {:.4}  robust-feasible = {verdict}\n",
        row.algorithm,
        vector(&row.x),
        "",
        vector(&row.beta),
        "",
        row.objective
    )
}

pub fn render_solution_report(report: &ExperimentReport) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "scenario: {}", report.scenario);
    let _ = writeln!(out, "command: {}", report.command);
    out.push('\n');
    for row in &report.rows {
        out.push_str(&table_row(row));
        out.push('\n');
    }
    if let Some(r) = &report.reference {
        let _ = writeln!(
            out,
            "reference: {} iterations at eta = {}, final step {:.3e}",
            r.iterations, r.eta, r.final_step
        );
    }
    if let Some(b) = &report.bounds {
        let c = &b.constants;
        let _ = writeln!(out, "mu = {:.4e}  L = {:.4e}  eps = {:.4e}  sigma = {:.4e}  B = {:.4e}", c.mu, c.lipschitz, c.eps, c.sigma, c.misspecification);
        let eta_max = c.eta_max.map_or_else(|| "empty range".to_string(), |v| format!("{v:.4e}"));
        let _ = writeln!(out, "eta_max = {eta_max}");
        let ball = |v: Option<f64>| v.map_or_else(|| "invalid (rho >= 1)".to_string(), |v| format!("{v:.4e}"));
        let _ = writeln!(
            out,
            "eta = {}  rho = {:.6e}  stochastic ball = {}  model ball = {}",
            b.bounds.eta,
            b.bounds.rho,
            ball(b.bounds.ball_stochastic),
            ball(b.bounds.ball_model)
        );
    }
    if let Some(c) = &report.check {
        let _ = writeln!(
            out,
            "check: {} (worst margin {:.3e} at constraint {})",
            if c.feasible { "feasible" } else { "INFEASIBLE" },
            c.worst_margin,
            c.worst_constraint
        );
    }
    for t in &report.traces {
        let _ = writeln!(out, "trace: {t}");
    }
    out.push('\n');
    out.push_str(MACHINE_MARKER);
    out.push('\n');
    out.push_str(&serde_json::to_string_pretty(report).map_err(|e| FlexError::Scenario(e.to_string()))?);
    out.push('\n');
    Ok(out)
}

/// Recovers the report from its machine-readable block.
pub fn parse_solution_report(text: &str) -> Result<ExperimentReport> {
    let (_, block) = text
        .split_once(&format!("{MACHINE_MARKER}\n"))
        .ok_or_else(|| FlexError::Scenario("report has no machine-readable block".into()))?;
    serde_json::from_str(block).map_err(|e| FlexError::Scenario(e.to_string()))
}

pub fn write_solution_report(report: &ExperimentReport, path: &Path) -> Result<()> {
    std::fs::write(path, render_solution_report(report)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> ExperimentReport {
        ExperimentReport {
            scenario: "s".into(),
            command: "robust".into(),
            rows: vec![SolutionRow {
                algorithm: "robust".into(),
                x: vec![19.4, 20.04999, -0.01],
                beta: vec![1.0, 0.0, 0.5],
                lambda: None,
                objective: -1.0 / 3.0,
                cv: Some(0.0234567),
                robust_feasible: Some(true),
            }],
            reference: None,
            bounds: None,
            check: None,
            traces: vec![],
        }
    }

    #[test]
    fn report_formatting_and_round_trip() {
        let r = report();
        let text = render_solution_report(&r).unwrap();
        assert!(text.contains("x = [19.4, 20.0, 0.0]"));
        assert!(text.contains("beta = [1.0, 0.0, 0.5]"));
        assert!(text.contains("<CV(z)> = 0.023"));
        assert_eq!(parse_solution_report(&text).unwrap(), r);
    }

    #[test]
    fn csv_shapes() {
        let empty = TraceTable::default();
        assert_eq!(empty.to_csv_string(), format!("{HEADER}\n"));
        let row = |k: usize| TraceRow {
            iter: k,
            dist_to_ref: Some(1.0 / (k as f64 + 3.0)),
            objective: -0.123_456_789_012_345_68 * k as f64,
            cv_estimate: None,
            dist_mean: None,
            dist_sd: None,
        };
        let table = TraceTable {
            aggregated: false,
            rows: (0..=10).map(row).collect(),
        };
        let text = table.to_csv_string();
        assert_eq!(text.lines().count(), 12);
        assert_eq!(TraceTable::parse_csv(&text).unwrap(), table);
        assert!(text.lines().skip(1).all(|l| !l.contains('e')), "no exponent notation expected in {text}");
    }
}
