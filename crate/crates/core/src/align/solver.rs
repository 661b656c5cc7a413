use std::fmt;

use nalgebra::{Cholesky, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use super::energy::{apply_increment, energy, linearize, EnergyBreakdown, Problem, Row};
use crate::warpfield::{WarpError, WarpField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_outer: usize,
    /// Gauss-Seidel sweeps per outer iteration.
    pub sweeps: usize,
    pub rel_tol: f64,
    /// Relative Levenberg-Marquardt damping for blocks that fail to factor.
    pub lambda: f64,
    pub max_backtracks: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_outer: 8,
            sweeps: 4,
            rel_tol: 1e-5,
            lambda: 1e-6,
            max_backtracks: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    MaxIterations,
    NoDataTerms,
    /// No step size reduced the energy.
    NoDescent,
    Failed,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Converged => "converged",
            Self::MaxIterations => "max iterations",
            Self::NoDataTerms => "no data terms",
            Self::NoDescent => "no descent",
            Self::Failed => "failed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    /// Accepted outer iterations.
    pub iterations: usize,
    /// Energy at the start and after every accepted iteration.
    pub energies: Vec<EnergyBreakdown>,
    pub termination: Termination,
    pub error: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("6x6 block of node {0} is singular even after damping")]
    SingularBlock(usize),
    #[error(transparent)]
    Warp(#[from] WarpError),
}

/// Block-sparse `J^T J` and `-J^T r` over nodes.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    pub diag: Vec<Matrix6<f64>>,
    /// Off-diagonal blocks of each block row, sorted by column node.
    pub off: Vec<Vec<(usize, Matrix6<f64>)>>,
    pub rhs: Vec<Vector6<f64>>,
}

impl NormalEquations {
    pub fn assemble(rows: &[Row], nodes: usize) -> Self {
        let mut diag = vec![Matrix6::zeros(); nodes];
        let mut off: Vec<Vec<(usize, Matrix6<f64>)>> = vec![Vec::new(); nodes];
        let mut rhs = vec![Vector6::zeros(); nodes];
        for row in rows {
            for (a, ja) in &row.blocks {
                rhs[*a] -= ja * row.residual;
                for (b, jb) in &row.blocks {
                    let block = ja * jb.transpose();
                    if a == b {
                        diag[*a] += block;
                        continue;
                    }
                    match off[*a].iter_mut().find(|(c, _)| c == b) {
                        Some((_, m)) => *m += block,
                        None => off[*a].push((*b, block)),
                    }
                }
            }
        }
        for r in &mut off {
            r.sort_by_key(|(c, _)| *c);
        }
        Self { diag, off, rhs }
    }

    /// Cholesky factor of each diagonal block; blocks that fail are damped
    /// by `lambda` relative to their mean diagonal, growing tenfold per retry.
    fn factor(&self, lambda: f64) -> Result<Vec<Cholesky<f64, nalgebra::U6>>, SolveError> {
        self.diag
            .iter()
            .enumerate()
            .map(|(i, d)| {
                if let Some(c) = Cholesky::new(*d) {
                    return Ok(c);
                }
                let scale = (d.trace() / 6.0).max(f64::MIN_POSITIVE);
                let mut damp = lambda.max(f64::EPSILON) * scale;
                for _ in 0..8 {
                    if let Some(c) = Cholesky::new(d + Matrix6::identity() * damp) {
                        return Ok(c);
                    }
                    damp *= 10.0;
                }
                Err(SolveError::SingularBlock(i))
            })
            .collect()
    }

    /// Block Gauss-Seidel from zero, nodes in index order.
    pub fn gauss_seidel(
        &self,
        sweeps: usize,
        lambda: f64,
    ) -> Result<Vec<Vector6<f64>>, SolveError> {
        let chol = self.factor(lambda)?;
        let mut x = vec![Vector6::zeros(); self.diag.len()];
        for _ in 0..sweeps.max(1) {
            for i in 0..x.len() {
                let mut b = self.rhs[i];
                for (j, m) in &self.off[i] {
                    b -= m * x[*j];
                }
                x[i] = chol[i].solve(&b);
            }
        }
        if x.iter().any(|v| !v.iter().all(|e| e.is_finite())) {
            return Err(SolveError::SingularBlock(
                x.iter()
                    .position(|v| !v.iter().all(|e| e.is_finite()))
                    .unwrap_or(0),
            ));
        }
        Ok(x)
    }
}

/// Gauss-Newton over per-node transforms starting from `init`. On failure
/// the returned warp is `init` and the report carries the error.
pub fn solve(
    problem: &Problem,
    init: &WarpField,
    opts: &SolverOptions,
) -> (WarpField, SolverReport) {
    let mut report = SolverReport {
        iterations: 0,
        energies: Vec::new(),
        termination: Termination::MaxIterations,
        error: None,
    };
    let fail = |mut report: SolverReport, e: SolveError| {
        report.termination = Termination::Failed;
        report.error = Some(e.to_string());
        (init.clone(), report)
    };
    let mut current = match energy(problem, init) {
        Ok(e) => e,
        Err(e) => return fail(report, e.into()),
    };
    report.energies.push(current);
    if problem.correspondences.is_empty() {
        report.termination = Termination::NoDataTerms;
        return (init.clone(), report);
    }

    let nodes = init.len();
    let mut warp = init.clone();
    for _ in 0..opts.max_outer {
        let rows = match linearize(problem, &warp) {
            Ok(r) => r,
            Err(e) => return fail(report, e.into()),
        };
        let system = NormalEquations::assemble(&rows, nodes);
        let delta = match system.gauss_seidel(opts.sweeps, opts.lambda) {
            Ok(d) => d,
            Err(e) => return fail(report, e),
        };

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let scaled: Vec<Vector6<f64>> = delta.iter().map(|d| d * step).collect();
            let candidate = apply_increment(problem.graph, &warp, &scaled);
            if let Ok(e) = energy(problem, &candidate) {
                if e.total <= current.total {
                    accepted = Some((candidate, e));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((candidate, e)) = accepted else {
            report.termination = Termination::NoDescent;
            break;
        };
        let decrease = (current.total - e.total) / current.total.max(f64::MIN_POSITIVE);
        warp = candidate;
        current = e;
        report.iterations += 1;
        report.energies.push(e);
        if decrease < opts.rel_tol {
            report.termination = Termination::Converged;
            break;
        }
    }
    (warp, report)
}
