//! Thin deterministic wrapper around the interior-point conic solver used
//! for the coupled agent subproblems and the direct planner benchmark.
//!
//! Problems are assembled in canonical row/column order so repeated solves
//! of the same data are bit-identical.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT,
    SolverStatus, SupportedConeT, ZeroConeT,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConvexError {
    #[error("conic solve failed with status {0}")]
    Status(String),
    #[error("invalid problem assembly: {0}")]
    BadProblem(String),
}

#[derive(Debug, Clone, Copy)]
pub enum Cone {
    Zero(usize),
    Nonneg(usize),
    Soc(usize),
}

/// Incremental builder for `minimize (1/2) x'Px + q'x  s.t.  Ax + s = b`
/// with `P` diagonal and `s` in a product of cones.
pub struct QpBuilder {
    n: usize,
    p_diag: Vec<f64>,
    q: Vec<f64>,
    entries: Vec<(usize, usize, f64)>, // (row, col, value)
    b: Vec<f64>,
    cones: Vec<Cone>,
    rows: usize,
}

pub struct QpSolution {
    pub x: Vec<f64>,
    /// Dual variables per constraint row (sign convention: stationarity is
    /// Px + q + A'z = 0, with z >= 0 on nonnegative-cone rows).
    pub z: Vec<f64>,
    pub objective: f64,
}

impl QpBuilder {
    pub fn new(n_vars: usize) -> Self {
        QpBuilder {
            n: n_vars,
            p_diag: vec![0.0; n_vars],
            q: vec![0.0; n_vars],
            entries: Vec::new(),
            b: Vec::new(),
            cones: Vec::new(),
            rows: 0,
        }
    }

    pub fn quadratic(&mut self, var: usize, coeff: f64) {
        self.p_diag[var] += coeff;
    }

    pub fn linear(&mut self, var: usize, coeff: f64) {
        self.q[var] += coeff;
    }

    /// Appends one row `sum coeffs . x (cone) rhs`; rows must be pushed in
    /// cone-segment order, closed off by `cone`.
    pub fn row(&mut self, coeffs: &[(usize, f64)], rhs: f64) -> usize {
        let r = self.rows;
        for &(col, val) in coeffs {
            debug_assert!(col < self.n);
            if val != 0.0 {
                self.entries.push((r, col, val));
            }
        }
        self.b.push(rhs);
        self.rows += 1;
        r
    }

    /// Declares that the previous `len` rows form one cone segment.
    pub fn cone(&mut self, cone: Cone) {
        self.cones.push(cone);
    }

    pub fn solve(mut self) -> Result<QpSolution, ConvexError> {
        let declared: usize = self
            .cones
            .iter()
            .map(|c| match c {
                Cone::Zero(n) | Cone::Nonneg(n) | Cone::Soc(n) => *n,
            })
            .sum();
        if declared != self.rows {
            return Err(ConvexError::BadProblem(format!(
                "{} rows pushed but cones cover {}",
                self.rows, declared
            )));
        }

        // CSC assembly, column-major with rows ascending.
        self.entries
            .sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
        let mut colptr = vec![0usize; self.n + 1];
        let mut rowval = Vec::with_capacity(self.entries.len());
        let mut nzval = Vec::with_capacity(self.entries.len());
        for &(r, c, v) in &self.entries {
            colptr[c + 1] += 1;
            rowval.push(r);
            nzval.push(v);
        }
        for c in 0..self.n {
            colptr[c + 1] += colptr[c];
        }
        let a = CscMatrix::new(self.rows, self.n, colptr, rowval, nzval);

        let mut p_colptr = vec![0usize; self.n + 1];
        let mut p_rowval = Vec::new();
        let mut p_nzval = Vec::new();
        for i in 0..self.n {
            if self.p_diag[i] != 0.0 {
                p_rowval.push(i);
                p_nzval.push(self.p_diag[i]);
                p_colptr[i + 1] = 1;
            }
        }
        for i in 0..self.n {
            p_colptr[i + 1] += p_colptr[i];
        }
        let p = CscMatrix::new(self.n, self.n, p_colptr, p_rowval, p_nzval);

        let cones: Vec<SupportedConeT<f64>> = self
            .cones
            .iter()
            .map(|c| match c {
                Cone::Zero(n) => ZeroConeT(*n),
                Cone::Nonneg(n) => NonnegativeConeT(*n),
                Cone::Soc(n) => SecondOrderConeT(*n),
            })
            .collect();

        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(1e-10)
            .tol_gap_rel(1e-10)
            .tol_feas(1e-9)
            .max_iter(200)
            .build()
            .map_err(|e| ConvexError::BadProblem(e.to_string()))?;
        let mut solver = DefaultSolver::new(&p, &self.q, &a, &self.b, &cones, settings)
            .map_err(|e| ConvexError::BadProblem(e.to_string()))?;
        solver.solve();
        match solver.solution.status {
            SolverStatus::Solved
            | SolverStatus::AlmostSolved
            | SolverStatus::InsufficientProgress => Ok(QpSolution {
                x: solver.solution.x.clone(),
                z: solver.solution.z.clone(),
                objective: solver.solution.obj_val,
            }),
            other => Err(ConvexError::Status(format!("{other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_qp_solves_with_correct_duals() {
        // min x1^2 + x2 s.t. x1 + x2 = 1, x >= 0  ->  x = (1/2, 1/2).
        let mut qp = QpBuilder::new(2);
        qp.quadratic(0, 2.0);
        qp.linear(1, 1.0);
        qp.row(&[(0, 1.0), (1, 1.0)], 1.0);
        qp.cone(Cone::Zero(1));
        qp.row(&[(0, -1.0)], 0.0);
        qp.row(&[(1, -1.0)], 0.0);
        qp.cone(Cone::Nonneg(2));
        let sol = qp.solve().unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-7);
        assert!((sol.x[1] - 0.5).abs() < 1e-7);
        assert!((sol.objective - 0.75).abs() < 1e-7);
        // Stationarity with the equality multiplier: 2 x1 + z = 0 -> z = -1.
        assert!((sol.z[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn mismatched_cone_rows_are_rejected() {
        let mut qp = QpBuilder::new(1);
        qp.row(&[(0, 1.0)], 1.0);
        assert!(matches!(qp.solve(), Err(ConvexError::BadProblem(_))));
    }
}
