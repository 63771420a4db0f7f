//! Small dense convex QP solver.
//!
//! Solves
//!
//! ```text
//!     minimize     1/2 x' Q x + c' x
//!     subject to   a_j' x >= b_j      (inequality rows)
//!                  lb <= x <= ub      (optional box bounds)
//! ```
//!
//! using the Goldfarb-Idnani dual active-set method. The dual method starts
//! from the unconstrained minimizer and adds violated constraints one at a
//! time, which gives a clean infeasibility certificate: if a violated
//! constraint cannot be added at any dual step length, no feasible point
//! exists. Iteration order is fixed (most violated row, smallest index on
//! ties), so identical problems produce bitwise-identical results.

// index-based loops mirror the matrix algebra and keep row/column roles clear
#![allow(clippy::needless_range_loop)]

use crate::error::Error;

/// One linear inequality `coeffs . x >= rhs`.
#[derive(Debug, Clone)]
pub struct QpRow {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
    /// Provenance tag for debugging and QP dumps.
    pub tag: String,
}

impl QpRow {
    pub fn new(coeffs: Vec<f64>, rhs: f64, tag: impl Into<String>) -> Self {
        Self { coeffs, rhs, tag: tag.into() }
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    n: usize,
    /// Symmetrized quadratic cost, row-major n x n.
    q: Vec<f64>,
    c: Vec<f64>,
    rows: Vec<QpRow>,
    lb: Option<Vec<f64>>,
    ub: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: QpStatus,
    /// For Infeasible: the row (by internal index, box rows appended after
    /// user rows) that could not be satisfied together with the active set.
    pub infeasible_evidence: Option<Vec<usize>>,
    /// Max inequality violation at the returned point.
    pub max_violation: f64,
    /// KKT stationarity residual (inf norm) at the returned point.
    pub stationarity: f64,
}

const FEAS_TOL: f64 = 1e-8;
const KKT_TOL: f64 = 1e-6;

impl QpProblem {
    /// `q` is row-major n x n; it is symmetrized on construction.
    pub fn new(n: usize, q: Vec<f64>, c: Vec<f64>) -> Result<Self, Error> {
        if q.len() != n * n || c.len() != n {
            return Err(Error::Argument(format!(
                "dimension mismatch: n={n}, |q|={}, |c|={}",
                q.len(),
                c.len()
            )));
        }
        let mut qs = q.clone();
        for i in 0..n {
            for j in 0..n {
                qs[i * n + j] = 0.5 * (q[i * n + j] + q[j * n + i]);
            }
        }
        Ok(Self { n, q: qs, c, rows: Vec::new(), lb: None, ub: None })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn add_row(&mut self, row: QpRow) -> Result<(), Error> {
        if row.coeffs.len() != self.n {
            return Err(Error::Argument(format!(
                "row '{}' has {} coefficients, expected {}",
                row.tag,
                row.coeffs.len(),
                self.n
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn set_box(&mut self, lb: Vec<f64>, ub: Vec<f64>) -> Result<(), Error> {
        if lb.len() != self.n || ub.len() != self.n {
            return Err(Error::Argument("box bound dimension mismatch".into()));
        }
        self.lb = Some(lb);
        self.ub = Some(ub);
        Ok(())
    }

    pub fn rows(&self) -> &[QpRow] {
        &self.rows
    }

    /// All inequality rows including box bounds expanded to rows.
    fn all_rows(&self) -> Vec<QpRow> {
        let mut out = self.rows.clone();
        if let Some(lb) = &self.lb {
            for (i, &b) in lb.iter().enumerate() {
                let mut coeffs = vec![0.0; self.n];
                coeffs[i] = 1.0;
                out.push(QpRow::new(coeffs, b, format!("lb[{i}]")));
            }
        }
        if let Some(ub) = &self.ub {
            for (i, &b) in ub.iter().enumerate() {
                let mut coeffs = vec![0.0; self.n];
                coeffs[i] = -1.0;
                out.push(QpRow::new(coeffs, -b, format!("ub[{i}]")));
            }
        }
        out
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        let n = self.n;
        let mut quad = 0.0;
        for i in 0..n {
            let mut qi = 0.0;
            for j in 0..n {
                qi += self.q[i * n + j] * x[j];
            }
            quad += x[i] * qi;
        }
        0.5 * quad + dot(&self.c, x)
    }

    /// Structured text dump for offline cross-checking with external solvers.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        writeln!(s, "n {}", self.n).unwrap();
        writeln!(s, "q {}", join(&self.q)).unwrap();
        writeln!(s, "c {}", join(&self.c)).unwrap();
        for r in &self.rows {
            writeln!(s, "row {} >= {} # {}", join(&r.coeffs), r.rhs, r.tag).unwrap();
        }
        if let (Some(lb), Some(ub)) = (&self.lb, &self.ub) {
            writeln!(s, "lb {}", join(lb)).unwrap();
            writeln!(s, "ub {}", join(ub)).unwrap();
        }
        s
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(" ")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve the QP. Returns Optimal with certified residuals, Infeasible with
/// the incompatible constraint subset, or MaxIter.
pub fn solve(problem: &QpProblem) -> Result<QpSolution, Error> {
    let n = problem.n;
    let rows = problem.all_rows();
    let m = rows.len();

    // Cholesky of Q, with escalating jitter for semidefinite inputs.
    let mut jitter = 0.0;
    let chol = loop {
        let mut q = problem.q.clone();
        if jitter > 0.0 {
            for i in 0..n {
                q[i * n + i] += jitter;
            }
        }
        match cholesky(&q, n) {
            Some(l) => break l,
            None => {
                jitter = if jitter == 0.0 { 1e-10 } else { jitter * 100.0 };
                if jitter > 1e-4 {
                    return Err(Error::Argument("cost matrix is not PSD".into()));
                }
            }
        }
    };

    // Unconstrained minimizer x = -Q^{-1} c.
    let mut x: Vec<f64> = problem.c.iter().map(|v| -v).collect();
    chol_solve(&chol, n, &mut x);

    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();

    let slack = |x: &[f64], j: usize| dot(&rows[j].coeffs, x) - rows[j].rhs;

    let max_iter = 50 * (m + 1);
    let mut iter = 0;
    let mut status = QpStatus::Optimal;
    let mut evidence = None;

    'outer: loop {
        iter += 1;
        if iter > max_iter {
            status = QpStatus::MaxIter;
            break;
        }
        // Most violated constraint, smallest index on ties.
        let mut p = None;
        let mut worst = -1e-10;
        for j in 0..m {
            if active.contains(&j) {
                continue;
            }
            let s = slack(&x, j);
            if s < worst {
                worst = s;
                p = Some(j);
            }
        }
        let p = match p {
            Some(p) => p,
            None => break, // all satisfied
        };
        let mut u_p = 0.0;

        loop {
            iter += 1;
            if iter > max_iter {
                status = QpStatus::MaxIter;
                break 'outer;
            }
            // Step directions for adding constraint p against active set N:
            //   z = H c_p   (primal), r = (N' Q^{-1} N)^{-1} N' Q^{-1} c_p (dual)
            let k = active.len();
            let mut qinv_cp = rows[p].coeffs.clone();
            chol_solve(&chol, n, &mut qinv_cp);

            let (z, r) = if k == 0 {
                (qinv_cp.clone(), Vec::new())
            } else {
                // M = N' Q^{-1} N, rhs = N' Q^{-1} c_p
                let mut qinv_n: Vec<Vec<f64>> = Vec::with_capacity(k);
                for &j in &active {
                    let mut col = rows[j].coeffs.clone();
                    chol_solve(&chol, n, &mut col);
                    qinv_n.push(col);
                }
                let mut mmat = vec![0.0; k * k];
                let mut rhs = vec![0.0; k];
                for a in 0..k {
                    for b in 0..k {
                        mmat[a * k + b] = dot(&rows[active[a]].coeffs, &qinv_n[b]);
                    }
                    rhs[a] = dot(&rows[active[a]].coeffs, &qinv_cp);
                }
                let r = match solve_dense(&mmat, &rhs, k) {
                    Some(r) => r,
                    None => {
                        // Degenerate active set; treat as stalled.
                        status = QpStatus::MaxIter;
                        break 'outer;
                    }
                };
                let mut z = qinv_cp.clone();
                for a in 0..k {
                    for i in 0..n {
                        z[i] -= r[a] * qinv_n[a][i];
                    }
                }
                (z, r)
            };

            let ztc = dot(&z, &rows[p].coeffs);
            let z_zero = ztc <= 1e-12;

            // Dual step limit from active multipliers.
            let mut t1 = f64::INFINITY;
            let mut drop_idx = None;
            for (a, &ra) in r.iter().enumerate() {
                if ra > 1e-12 {
                    let ratio = mult[a] / ra;
                    if ratio < t1 {
                        t1 = ratio;
                        drop_idx = Some(a);
                    }
                }
            }

            if z_zero && t1.is_infinite() {
                // Constraint p is incompatible with the active set: infeasible.
                status = QpStatus::Infeasible;
                let mut ev = active.clone();
                ev.push(p);
                evidence = Some(ev);
                break 'outer;
            }

            // Full primal step to satisfy constraint p.
            let s_p = slack(&x, p);
            let t2 = if z_zero { f64::INFINITY } else { -s_p / ztc };

            let t = t1.min(t2);
            if !z_zero {
                for i in 0..n {
                    x[i] += t * z[i];
                }
            }
            for (a, &ra) in r.iter().enumerate() {
                mult[a] -= t * ra;
            }
            u_p += t;

            if t2 <= t1 {
                // Constraint p becomes active.
                active.push(p);
                mult.push(u_p);
                break;
            }
            // Drop the blocking constraint and retry p.
            let a = drop_idx.unwrap();
            active.remove(a);
            mult.remove(a);
        }
    }

    // Certify the returned point.
    let mut max_violation: f64 = 0.0;
    for j in 0..m {
        max_violation = max_violation.max(rows[j].rhs - dot(&rows[j].coeffs, &x));
    }
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let mut g = problem.c[i];
        for j in 0..n {
            g += problem.q[i * n + j] * x[j];
        }
        grad[i] = g;
    }
    for (a, &j) in active.iter().enumerate() {
        for i in 0..n {
            grad[i] -= mult[a] * rows[j].coeffs[i];
        }
    }
    let stationarity = grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));

    if status == QpStatus::Optimal && (max_violation > FEAS_TOL || stationarity > KKT_TOL) {
        status = QpStatus::MaxIter;
    }

    Ok(QpSolution {
        objective: problem.objective_at(&x),
        x,
        status,
        infeasible_evidence: evidence,
        max_violation,
        stationarity,
    })
}

/// Brute-force reference solver used only by tests: enumerates active
/// subsets, solves each equality-constrained KKT system, and keeps the best
/// feasible point with nonnegative multipliers. Independent of the dual
/// active-set iteration above.
pub mod oracle {
    use super::{dot, QpProblem};

    pub fn enumerate(p: &QpProblem) -> Option<(Vec<f64>, f64)> {
        let n = p.n();
        let rows = p.all_rows();
        let m = rows.len();
        assert!(m <= 20, "oracle limited to small row counts");
        let mut best: Option<(Vec<f64>, f64)> = None;
        for mask in 0u32..(1 << m) {
            let subset: Vec<usize> = (0..m).filter(|j| mask & (1 << j) != 0).collect();
            let k = subset.len();
            if k > n {
                continue;
            }
            // KKT: [Q  -A'; A  0] [x; mu] = [-c; b]
            let dim = n + k;
            let mut a = vec![0.0; dim * dim];
            let mut rhs = vec![0.0; dim];
            for i in 0..n {
                for j in 0..n {
                    a[i * dim + j] = p.q[i * n + j];
                }
                for (s, &row) in subset.iter().enumerate() {
                    a[i * dim + n + s] = -rows[row].coeffs[i];
                }
                rhs[i] = -p.c[i];
            }
            for (s, &row) in subset.iter().enumerate() {
                for j in 0..n {
                    a[(n + s) * dim + j] = rows[row].coeffs[j];
                }
                rhs[n + s] = rows[row].rhs;
            }
            let sol = match gauss(&a, &rhs, dim) {
                Some(s) => s,
                None => continue,
            };
            let x = &sol[..n];
            let mu = &sol[n..];
            if mu.iter().any(|&m| m < -1e-9) {
                continue;
            }
            if (0..m).any(|j| dot(&rows[j].coeffs, x) - rows[j].rhs < -1e-9) {
                continue;
            }
            let obj = p.objective_at(x);
            if best.as_ref().is_none_or(|(_, b)| obj < *b) {
                best = Some((x.to_vec(), obj));
            }
        }
        best
    }

    // Plain Gaussian elimination, kept separate from the solver's kernels.
    fn gauss(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = a[i * n..(i + 1) * n].to_vec();
                row.push(b[i]);
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n).max_by(|&r1, &r2| {
                m[r1][col].abs().partial_cmp(&m[r2][col].abs()).unwrap()
            })?;
            if m[piv][col].abs() < 1e-13 {
                return None;
            }
            m.swap(col, piv);
            for r in col + 1..n {
                let f = m[r][col] / m[col][col];
                for c in col..=n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let mut s = m[r][n];
            for c in r + 1..n {
                s -= m[r][c] * x[c];
            }
            x[r] = s / m[r][r];
        }
        Some(x)
    }
}

/// Dense Cholesky, lower triangular row-major. None if not PD.
fn cholesky(q: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = q[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves Q x = b in place given the Cholesky factor of Q.
fn chol_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Gaussian elimination with partial pivoting (first max pivot, deterministic).
fn solve_dense(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut piv = col;
        let mut best = m[perm[col] * n + col].abs();
        for r in col + 1..n {
            let v = m[perm[r] * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-13 {
            return None;
        }
        perm.swap(col, piv);
        let prow = perm[col];
        for r in col + 1..n {
            let row = perm[r];
            let f = m[row * n + col] / m[prow * n + col];
            if f != 0.0 {
                for cc in col..n {
                    m[row * n + cc] -= f * m[prow * n + cc];
                }
                rhs[row] -= f * rhs[prow];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let row = perm[r];
        let mut s = rhs[row];
        for cc in r + 1..n {
            s -= m[row * n + cc] * x[cc];
        }
        x[r] = s / m[row * n + r];
    }
    Some(x)
}
