//! Embedded sparse convex QP solver.
//!
//! Problems have a diagonal positive-semidefinite quadratic cost, sparse
//! equality rows, and sparse one-sided inequality rows:
//!
//! ```text
//! minimize   1/2 x' diag(quad) x + lin' x
//! subject to eq_rows x = eq_rhs
//!            ineq_rows x <= ineq_rhs
//! ```
//!
//! The solver is a Mehrotra predictor-corrector interior-point method. Each
//! iteration factors the condensed KKT matrix
//! `[[diag(quad) + C' W C, E'], [E, 0]]` (W the current barrier weights)
//! with a banded LDL^T factorization; variables and equality rows are
//! interleaved by a last-referenced-column heuristic so receding-horizon
//! problems stay narrow-banded. Deterministic: no randomness, and wall-clock
//! time is only reported, never used for decisions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("cannot parse dump: {0}")]
    ParseError(String),
}

/// Sparse convex QP with diagonal quadratic cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub n: usize,
    /// Diagonal of the quadratic term (coefficients of 1/2 x_i^2), all >= 0.
    pub quad_diag: Vec<f64>,
    pub lin: Vec<f64>,
    pub eq_rows: Vec<Vec<(usize, f64)>>,
    pub eq_rhs: Vec<f64>,
    pub ineq_rows: Vec<Vec<(usize, f64)>>,
    pub ineq_rhs: Vec<f64>,
}

impl QpProblem {
    pub fn new(n: usize) -> Self {
        QpProblem {
            n,
            quad_diag: vec![0.0; n],
            lin: vec![0.0; n],
            eq_rows: Vec::new(),
            eq_rhs: Vec::new(),
            ineq_rows: Vec::new(),
            ineq_rhs: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), QpError> {
        if self.quad_diag.len() != self.n || self.lin.len() != self.n {
            return Err(QpError::InvalidProblem("cost vector lengths differ from n".into()));
        }
        if let Some(q) = self.quad_diag.iter().find(|q| !(**q >= 0.0)) {
            return Err(QpError::InvalidProblem(format!(
                "quadratic diagonal entry {q} is negative or non-finite"
            )));
        }
        if self.eq_rows.len() != self.eq_rhs.len() || self.ineq_rows.len() != self.ineq_rhs.len() {
            return Err(QpError::InvalidProblem("row/rhs count mismatch".into()));
        }
        for rows in [&self.eq_rows, &self.ineq_rows] {
            for row in rows.iter() {
                if row.is_empty() {
                    return Err(QpError::InvalidProblem("empty constraint row".into()));
                }
                for (idx, v) in row {
                    if *idx >= self.n || !v.is_finite() {
                        return Err(QpError::InvalidProblem(format!(
                            "bad entry ({idx}, {v}) in constraint row"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut obj = 0.0;
        for i in 0..self.n {
            obj += 0.5 * self.quad_diag[i] * x[i] * x[i] + self.lin[i] * x[i];
        }
        obj
    }

    /// Serializes to the plain-text dump format (one item per line):
    ///
    /// ```text
    /// qp <n> <n_eq> <n_ineq>
    /// quad <i> <value>          # nonzero quadratic diagonal entries
    /// lin <i> <value>           # nonzero linear cost entries
    /// eq <row> <col> <value>    # equality matrix triplets
    /// eqrhs <row> <value>
    /// ineq <row> <col> <value>  # inequality matrix triplets (row.x <= rhs)
    /// ineqrhs <row> <value>
    /// ```
    pub fn dump(&self) -> String {
        let mut out = format!("qp {} {} {}\n", self.n, self.eq_rows.len(), self.ineq_rows.len());
        for (i, q) in self.quad_diag.iter().enumerate() {
            if *q != 0.0 {
                out.push_str(&format!("quad {i} {q:.17e}\n"));
            }
        }
        for (i, q) in self.lin.iter().enumerate() {
            if *q != 0.0 {
                out.push_str(&format!("lin {i} {q:.17e}\n"));
            }
        }
        for (r, row) in self.eq_rows.iter().enumerate() {
            for (c, v) in row {
                out.push_str(&format!("eq {r} {c} {v:.17e}\n"));
            }
        }
        for (r, v) in self.eq_rhs.iter().enumerate() {
            out.push_str(&format!("eqrhs {r} {v:.17e}\n"));
        }
        for (r, row) in self.ineq_rows.iter().enumerate() {
            for (c, v) in row {
                out.push_str(&format!("ineq {r} {c} {v:.17e}\n"));
            }
        }
        for (r, v) in self.ineq_rhs.iter().enumerate() {
            out.push_str(&format!("ineqrhs {r} {v:.17e}\n"));
        }
        out
    }

    /// Parses the [`QpProblem::dump`] format.
    pub fn parse(text: &str) -> Result<Self, QpError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| QpError::ParseError("empty dump".into()))?;
        let mut it = header.split_whitespace();
        if it.next() != Some("qp") {
            return Err(QpError::ParseError("missing qp header".into()));
        }
        let mut next_num = |what: &str| -> Result<usize, QpError> {
            it.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| QpError::ParseError(format!("bad header field {what}")))
        };
        let n = next_num("n")?;
        let n_eq = next_num("n_eq")?;
        let n_ineq = next_num("n_ineq")?;
        let mut p = QpProblem::new(n);
        p.eq_rows = vec![Vec::new(); n_eq];
        p.eq_rhs = vec![0.0; n_eq];
        p.ineq_rows = vec![Vec::new(); n_ineq];
        p.ineq_rhs = vec![0.0; n_ineq];
        for line in lines {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let bad = || QpError::ParseError(format!("bad line: {line}"));
            let num = |t: &str| t.parse::<f64>().map_err(|_| bad());
            let idx = |t: &str| t.parse::<usize>().map_err(|_| bad());
            match tokens.as_slice() {
                ["quad", i, v] => p.quad_diag[idx(i)?] = num(v)?,
                ["lin", i, v] => p.lin[idx(i)?] = num(v)?,
                ["eq", r, c, v] => p.eq_rows[idx(r)?].push((idx(c)?, num(v)?)),
                ["eqrhs", r, v] => p.eq_rhs[idx(r)?] = num(v)?,
                ["ineq", r, c, v] => p.ineq_rows[idx(r)?].push((idx(c)?, num(v)?)),
                ["ineqrhs", r, v] => p.ineq_rhs[idx(r)?] = num(v)?,
                _ => return Err(bad()),
            }
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// max-norm of the stationarity residual.
    pub dual_residual: f64,
    /// max-norm of the equality residual.
    pub eq_residual: f64,
    /// largest inequality violation (0 when feasible).
    pub ineq_residual: f64,
    /// average complementarity gap s'z / m.
    pub comp_residual: f64,
    pub iterations: usize,
    pub solve_time_s: f64,
    /// Residual merit after each iteration, for convergence audits.
    pub merit_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-6, max_iter: 5000 }
    }
}

/// Symmetric banded matrix in lower-band storage with LDL^T factorization.
struct BandMatrix {
    n: usize,
    bw: usize,
    /// data[j * (bw + 1) + (i - j)] holds entry (i, j), j <= i <= j + bw.
    data: Vec<f64>,
}

impl BandMatrix {
    fn new(n: usize, bw: usize) -> Self {
        BandMatrix { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    fn clear(&mut self) {
        self.data.fill(0.0);
    }

    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(hi - lo <= self.bw);
        self.data[lo * (self.bw + 1) + (hi - lo)] += v;
    }

    /// In-place LDL^T. `signs` gives the expected inertia of each pivot
    /// (+1 primal, -1 dual); pivots that collapse numerically are floored to
    /// `sign * pivot_floor` so the factorization always completes.
    fn factor(&mut self, signs: &[i8], pivot_floor: f64) {
        let bw = self.bw;
        let w = bw + 1;
        for j in 0..self.n {
            let lo = j.saturating_sub(bw);
            let mut d = self.data[j * w];
            for k in lo..j {
                let l_jk = self.data[k * w + (j - k)];
                d -= l_jk * l_jk * self.data[k * w];
            }
            if d.abs() < pivot_floor {
                d = signs[j] as f64 * pivot_floor;
            }
            self.data[j * w] = d;
            let hi = (j + bw).min(self.n - 1);
            for i in j + 1..=hi {
                let mut a = self.data[j * w + (i - j)];
                let lo_i = i.saturating_sub(bw).max(lo);
                for k in lo_i..j {
                    a -= self.data[k * w + (i - k)] * self.data[k * w + (j - k)] * self.data[k * w];
                }
                self.data[j * w + (i - j)] = a / d;
            }
        }
    }

    /// Solves L D L^T sol = rhs in place.
    fn solve(&self, rhs: &mut [f64]) {
        let bw = self.bw;
        let w = bw + 1;
        for j in 0..self.n {
            let hi = (j + bw).min(self.n - 1);
            let r = rhs[j];
            for i in j + 1..=hi {
                rhs[i] -= self.data[j * w + (i - j)] * r;
            }
        }
        for j in 0..self.n {
            rhs[j] /= self.data[j * w];
        }
        for j in (0..self.n).rev() {
            let hi = (j + bw).min(self.n - 1);
            let mut r = rhs[j];
            for i in j + 1..=hi {
                r -= self.data[j * w + (i - j)] * rhs[i];
            }
            rhs[j] = r;
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, b| a.max(b.abs()))
}

struct Workspace<'a> {
    p: &'a QpProblem,
    /// position of variable i in the KKT ordering
    var_pos: Vec<usize>,
    /// position of equality row r in the KKT ordering
    eq_pos: Vec<usize>,
    signs: Vec<i8>,
    kkt: BandMatrix,
    reg: f64,
}

impl<'a> Workspace<'a> {
    fn new(p: &'a QpProblem) -> Self {
        let n = p.n;
        let me = p.eq_rows.len();
        // interleave equality rows right after their last referenced
        // variable; receding-horizon dynamics rows then sit between
        // consecutive timestep blocks and the band stays narrow
        let mut items: Vec<(usize, usize, usize)> = Vec::with_capacity(n + me);
        for i in 0..n {
            items.push((i, 0, i));
        }
        for (r, row) in p.eq_rows.iter().enumerate() {
            let maxcol = row.iter().map(|(c, _)| *c).max().unwrap_or(0);
            items.push((maxcol, 1 + r, r));
        }
        items.sort();
        let mut var_pos = vec![0; n];
        let mut eq_pos = vec![0; me];
        let mut signs = vec![0i8; n + me];
        for (pos, (_, tag, id)) in items.iter().enumerate() {
            if *tag == 0 {
                var_pos[*id] = pos;
                signs[pos] = 1;
            } else {
                eq_pos[*id] = pos;
                signs[pos] = -1;
            }
        }
        // bandwidth from the sparsity pattern
        let mut bw = 0usize;
        for row in &p.ineq_rows {
            for (a, _) in row {
                for (b, _) in row {
                    bw = bw.max(var_pos[*a].abs_diff(var_pos[*b]));
                }
            }
        }
        for (r, row) in p.eq_rows.iter().enumerate() {
            for (c, _) in row {
                bw = bw.max(eq_pos[r].abs_diff(var_pos[*c]));
            }
        }
        Workspace {
            p,
            var_pos,
            eq_pos,
            signs,
            kkt: BandMatrix::new(n + me, bw),
            reg: 1e-9,
        }
    }

    fn assemble(&mut self, w_ineq: &[f64]) {
        let p = self.p;
        self.kkt.clear();
        for i in 0..p.n {
            self.kkt.add(self.var_pos[i], self.var_pos[i], p.quad_diag[i] + self.reg);
        }
        for r in 0..p.eq_rows.len() {
            self.kkt.add(self.eq_pos[r], self.eq_pos[r], -self.reg);
            for (c, v) in &p.eq_rows[r] {
                self.kkt.add(self.eq_pos[r], self.var_pos[*c], *v);
            }
        }
        for (r, row) in p.ineq_rows.iter().enumerate() {
            for (a, va) in row {
                for (b, vb) in row {
                    if self.var_pos[*a] >= self.var_pos[*b] {
                        self.kkt.add(self.var_pos[*a], self.var_pos[*b], w_ineq[r] * va * vb);
                    }
                }
            }
        }
        self.kkt.factor(&self.signs, 1e-13);
    }

    /// Solves the condensed KKT system for (dx, dy).
    fn solve(&self, rhs_x: &[f64], rhs_y: &[f64], dx: &mut [f64], dy: &mut [f64]) {
        let p = self.p;
        let mut rhs = vec![0.0; p.n + p.eq_rows.len()];
        for i in 0..p.n {
            rhs[self.var_pos[i]] = rhs_x[i];
        }
        for r in 0..p.eq_rows.len() {
            rhs[self.eq_pos[r]] = rhs_y[r];
        }
        self.kkt.solve(&mut rhs);
        for i in 0..p.n {
            dx[i] = rhs[self.var_pos[i]];
        }
        for r in 0..p.eq_rows.len() {
            dy[r] = rhs[self.eq_pos[r]];
        }
    }
}

fn mat_vec(rows: &[Vec<(usize, f64)>], x: &[f64], out: &mut [f64]) {
    for (r, row) in rows.iter().enumerate() {
        out[r] = row.iter().map(|(c, v)| v * x[*c]).sum();
    }
}

fn mat_t_vec_acc(rows: &[Vec<(usize, f64)>], v: &[f64], out: &mut [f64]) {
    for (r, row) in rows.iter().enumerate() {
        for (c, coef) in row {
            out[*c] += coef * v[r];
        }
    }
}

/// Solves the QP from a cold start.
pub fn solve_qp(problem: &QpProblem, opts: &SolverOptions) -> QpSolution {
    solve_inner(problem, opts, None)
}

/// Solves the QP warm-started from a primal hint (typically the previous
/// receding-horizon solution shifted by one interval).
pub fn solve_qp_warm(problem: &QpProblem, opts: &SolverOptions, x_hint: &[f64]) -> QpSolution {
    solve_inner(problem, opts, Some(x_hint))
}

/// Monotonic clock where the platform has one; wasm targets have none, so
/// solve times report as zero there instead of panicking.
#[cfg(not(target_arch = "wasm32"))]
fn monotonic_now() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn monotonic_now() -> Option<std::time::Instant> {
    None
}

fn solve_inner(problem: &QpProblem, opts: &SolverOptions, x_hint: Option<&[f64]>) -> QpSolution {
    let start = monotonic_now();
    problem.validate().expect("solver given an invalid problem");
    let n = problem.n;
    let me = problem.eq_rows.len();
    let mi = problem.ineq_rows.len();

    let mut x = match x_hint {
        Some(h) if h.len() == n => h.to_vec(),
        _ => vec![0.0; n],
    };
    let mut y = vec![0.0; me];
    let mut cx = vec![0.0; mi];
    mat_vec(&problem.ineq_rows, &x, &mut cx);
    let mut s: Vec<f64> = (0..mi)
        .map(|r| (cx[r] - problem.ineq_rhs[r] + 1.0).max(1.0))
        .collect();
    let mut z = vec![1.0; mi];

    let mut ws = Workspace::new(problem);
    let mut merit_history = Vec::new();
    let mut iterations = 0;
    let mut best_merit = f64::INFINITY;
    let mut stall = 0;

    let mut r_dual = vec![0.0; n];
    let mut r_eq = vec![0.0; me];
    let mut r_ineq = vec![0.0; mi];
    let mut dx = vec![0.0; n];
    let mut dy = vec![0.0; me];
    let mut rhs_x = vec![0.0; n];
    let mut w_ineq = vec![0.0; mi];
    let mut cdx = vec![0.0; mi];

    let residuals = |x: &[f64], y: &[f64], z: &[f64], s: &[f64]| {
        let mut rd = vec![0.0; n];
        for i in 0..n {
            rd[i] = problem.quad_diag[i] * x[i] + problem.lin[i];
        }
        mat_t_vec_acc(&problem.eq_rows, y, &mut rd);
        mat_t_vec_acc(&problem.ineq_rows, z, &mut rd);
        let mut re = vec![0.0; me];
        mat_vec(&problem.eq_rows, x, &mut re);
        for r in 0..me {
            re[r] -= problem.eq_rhs[r];
        }
        let mut ri = vec![0.0; mi];
        mat_vec(&problem.ineq_rows, x, &mut ri);
        for r in 0..mi {
            ri[r] += s[r] - problem.ineq_rhs[r];
        }
        (rd, re, ri)
    };

    let finish = |status: QpStatus,
                  x: Vec<f64>,
                  rd: f64,
                  re: f64,
                  viol: f64,
                  mu: f64,
                  iterations: usize,
                  merit_history: Vec<f64>| {
        let objective = problem.objective(&x);
        QpSolution {
            status,
            x,
            objective,
            dual_residual: rd,
            eq_residual: re,
            ineq_residual: viol,
            comp_residual: mu,
            iterations,
            solve_time_s: start.map_or(0.0, |t| t.elapsed().as_secs_f64()),
            merit_history,
        }
    };

    loop {
        let (rd, re, ri) = residuals(&x, &y, &z, &s);
        r_dual.copy_from_slice(&rd);
        r_eq.copy_from_slice(&re);
        r_ineq.copy_from_slice(&ri);

        mat_vec(&problem.ineq_rows, &x, &mut cx);
        let viol = (0..mi).fold(0.0f64, |a, r| a.max(cx[r] - problem.ineq_rhs[r]));
        let mu = if mi > 0 {
            s.iter().zip(&z).map(|(si, zi)| si * zi).sum::<f64>() / mi as f64
        } else {
            0.0
        };
        let merit = max_abs(&r_dual) + max_abs(&r_eq) + viol.max(0.0) + mu;
        merit_history.push(merit);

        if max_abs(&r_dual) <= opts.tol
            && max_abs(&r_eq) <= opts.tol
            && viol <= opts.tol
            && mu <= opts.tol
        {
            return finish(
                QpStatus::Optimal,
                x,
                max_abs(&r_dual),
                max_abs(&r_eq),
                viol.max(0.0),
                mu,
                iterations,
                merit_history,
            );
        }

        if merit < best_merit - 1e-14 {
            best_merit = merit;
            stall = 0;
        } else {
            stall += 1;
        }
        if iterations >= opts.max_iter || stall > 30 {
            // feasibility residuals that refuse to move while the rest of
            // the system is settled indicate an inconsistent constraint set
            let status = if (max_abs(&r_eq) > opts.tol.sqrt() || viol > opts.tol.sqrt())
                && max_abs(&r_dual) <= opts.tol.sqrt()
                && mu <= opts.tol.sqrt()
            {
                QpStatus::Infeasible
            } else {
                QpStatus::MaxIterations
            };
            return finish(
                status,
                x,
                max_abs(&r_dual),
                max_abs(&r_eq),
                viol.max(0.0),
                mu,
                iterations,
                merit_history,
            );
        }
        iterations += 1;

        for r in 0..mi {
            w_ineq[r] = z[r] / s[r];
        }
        ws.assemble(&w_ineq);

        // predictor: pure Newton step on the KKT conditions (sigma = 0)
        for i in 0..n {
            rhs_x[i] = -r_dual[i];
        }
        for r in 0..mi {
            // r_comp = s z (affine target 0)
            let coef = w_ineq[r] * r_ineq[r] - z[r];
            for (c, v) in &problem.ineq_rows[r] {
                rhs_x[*c] -= v * coef;
            }
        }
        let rhs_y: Vec<f64> = r_eq.iter().map(|v| -v).collect();
        ws.solve(&rhs_x, &rhs_y, &mut dx, &mut dy);

        mat_vec(&problem.ineq_rows, &dx, &mut cdx);
        let mut ds_aff = vec![0.0; mi];
        let mut dz_aff = vec![0.0; mi];
        for r in 0..mi {
            ds_aff[r] = -r_ineq[r] - cdx[r];
            dz_aff[r] = w_ineq[r] * (cdx[r] + r_ineq[r]) - z[r];
        }

        let (alpha_p_aff, alpha_d_aff) = step_lengths(&s, &ds_aff, &z, &dz_aff, 1.0);
        let sigma = if mi > 0 {
            let mu_aff = (0..mi)
                .map(|r| (s[r] + alpha_p_aff * ds_aff[r]) * (z[r] + alpha_d_aff * dz_aff[r]))
                .sum::<f64>()
                / mi as f64;
            (mu_aff / mu).clamp(0.0, 1.0).powi(3)
        } else {
            0.0
        };

        // corrector with centering
        if mi > 0 {
            for i in 0..n {
                rhs_x[i] = -r_dual[i];
            }
            for r in 0..mi {
                // r_comp = s z + ds_aff dz_aff - sigma mu
                let r_comp = s[r] * z[r] + ds_aff[r] * dz_aff[r] - sigma * mu;
                let coef = w_ineq[r] * r_ineq[r] - r_comp / s[r];
                for (c, v) in &problem.ineq_rows[r] {
                    rhs_x[*c] -= v * coef;
                }
            }
            ws.solve(&rhs_x, &rhs_y, &mut dx, &mut dy);
            mat_vec(&problem.ineq_rows, &dx, &mut cdx);
        }

        let mut ds = vec![0.0; mi];
        let mut dz = vec![0.0; mi];
        for r in 0..mi {
            let r_comp = if mi > 0 {
                s[r] * z[r] + ds_aff[r] * dz_aff[r] - sigma * mu
            } else {
                0.0
            };
            ds[r] = -r_ineq[r] - cdx[r];
            dz[r] = w_ineq[r] * (cdx[r] + r_ineq[r]) - r_comp / s[r];
        }

        let (alpha_p, alpha_d) = step_lengths(&s, &ds, &z, &dz, 0.995);
        for i in 0..n {
            x[i] += alpha_p * dx[i];
        }
        for r in 0..me {
            y[r] += alpha_d * dy[r];
        }
        for r in 0..mi {
            s[r] += alpha_p * ds[r];
            z[r] += alpha_d * dz[r];
        }
    }
}

/// Largest steps keeping s and z strictly positive, scaled by `frac`.
fn step_lengths(s: &[f64], ds: &[f64], z: &[f64], dz: &[f64], frac: f64) -> (f64, f64) {
    let mut alpha_p = 1.0f64;
    let mut alpha_d = 1.0f64;
    for r in 0..s.len() {
        if ds[r] < 0.0 {
            alpha_p = alpha_p.min(-s[r] / ds[r] * frac);
        }
        if dz[r] < 0.0 {
            alpha_d = alpha_d.min(-z[r] / dz[r] * frac);
        }
    }
    (alpha_p.min(1.0), alpha_d.min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn solve(p: &QpProblem) -> QpSolution {
        solve_qp(p, &SolverOptions::default())
    }

    /// Independent KKT audit: recompute residuals from scratch given only
    /// the primal solution, reconstructing multipliers is not needed for
    /// feasibility terms.
    fn assert_feasible(p: &QpProblem, sol: &QpSolution, tol: f64) {
        for (row, rhs) in p.eq_rows.iter().zip(&p.eq_rhs) {
            let v: f64 = row.iter().map(|(c, a)| a * sol.x[*c]).sum();
            assert!((v - rhs).abs() <= tol, "equality residual {} > {tol}", (v - rhs).abs());
        }
        for (row, rhs) in p.ineq_rows.iter().zip(&p.ineq_rhs) {
            let v: f64 = row.iter().map(|(c, a)| a * sol.x[*c]).sum();
            assert!(v - rhs <= tol, "inequality violation {} > {tol}", v - rhs);
        }
    }

    #[test]
    fn unconstrained_diagonal_qp_has_closed_form_minimizer() {
        let mut p = QpProblem::new(3);
        p.quad_diag = vec![2.0, 4.0, 1.0];
        p.lin = vec![-2.0, 8.0, 3.0];
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        for i in 0..3 {
            assert_abs_diff_eq!(sol.x[i], -p.lin[i] / p.quad_diag[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn minimize_x_squared_above_one_lands_on_the_bound() {
        // minimize x^2 subject to x >= 1
        let mut p = QpProblem::new(1);
        p.quad_diag = vec![2.0];
        p.ineq_rows = vec![vec![(0, -1.0)]];
        p.ineq_rhs = vec![-1.0];
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-5);
        assert!(sol.dual_residual <= 1e-6);
        assert!(sol.comp_residual <= 1e-6);
    }

    #[test]
    fn equality_constrained_qp_splits_evenly() {
        // minimize 1/2 x^2 + 1/2 y^2 subject to x + y = 2
        let mut p = QpProblem::new(2);
        p.quad_diag = vec![1.0, 1.0];
        p.eq_rows = vec![vec![(0, 1.0), (1, 1.0)]];
        p.eq_rhs = vec![2.0];
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.x[1], 1.0, epsilon = 1e-6);
        assert_feasible(&p, &sol, 1e-6);
    }

    #[test]
    fn linear_cost_with_box_rides_the_upper_bound() {
        // minimize -x subject to 0 <= x <= 3
        let mut p = QpProblem::new(1);
        p.lin = vec![-1.0];
        p.ineq_rows = vec![vec![(0, 1.0)], vec![(0, -1.0)]];
        p.ineq_rhs = vec![3.0, 0.0];
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 3.0, epsilon = 1e-6);
    }

    #[test]
    fn contradictory_equalities_are_reported_infeasible() {
        // x = 0 and x = 1 cannot both hold
        let mut p = QpProblem::new(1);
        p.quad_diag = vec![1.0];
        p.eq_rows = vec![vec![(0, 1.0)], vec![(0, 1.0)]];
        p.eq_rhs = vec![0.0, 1.0];
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn inactive_constraints_leave_the_interior_solution_alone() {
        let mut p = QpProblem::new(2);
        p.quad_diag = vec![2.0, 2.0];
        p.lin = vec![-2.0, -4.0];
        p.ineq_rows = vec![vec![(0, 1.0)], vec![(1, 1.0)], vec![(0, 1.0), (1, 1.0)]];
        p.ineq_rhs = vec![100.0, 100.0, 150.0];
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.x[1], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn mixed_equality_inequality_qp_satisfies_hand_derived_kkt() {
        // minimize 1/2 (x0^2 + x1^2 + x2^2) - x2
        // s.t. x0 + x1 + x2 = 1, x0 >= 0.1
        // Without the bound the optimum is (0, 0, 1), so the bound is
        // active: x0 = 0.1. On the remaining variables stationarity gives
        // x1 = -y, x2 = 1 - y with x1 + x2 = 0.9, so y = 0.05 and
        // (x1, x2) = (-0.05, 0.95).
        let mut p = QpProblem::new(3);
        p.quad_diag = vec![1.0, 1.0, 1.0];
        p.lin = vec![0.0, 0.0, -1.0];
        p.eq_rows = vec![vec![(0, 1.0), (1, 1.0), (2, 1.0)]];
        p.eq_rhs = vec![1.0];
        p.ineq_rows = vec![vec![(0, -1.0)]];
        p.ineq_rhs = vec![-0.1];
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 0.1, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.x[1], -0.05, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.x[2], 0.95, epsilon = 1e-6);
        assert_feasible(&p, &sol, 1e-6);
    }

    #[test]
    fn solver_is_deterministic() {
        let mut p = QpProblem::new(4);
        p.quad_diag = vec![1.0, 0.0, 2.0, 0.5];
        p.lin = vec![0.3, -1.2, 0.0, 2.0];
        p.eq_rows = vec![vec![(0, 1.0), (2, -1.0)]];
        p.eq_rhs = vec![0.25];
        p.ineq_rows = vec![
            vec![(1, 1.0)],
            vec![(1, -1.0)],
            vec![(3, 1.0)],
            vec![(3, -1.0)],
            vec![(0, 1.0), (1, 1.0), (3, 0.5)],
        ];
        p.ineq_rhs = vec![2.0, 0.0, 1.0, 1.0, 2.5];
        let a = solve(&p);
        let b = solve(&p);
        assert_eq!(a.status, QpStatus::Optimal);
        assert_eq!(a.x, b.x);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn merit_decreases_to_convergence() {
        let mut p = QpProblem::new(2);
        p.quad_diag = vec![2.0, 0.0];
        p.lin = vec![0.0, 1.0];
        p.eq_rows = vec![vec![(0, 1.0), (1, 1.0)]];
        p.eq_rhs = vec![1.0];
        p.ineq_rows = vec![vec![(1, -1.0)], vec![(1, 1.0)]];
        p.ineq_rhs = vec![0.0, 10.0];
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        // the method is not monotone while it recenters early on, but once
        // past its residual peak it must contract every iteration
        let peak = sol
            .merit_history
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        for w in sol.merit_history[peak..].windows(2) {
            assert!(w[1] < w[0], "merit stalled after peak: {} -> {}", w[0], w[1]);
        }
        assert!(*sol.merit_history.last().unwrap() <= 4e-6);
    }

    #[test]
    fn dump_round_trips() {
        let mut p = QpProblem::new(3);
        p.quad_diag = vec![2.0, 0.0, 1.5];
        p.lin = vec![0.0, -1.0, 0.25];
        p.eq_rows = vec![vec![(0, 1.0), (1, -2.0)]];
        p.eq_rhs = vec![0.5];
        p.ineq_rows = vec![vec![(2, 1.0)], vec![(2, -1.0)]];
        p.ineq_rhs = vec![4.0, 0.0];
        let text = p.dump();
        let parsed = QpProblem::parse(&text).unwrap();
        assert_eq!(p, parsed);
        let a = solve(&p);
        let b = solve(&parsed);
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let mut p = QpProblem::new(2);
        p.quad_diag = vec![-1.0, 0.0];
        assert!(matches!(p.validate(), Err(QpError::InvalidProblem(_))));
        let mut p = QpProblem::new(2);
        p.ineq_rows = vec![vec![(5, 1.0)]];
        p.ineq_rhs = vec![0.0];
        assert!(matches!(p.validate(), Err(QpError::InvalidProblem(_))));
    }

    /// Builds a 2-step 1-state receding-horizon QP in raw units: states
    /// T1, T2 from T1 = a T0 + b p0 + c0, slack pairs on both states,
    /// energy cost on both controls. Layout [T1, p0, slo0, shi0, T2, p1,
    /// slo1, shi1].
    fn toy_mpc_qp(
        t0: f64,
        a: f64,
        b: f64,
        c: f64,
        prices: [f64; 2],
        p_bar: f64,
        t_low: f64,
        t_high: f64,
        lambda: f64,
        beta: f64,
    ) -> QpProblem {
        let mut p = QpProblem::new(8);
        for j in 0..2 {
            let (t, pw, slo, shi) = (4 * j, 4 * j + 1, 4 * j + 2, 4 * j + 3);
            p.lin[pw] = prices[j];
            p.quad_diag[slo] = 2.0 * lambda;
            p.quad_diag[shi] = 2.0 * lambda * beta;
            let mut dyn_row = vec![(t, 1.0), (pw, -b)];
            let mut rhs = c;
            if j == 0 {
                rhs += a * t0;
            } else {
                dyn_row.push((t - 4, -a));
            }
            p.eq_rows.push(dyn_row);
            p.eq_rhs.push(rhs);
            p.ineq_rows.push(vec![(t, -1.0), (slo, -1.0)]);
            p.ineq_rhs.push(-t_low);
            p.ineq_rows.push(vec![(t, 1.0), (shi, -1.0)]);
            p.ineq_rhs.push(t_high);
            p.ineq_rows.push(vec![(slo, -1.0)]);
            p.ineq_rhs.push(0.0);
            p.ineq_rows.push(vec![(shi, -1.0)]);
            p.ineq_rhs.push(0.0);
            p.ineq_rows.push(vec![(pw, -1.0)]);
            p.ineq_rhs.push(0.0);
            p.ineq_rows.push(vec![(pw, 1.0)]);
            p.ineq_rhs.push(p_bar);
        }
        p
    }

    #[test]
    fn two_step_toy_mpc_matches_brute_force_grid_search() {
        let (t0, a, b, c) = (318.0, 0.993, 8.0e-4, 2.05);
        let (t_low, t_high) = (319.3, 324.8);
        let (lambda, beta) = (0.05, 1.0);
        let p_bar = 1130.0;
        let prices = [4.7e-4, 2.1e-4];
        let p = toy_mpc_qp(t0, a, b, c, prices, p_bar, t_low, t_high, lambda, beta);
        // tight tolerance: suboptimality of an interior iterate scales with
        // the complementarity gap, and the grid oracle resolves 1e-3
        let sol = solve_qp(&p, &SolverOptions { tol: 1e-9, max_iter: 200 });
        assert_eq!(sol.status, QpStatus::Optimal);

        // exhaustive search over both controls at 1e-3 of full scale
        let cost = |p0: f64, p1: f64| {
            let t1 = a * t0 + b * p0 + c;
            let t2 = a * t1 + b * p1 + c;
            let pen = |t: f64| {
                lambda * (t_low - t).max(0.0).powi(2) + lambda * beta * (t - t_high).max(0.0).powi(2)
            };
            prices[0] * p0 + prices[1] * p1 + pen(t1) + pen(t2)
        };
        let mut best = f64::INFINITY;
        for i in 0..=1000 {
            for j in 0..=1000 {
                let v = cost(i as f64 * 1e-3 * p_bar, j as f64 * 1e-3 * p_bar);
                if v < best {
                    best = v;
                }
            }
        }
        // the QP optimum can only undercut the grid by sub-resolution slack
        assert!(sol.objective <= best + 1e-6, "qp {} vs grid {best}", sol.objective);
        assert!(
            best - sol.objective <= 2e-3,
            "grid gap too large: qp {} vs grid {best}",
            sol.objective
        );
    }

    #[test]
    fn slack_reformulation_reproduces_clipped_quadratic_penalty() {
        let (t_low, t_high) = (319.26, 324.82);
        let (lambda, beta) = (0.1, 1.7);
        let opts = SolverOptions { tol: 1e-10, max_iter: 200 };
        for t in [310.0, 319.25, 319.26, 322.0, 324.82, 325.5, 340.0] {
            // fix the state by equality; only the slacks are free
            let mut p = QpProblem::new(3);
            p.quad_diag = vec![0.0, 2.0 * lambda, 2.0 * lambda * beta];
            p.eq_rows = vec![vec![(0, 1.0)]];
            p.eq_rhs = vec![t];
            p.ineq_rows = vec![
                vec![(0, -1.0), (1, -1.0)],
                vec![(0, 1.0), (2, -1.0)],
                vec![(1, -1.0)],
                vec![(2, -1.0)],
            ];
            p.ineq_rhs = vec![-t_low, t_high, 0.0, 0.0];
            let sol = solve_qp(&p, &opts);
            assert_eq!(sol.status, QpStatus::Optimal);
            let expected = lambda * (t_low - t).max(0.0).powi(2)
                + lambda * beta * (t - t_high).max(0.0).powi(2);
            assert_abs_diff_eq!(sol.objective, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn warm_start_matches_cold_start_solution() {
        let mut p = QpProblem::new(2);
        p.quad_diag = vec![2.0, 2.0];
        p.lin = vec![-2.0, -6.0];
        p.ineq_rows = vec![vec![(0, 1.0), (1, 1.0)], vec![(0, -1.0)], vec![(1, -1.0)]];
        p.ineq_rhs = vec![2.0, 0.0, 0.0];
        let cold = solve(&p);
        let warm = solve_qp_warm(&p, &SolverOptions::default(), &cold.x);
        assert_eq!(warm.status, QpStatus::Optimal);
        for i in 0..2 {
            assert_abs_diff_eq!(cold.x[i], warm.x[i], epsilon = 1e-5);
        }
        assert!(warm.iterations <= cold.iterations * 2 + 2);
    }
}
