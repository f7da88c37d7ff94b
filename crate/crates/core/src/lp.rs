//! Dense linear programming.
//!
//! Problems are stated as `min c^T x  s.t.  G x <= h` with `x` free. The
//! solver runs a revised primal simplex on the dual
//! `min h^T y  s.t.  G^T y = -c, y >= 0`, which has only `n` equality rows;
//! the synthesis programs have thousands of inequality rows but a few dozen
//! variables, so the basis stays tiny. The primal point is read off the
//! simplex multipliers and then checked against every row in absolute terms.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplexOptions {
    /// Absolute bound on `max_i (G x - h)_i` for an accepted optimum.
    pub feas_tol: f64,
    /// Relative slack used to hold the objective and earlier coordinates on the optimal face.
    pub opt_tol: f64,
    pub pivot_tol: f64,
    pub max_iter: usize,
    /// Break ties inside the optimal face toward the lexicographically smallest `x`.
    pub lexicographic: bool,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-8,
            opt_tol: 1e-9,
            pivot_tol: 1e-9,
            max_iter: 0,
            lexicographic: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseLp {
    pub c: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Multipliers of `G x <= h` (nonnegative, `G^T y = -c`).
    pub duals: DVector<f64>,
    pub max_violation: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub enum LpOutcome {
    Optimal(LpSolution),
    /// `y >= 0` with `G^T y = 0` and `h^T y < 0`.
    Infeasible { farkas: DVector<f64> },
    /// The dual has no feasible point: the primal is unbounded (or infeasible
    /// as well). Cannot occur when every variable has finite bounds.
    Unbounded,
}

impl DenseLp {
    pub fn new(c: DVector<f64>, g: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        if g.ncols() != c.len() || g.nrows() != h.len() {
            return Err(Error::Dimension(format!(
                "LP with {} variables, G {}x{}, h {}",
                c.len(),
                g.nrows(),
                g.ncols(),
                h.len()
            )));
        }
        if c.iter().chain(g.iter()).chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite LP data".into()));
        }
        Ok(Self { c, g, h })
    }

    /// `min c^T x  s.t.  A x <= b_ub, lo <= x <= hi` with rows that can never
    /// be violated on the box removed up front.
    pub fn boxed(
        c: DVector<f64>,
        a: &DMatrix<f64>,
        b_ub: &DVector<f64>,
        lo: &[f64],
        hi: &[f64],
        screen_tol: f64,
    ) -> Result<(Self, Vec<usize>)> {
        let n = c.len();
        if a.ncols() != n || a.nrows() != b_ub.len() || lo.len() != n || hi.len() != n {
            return Err(Error::Dimension("boxed LP dimensions".into()));
        }
        let keep: Vec<usize> = (0..a.nrows())
            .filter(|&i| {
                let mut worst = -b_ub[i];
                for j in 0..n {
                    let v = a[(i, j)];
                    worst += if v > 0.0 { v * hi[j] } else { v * lo[j] };
                }
                !(worst < -screen_tol)
            })
            .collect();
        let m = keep.len() + 2 * n;
        let mut g = DMatrix::zeros(m, n);
        let mut h = DVector::zeros(m);
        for (r, &i) in keep.iter().enumerate() {
            g.row_mut(r).copy_from(&a.row(i));
            h[r] = b_ub[i];
        }
        for j in 0..n {
            let r = keep.len() + 2 * j;
            g[(r, j)] = 1.0;
            h[r] = hi[j];
            g[(r + 1, j)] = -1.0;
            h[r + 1] = -lo[j];
        }
        Ok((Self::new(c, g, h)?, keep))
    }

    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    pub fn n_rows(&self) -> usize {
        self.h.len()
    }

    /// `max_i (G x - h)_i` and its row.
    pub fn max_violation(&self, x: &DVector<f64>) -> (f64, usize) {
        let r = &self.g * x - &self.h;
        let mut worst = (f64::NEG_INFINITY, 0);
        for (i, v) in r.iter().enumerate() {
            if *v > worst.0 {
                worst = (*v, i);
            }
        }
        worst
    }

    pub fn solve(&self, opts: &SimplexOptions) -> Result<LpOutcome> {
        let outcome = DualSimplex::new(self, opts).run()?;
        match outcome {
            LpOutcome::Optimal(sol) if opts.lexicographic && self.n_vars() > 1 => {
                self.lexicographic_pass(sol, opts).map(LpOutcome::Optimal)
            }
            other => Ok(other),
        }
    }

    /// Sequentially minimizes `x_0, x_1, ...` over the optimal face.
    fn lexicographic_pass(&self, sol: LpSolution, opts: &SimplexOptions) -> Result<LpSolution> {
        if !sol.face_may_be_degenerate(self) {
            return Ok(sol);
        }
        let n = self.n_vars();
        let mut g = self.g.clone().insert_rows(self.n_rows(), 1, 0.0);
        g.row_mut(self.n_rows()).copy_from(&self.c.transpose());
        let mut h = self.h.clone().push(sol.objective + opts.opt_tol * sol.objective.abs().max(1.0));
        let mut x = sol.x.clone();
        let mut iterations = sol.iterations;
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            let sub = DenseLp { c: e, g: g.clone(), h: h.clone() };
            let inner = SimplexOptions { lexicographic: false, ..*opts };
            match DualSimplex::new(&sub, &inner).run()? {
                LpOutcome::Optimal(s) => {
                    iterations += s.iterations;
                    x = s.x;
                    let row = g.nrows();
                    g = g.insert_rows(row, 1, 0.0);
                    g[(row, j)] = 1.0;
                    h = h.push(x[j] + opts.opt_tol * x[j].abs() + 1e-12);
                }
                _ => break,
            }
        }
        let (viol, _) = self.max_violation(&x);
        if viol > opts.feas_tol {
            return Ok(sol);
        }
        Ok(LpSolution {
            objective: self.c.dot(&x),
            max_violation: viol,
            x,
            iterations,
            ..sol
        })
    }
}

impl LpSolution {
    /// With fewer than `n` strictly positive multipliers complementary
    /// slackness no longer pins `x` down, so the optimal face may be larger than a point.
    fn face_may_be_degenerate(&self, lp: &DenseLp) -> bool {
        let ymax = self.duals.iter().cloned().fold(0.0, f64::max).max(1.0);
        let strict = self
            .duals
            .iter()
            .filter(|y| **y > 1e-9 * ymax)
            .count();
        strict < lp.n_vars()
    }
}

struct DualSimplex<'a> {
    lp: &'a DenseLp,
    opts: SimplexOptions,
    /// Scaled rows: `gs_i = G_i / s_i`, `hs_i = h_i / s_i`.
    scale: Vec<f64>,
    gs: DMatrix<f64>,
    hs: Vec<f64>,
    arts_sign: Vec<f64>,
    n: usize,
    m: usize,
    /// Basic variable per equality row; `j < m` is a real column, `m + r` an artificial.
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    binv: DMatrix<f64>,
    yb: DVector<f64>,
    rhs: DVector<f64>,
    iterations: usize,
}

enum Step {
    Optimal,
    Unbounded(usize, DVector<f64>),
    Pivoted,
}

impl<'a> DualSimplex<'a> {
    fn new(lp: &'a DenseLp, opts: &SimplexOptions) -> Self {
        let (m, n) = (lp.n_rows(), lp.n_vars());
        let mut gs = lp.g.clone();
        let mut hs = lp.h.as_slice().to_vec();
        let mut scale = vec![1.0; m];
        for i in 0..m {
            let s = gs.row(i).amax();
            if s > 0.0 {
                scale[i] = s;
                gs.row_mut(i).scale_mut(1.0 / s);
                hs[i] /= s;
            }
        }
        let rhs = -&lp.c;
        let arts_sign = rhs.iter().map(|v| if *v < 0.0 { -1.0 } else { 1.0 }).collect();
        Self {
            lp,
            opts: *opts,
            scale,
            gs,
            hs,
            arts_sign,
            n,
            m,
            basis: Vec::new(),
            in_basis: vec![false; m + n],
            binv: DMatrix::identity(n, n),
            yb: DVector::zeros(n),
            rhs,
            iterations: 0,
        }
    }

    fn column(&self, j: usize) -> DVector<f64> {
        if j < self.m {
            self.gs.row(j).transpose()
        } else {
            let mut e = DVector::zeros(self.n);
            e[j - self.m] = self.arts_sign[j - self.m];
            e
        }
    }

    fn is_art(&self, j: usize) -> bool {
        j >= self.m
    }

    /// Slack-like starting basis: a singleton row `+-e_r` whose multiplier
    /// `-c_r / g` is nonnegative covers equality row `r`; other rows get an artificial.
    fn crash(&mut self) {
        let mut basis: Vec<usize> = (0..self.n).map(|r| self.m + r).collect();
        for i in 0..self.m {
            let row = self.gs.row(i);
            let nz: Vec<usize> = (0..self.n).filter(|&j| row[j] != 0.0).collect();
            if nz.len() != 1 {
                continue;
            }
            let r = nz[0];
            if !self.is_art(basis[r]) {
                continue;
            }
            if self.rhs[r] / row[r] >= 0.0 {
                basis[r] = i;
            }
        }
        self.basis = basis;
        self.refactor().expect("crash basis is diagonal");
    }

    fn refactor(&mut self) -> Result<()> {
        let mut b = DMatrix::zeros(self.n, self.n);
        for (k, &j) in self.basis.iter().enumerate() {
            b.set_column(k, &self.column(j));
        }
        self.binv = b
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular simplex basis".into()))?;
        self.yb = &self.binv * &self.rhs;
        for v in self.yb.iter_mut() {
            if *v < 0.0 && *v > -1e-11 {
                *v = 0.0;
            }
        }
        self.in_basis.iter_mut().for_each(|b| *b = false);
        for &j in &self.basis {
            self.in_basis[j] = true;
        }
        Ok(())
    }

    fn cost(&self, j: usize, phase1: bool) -> f64 {
        match (phase1, self.is_art(j)) {
            (true, true) => 1.0,
            (true, false) => 0.0,
            (false, true) => 0.0,
            (false, false) => self.hs[j],
        }
    }

    fn multipliers(&self, phase1: bool) -> DVector<f64> {
        let cb = DVector::from_iterator(self.n, self.basis.iter().map(|&j| self.cost(j, phase1)));
        self.binv.tr_mul(&cb)
    }

    fn step(&mut self, phase1: bool, bland: bool) -> Result<Step> {
        let pi = self.multipliers(phase1);
        // reduced costs of real columns: hs_j - gs_j . pi (scaled units);
        // optimality is judged on the unscaled value so the primal residual is absolute
        let red = &self.gs * &pi;
        let mut enter = None;
        let mut best = 0.0;
        for j in 0..self.m {
            if self.in_basis[j] {
                continue;
            }
            let rj = self.cost(j, phase1) - red[j];
            let thresh = if phase1 {
                -1e-12
            } else {
                -(0.1 * self.opts.feas_tol / self.scale[j]).min(1e-9)
            };
            if rj < thresh {
                if bland {
                    enter = Some(j);
                    break;
                }
                if rj < best {
                    best = rj;
                    enter = Some(j);
                }
            }
        }
        let Some(q) = enter else {
            return Ok(Step::Optimal);
        };
        let d = &self.binv * self.column(q);
        // Harris two-pass ratio test
        let ptol = self.opts.pivot_tol;
        let mut theta_max = f64::INFINITY;
        for k in 0..self.n {
            let art_at_zero = !phase1 && self.is_art(self.basis[k]);
            if art_at_zero && d[k].abs() > ptol {
                theta_max = 0.0;
                break;
            }
            if d[k] > ptol {
                theta_max = theta_max.min((self.yb[k].max(0.0) + 1e-12) / d[k]);
            }
        }
        if theta_max.is_infinite() {
            return Ok(Step::Unbounded(q, d));
        }
        let mut leave = None;
        let mut best_piv = 0.0;
        for k in 0..self.n {
            let art_at_zero = !phase1 && self.is_art(self.basis[k]);
            let eligible = if art_at_zero { d[k].abs() > ptol } else { d[k] > ptol };
            if !eligible {
                continue;
            }
            let ratio = if art_at_zero { 0.0 } else { self.yb[k].max(0.0) / d[k] };
            if ratio <= theta_max {
                let better = if bland {
                    leave.is_none_or(|l: usize| self.basis[k] < self.basis[l])
                } else {
                    d[k].abs() > best_piv
                };
                if better {
                    best_piv = d[k].abs();
                    leave = Some(k);
                }
            }
        }
        let Some(p) = leave else {
            return Ok(Step::Unbounded(q, d));
        };
        self.pivot(p, q, &d);
        Ok(Step::Pivoted)
    }

    fn pivot(&mut self, p: usize, q: usize, d: &DVector<f64>) {
        let theta = if self.is_art(self.basis[p]) && d[p] < 0.0 {
            0.0
        } else {
            self.yb[p].max(0.0) / d[p]
        };
        for k in 0..self.n {
            if k != p {
                self.yb[k] -= theta * d[k];
                if self.yb[k] < 0.0 && self.yb[k] > -1e-11 {
                    self.yb[k] = 0.0;
                }
            }
        }
        self.yb[p] = theta;
        let piv_row = self.binv.row(p) / d[p];
        for k in 0..self.n {
            if k != p {
                let f = d[k];
                if f != 0.0 {
                    for c in 0..self.n {
                        self.binv[(k, c)] -= f * piv_row[c];
                    }
                }
            }
        }
        self.binv.set_row(p, &piv_row);
        self.in_basis[self.basis[p]] = false;
        self.in_basis[q] = true;
        self.basis[p] = q;
        self.iterations += 1;
    }

    fn objective(&self, phase1: bool) -> f64 {
        self.basis
            .iter()
            .zip(self.yb.iter())
            .map(|(&j, y)| self.cost(j, phase1) * y)
            .sum()
    }

    fn iterate(&mut self, phase1: bool) -> Result<Option<(usize, DVector<f64>)>> {
        let max_iter = if self.opts.max_iter > 0 {
            self.opts.max_iter
        } else {
            50 * (self.m + self.n) + 1000
        };
        let mut stall = 0usize;
        let mut last = self.objective(phase1);
        let mut since_refactor = 0usize;
        loop {
            if self.iterations >= max_iter {
                return Err(Error::Numerical(format!(
                    "simplex iteration limit {max_iter} reached"
                )));
            }
            match self.step(phase1, stall > 50)? {
                Step::Optimal => return Ok(None),
                Step::Unbounded(q, d) => return Ok(Some((q, d))),
                Step::Pivoted => {}
            }
            since_refactor += 1;
            if since_refactor >= 40 {
                self.refactor()?;
                since_refactor = 0;
            }
            let obj = self.objective(phase1);
            if obj < last - 1e-14 * (1.0 + last.abs()) {
                stall = 0;
                last = obj;
            } else {
                stall += 1;
            }
        }
    }

    fn run(mut self) -> Result<LpOutcome> {
        self.crash();
        if self.basis.iter().any(|&j| self.is_art(j)) {
            if self.iterate(true)?.is_some() {
                return Err(Error::Numerical("phase one cannot be unbounded".into()));
            }
            self.refactor()?;
            let infeas = self.objective(true);
            let scale = 1.0 + self.rhs.amax();
            if infeas > 1e-9 * scale {
                return Ok(LpOutcome::Unbounded);
            }
            self.drive_out_artificials()?;
        }
        if let Some((q, d)) = self.iterate(false)? {
            return Ok(LpOutcome::Infeasible { farkas: self.farkas(q, &d) });
        }
        self.refactor()?;
        self.finish()
    }

    fn drive_out_artificials(&mut self) -> Result<()> {
        for p in 0..self.n {
            if !self.is_art(self.basis[p]) {
                continue;
            }
            let row = self.binv.row(p).clone_owned();
            let mut best = (0.0, None);
            for j in 0..self.m {
                if self.in_basis[j] {
                    continue;
                }
                let v = row.dot(&self.gs.row(j)).abs();
                if v > best.0 {
                    best = (v, Some(j));
                }
            }
            if let (v, Some(j)) = best {
                if v > 1e-7 {
                    let d = &self.binv * self.column(j);
                    self.pivot(p, j, &d);
                }
            }
        }
        self.refactor()
    }

    fn farkas(&self, q: usize, d: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.m);
        y[q] = 1.0 / self.scale[q];
        for (k, &j) in self.basis.iter().enumerate() {
            if j < self.m {
                y[j] = (-d[k]).max(0.0) / self.scale[j];
            }
        }
        let norm = y.amax();
        if norm > 0.0 {
            y /= norm;
        }
        y
    }

    fn finish(self) -> Result<LpOutcome> {
        let x = self.multipliers(false);
        let mut duals = DVector::zeros(self.m);
        for (k, &j) in self.basis.iter().enumerate() {
            if j < self.m {
                duals[j] = self.yb[k].max(0.0) / self.scale[j];
            }
        }
        let (viol, _) = self.lp.max_violation(&x);
        Ok(LpOutcome::Optimal(LpSolution {
            objective: self.lp.c.dot(&x),
            duals,
            max_violation: viol.max(0.0),
            iterations: self.iterations,
            x,
        }))
    }
}
