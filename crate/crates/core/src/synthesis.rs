//! Lifted-quadratic certificate synthesis through the LP relaxation.
//!
//! The certificate matrix is restricted to `P = c c^T + sum_j alpha_j W_j`
//! with `0 < W_j <= (lambda I - c c^T) / n_w` and `alpha in [0, 1]^{n_w}`, so
//! the semidefinite bounds hold automatically and the sample-wise decrease
//! conditions become linear in `alpha`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    estimate_equilibrium, estimate_lipschitz_f, extract_pairs, sample_density, SamplePairs,
    TrajectorySet,
};
use crate::error::{Error, Result};
use crate::invariance::{AdmissibleSet, Exclusion, PFactor, PISet};
use crate::lift::{Dictionary, LipschitzBound};
use crate::lp::{DenseLp, LpOutcome, SimplexOptions};

/// Regularization weight mixed into each basis direction.
pub const BASIS_ETA: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub n_w: usize,
    /// Multiplier on the tightening terms; 0 gives the nominal program.
    pub epsilon_scale: f64,
    /// Drift margin of the contraction condition. Metadata only.
    pub beta_margin: f64,
    /// Basis directions that may be swapped for dual-guided ones when the
    /// spectral basis leaves the LP infeasible.
    pub max_refinements: usize,
    pub lf_safety: f64,
    pub density_resolution: usize,
    pub feas_tol: f64,
    pub opt_tol: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            lambda: 10.0,
            n_w: 24,
            epsilon_scale: 1.0,
            beta_margin: 0.0,
            max_refinements: 8,
            lf_safety: 1.2,
            density_resolution: 100,
            feas_tol: 1e-8,
            opt_tol: 1e-9,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma = {} outside [0, 1]", self.gamma));
        }
        if !(0.0..=self.gamma).contains(&self.beta_margin) {
            return bad(format!("beta_margin = {} outside [0, gamma]", self.beta_margin));
        }
        if self.n_w == 0 {
            return bad("n_w must be at least 1".into());
        }
        if !(self.epsilon_scale >= 0.0 && self.epsilon_scale.is_finite()) {
            return bad(format!("epsilon_scale = {} must be nonnegative", self.epsilon_scale));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return bad(format!("lambda = {} must be positive", self.lambda));
        }
        if self.max_refinements >= self.n_w && self.n_w > 1 {
            return bad("max_refinements must leave at least one spectral direction".into());
        }
        if self.lf_safety < 1.0 {
            return bad(format!("lf_safety = {} < 1", self.lf_safety));
        }
        if !(self.feas_tol > 0.0 && self.opt_tol > 0.0) {
            return bad("solver tolerances must be positive".into());
        }
        Ok(())
    }

    pub fn is_nominal(&self) -> bool {
        self.epsilon_scale == 0.0
    }

    fn simplex(&self) -> SimplexOptions {
        SimplexOptions {
            feas_tol: self.feas_tol,
            opt_tol: self.opt_tol,
            ..SimplexOptions::default()
        }
    }
}

/// Per-sample robustness margin
/// `2 L_phi delta (L_f |phi_k+| + |phi_k|) + (L_phi L_f delta)^2`.
pub fn tightening(
    varphi_k: &DVector<f64>,
    varphi_k_plus: &DVector<f64>,
    l_phi: f64,
    l_f: f64,
    delta: f64,
) -> Result<f64> {
    tightening_from_norms(varphi_k.norm(), varphi_k_plus.norm(), l_phi, l_f, delta)
}

pub fn tightening_from_norms(
    norm_k: f64,
    norm_k_plus: f64,
    l_phi: f64,
    l_f: f64,
    delta: f64,
) -> Result<f64> {
    let vals = [norm_k, norm_k_plus, l_phi, l_f, delta];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite tightening input".into()));
    }
    if l_phi < 0.0 || l_f < 0.0 || delta < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "negative constant (L_phi = {l_phi}, L_f = {l_f}, delta = {delta})"
        )));
    }
    let q = l_phi * l_f * delta;
    Ok(2.0 * l_phi * delta * (l_f * norm_k_plus + norm_k) + q * q)
}

/// Lifted sample pairs. The matrices `psi_k` are kept implicit through the
/// identity `<W, psi_k> = phi_k+^T W phi_k+ - (1 - gamma) phi_k^T W phi_k`.
#[derive(Debug, Clone)]
pub struct LiftedSamples {
    /// Row `k` is `phi(x_k) - phi(x_inf)`.
    pub varphi: DMatrix<f64>,
    pub varphi_plus: DMatrix<f64>,
    pub eps: Vec<f64>,
    pub gamma: f64,
}

impl LiftedSamples {
    pub fn n_s(&self) -> usize {
        self.varphi.nrows()
    }

    pub fn n_phi(&self) -> usize {
        self.varphi.ncols()
    }

    pub fn varphi_k(&self, k: usize) -> DVector<f64> {
        self.varphi.row(k).transpose()
    }

    pub fn varphi_k_plus(&self, k: usize) -> DVector<f64> {
        self.varphi_plus.row(k).transpose()
    }

    /// Explicit `psi_k`.
    pub fn psi(&self, k: usize) -> DMatrix<f64> {
        let a = self.varphi_k_plus(k);
        let b = self.varphi_k(k);
        &a * a.transpose() - (1.0 - self.gamma) * &b * b.transpose()
    }

    /// `<M, psi_k>` for a symmetric `M`.
    pub fn inner(&self, k: usize, m: &DMatrix<f64>) -> f64 {
        let a = self.varphi_k_plus(k);
        let b = self.varphi_k(k);
        a.dot(&(m * &a)) - (1.0 - self.gamma) * b.dot(&(m * &b))
    }
}

pub fn lift_samples(
    sp: &SamplePairs,
    dict: &Dictionary,
    x_inf: &[f64],
    cfg: &SynthesisConfig,
    l_phi: f64,
    l_f: f64,
    delta: f64,
) -> Result<LiftedSamples> {
    let n = dict.n_phi();
    let phi_inf = dict.eval_phi(x_inf)?;
    let mut varphi = DMatrix::zeros(sp.n_s(), n);
    let mut varphi_plus = DMatrix::zeros(sp.n_s(), n);
    let mut eps = Vec::with_capacity(sp.n_s());
    let mut buf = vec![0.0; n];
    for (k, (x, xp)) in sp.pairs().enumerate() {
        dict.eval_phi_into(x, &mut buf)?;
        for i in 0..n {
            varphi[(k, i)] = buf[i] - phi_inf[i];
        }
        dict.eval_phi_into(xp, &mut buf)?;
        for i in 0..n {
            varphi_plus[(k, i)] = buf[i] - phi_inf[i];
        }
        let e = if cfg.epsilon_scale == 0.0 {
            0.0
        } else {
            cfg.epsilon_scale
                * tightening_from_norms(
                    varphi.row(k).norm(),
                    varphi_plus.row(k).norm(),
                    l_phi,
                    l_f,
                    delta,
                )?
        };
        eps.push(e);
    }
    Ok(LiftedSamples { varphi, varphi_plus, eps, gamma: cfg.gamma })
}

/// Uniform empirical measure `(1 / n_s) sum_k phi_k phi_k^T`.
pub fn assemble_psi_weight(ls: &LiftedSamples) -> Result<DMatrix<f64>> {
    if ls.n_s() == 0 {
        return Err(Error::Empty("no lifted samples".into()));
    }
    let mut psi = ls.varphi.tr_mul(&ls.varphi);
    psi /= ls.n_s() as f64;
    symmetrize(&mut psi);
    Ok(psi)
}

/// `c = e_1`, which reproduces the constraint function exactly because the
/// first dictionary element is `g`.
pub fn solve_c(dict: &Dictionary) -> Result<DVector<f64>> {
    if dict.n_phi() == 0 {
        return Err(Error::InvalidParameter("dictionary has no constraint element".into()));
    }
    let mut c = DVector::zeros(dict.n_phi());
    c[0] = 1.0;
    Ok(c)
}

/// `W_j = S^{1/2} ((1 - eta) u_j u_j^T + eta I) S^{1/2}` with
/// `S = (lambda I - c c^T) / M`, `M = n_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct WBasis {
    pub c: DVector<f64>,
    pub lambda: f64,
    pub eta: f64,
    /// Unit directions `u_j` as columns.
    pub directions: DMatrix<f64>,
    /// Number of spectral directions replaced by refinement (taken from the end).
    pub refined: usize,
}

impl WBasis {
    pub fn new(c: DVector<f64>, lambda: f64, eta: f64, directions: DMatrix<f64>) -> Result<Self> {
        if !(lambda > c.norm_squared()) {
            return Err(Error::InvalidParameter(format!(
                "lambda = {lambda} must exceed c^T c = {}",
                c.norm_squared()
            )));
        }
        if !(0.0 < eta && eta <= 1.0) {
            return Err(Error::InvalidParameter(format!("eta = {eta} outside (0, 1]")));
        }
        if directions.nrows() != c.len() || directions.ncols() == 0 {
            return Err(Error::Dimension("basis directions do not match c".into()));
        }
        Ok(Self { c, lambda, eta, directions, refined: 0 })
    }

    pub fn n_w(&self) -> usize {
        self.directions.ncols()
    }

    pub fn n_phi(&self) -> usize {
        self.c.len()
    }

    /// `S^{1/2} v` using the closed form
    /// `(sqrt(lambda) (I - c_hat c_hat^T) + sqrt(lambda - c^T c) c_hat c_hat^T) / sqrt(M)`.
    pub fn s_half_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = self.n_w() as f64;
        let cn2 = self.c.norm_squared();
        let sl = self.lambda.sqrt();
        let mut out = v * sl;
        if cn2 > 0.0 {
            let chat = &self.c / cn2.sqrt();
            let proj = chat.dot(v);
            out += &chat * ((self.lambda - cn2).sqrt() - sl) * proj;
        }
        out / m.sqrt()
    }

    pub fn s_half(&self) -> DMatrix<f64> {
        let n = self.n_phi();
        let mut s = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            s.set_column(i, &self.s_half_apply(&e));
        }
        s
    }

    /// `(lambda I - c c^T) / M`.
    pub fn s_matrix(&self) -> DMatrix<f64> {
        let n = self.n_phi();
        (DMatrix::identity(n, n) * self.lambda - &self.c * self.c.transpose()) / self.n_w() as f64
    }

    /// `w_j = S^{1/2} u_j`.
    pub fn w_vectors(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n_phi(), self.n_w());
        for j in 0..self.n_w() {
            w.set_column(j, &self.s_half_apply(&self.directions.column(j).into_owned()));
        }
        w
    }

    /// `S^{1/2} B S^{1/2}` for an arbitrary symmetric `B`.
    pub fn sandwich(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let s = self.s_half();
        &s * b * &s
    }

    pub fn w_matrix(&self, j: usize) -> DMatrix<f64> {
        let w = self.s_half_apply(&self.directions.column(j).into_owned());
        let mut out = (1.0 - self.eta) * &w * w.transpose() + self.eta * self.s_matrix();
        symmetrize(&mut out);
        out
    }

    pub fn w_list(&self) -> Vec<DMatrix<f64>> {
        (0..self.n_w()).map(|j| self.w_matrix(j)).collect()
    }
}

/// Spectral basis: the top `n_w` eigenvectors of `Psi` (canonical axes once
/// the spectrum is exhausted).
pub fn build_w_basis(
    c: &DVector<f64>,
    cfg: &SynthesisConfig,
    psi_weight: &DMatrix<f64>,
) -> Result<WBasis> {
    let n = c.len();
    if psi_weight.nrows() != n || psi_weight.ncols() != n {
        return Err(Error::Dimension("Psi does not match c".into()));
    }
    let eig = psi_weight.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut dirs = DMatrix::zeros(n, cfg.n_w);
    for j in 0..cfg.n_w {
        if j < n {
            let mut u = eig.eigenvectors.column(order[j]).into_owned();
            canonical_sign(&mut u);
            dirs.set_column(j, &u);
        } else {
            dirs[((j - n) % n, j)] = 1.0;
        }
    }
    WBasis::new(c.clone(), cfg.lambda, BASIS_ETA, dirs)
}

/// Fixes the sign of an eigenvector so results do not depend on the eigensolver's choice.
fn canonical_sign(u: &mut DVector<f64>) {
    let k = u.iamax();
    if u[k] < 0.0 {
        u.neg_mut();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub d: DVector<f64>,
    pub lower: f64,
    pub upper: f64,
}

impl LpProblem {
    pub fn n_s(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_w(&self) -> usize {
        self.a.ncols()
    }

    /// `A alpha + b`.
    pub fn residual(&self, alpha: &DVector<f64>) -> DVector<f64> {
        &self.a * alpha + &self.b
    }
}

/// `[A]_kj = <W_j, psi_k>`, `[b]_k = <c c^T, psi_k> - gamma + eps_k lambda`,
/// `[d]_j = <W_j, Psi>`.
pub fn assemble_lp(
    ls: &LiftedSamples,
    wb: &WBasis,
    psi_weight: &DMatrix<f64>,
    cfg: &SynthesisConfig,
) -> Result<LpProblem> {
    if ls.n_phi() != wb.n_phi() {
        return Err(Error::Dimension("lifted samples and basis differ in size".into()));
    }
    let (ns, nw) = (ls.n_s(), wb.n_w());
    let gamma = ls.gamma;
    let eta = wb.eta;
    let s_half = wb.s_half();
    // rows S^{1/2} phi_k
    let g = &ls.varphi * &s_half;
    let gp = &ls.varphi_plus * &s_half;
    let gu = &g * &wb.directions;
    let gpu = &gp * &wb.directions;
    let mut a = DMatrix::zeros(ns, nw);
    let mut b = DVector::zeros(ns);
    for k in 0..ns {
        let base = eta * (gp.row(k).norm_squared() - (1.0 - gamma) * g.row(k).norm_squared());
        for j in 0..nw {
            a[(k, j)] = (1.0 - eta) * (gpu[(k, j)].powi(2) - (1.0 - gamma) * gu[(k, j)].powi(2)) + base;
        }
        let cp = wb.c.dot(&ls.varphi_plus.row(k).transpose());
        let cm = wb.c.dot(&ls.varphi.row(k).transpose());
        b[k] = cp * cp - (1.0 - gamma) * cm * cm - gamma + ls.eps[k] * cfg.lambda;
    }
    let h = &s_half * psi_weight * &s_half;
    let trace = h.trace();
    let d = DVector::from_fn(nw, |j, _| {
        let u = wb.directions.column(j);
        (1.0 - eta) * u.dot(&(&h * u)) + eta * trace
    });
    let lp = LpProblem { a, b, d, lower: 0.0, upper: 1.0 };
    if lp.a.iter().chain(lp.b.iter()).chain(lp.d.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite LP entries".into()));
    }
    Ok(lp)
}

/// `min d^T alpha  s.t.  A alpha + b <= 0, 0 <= alpha <= 1`.
pub fn solve_lp(lp: &LpProblem) -> Result<DVector<f64>> {
    solve_lp_with(lp, &SynthesisConfig::default().simplex())
}

pub fn solve_lp_with(lp: &LpProblem, opts: &SimplexOptions) -> Result<DVector<f64>> {
    // rows at the equilibrium are zero up to rounding; a slack well inside
    // the acceptance tolerance keeps them from reading as infeasible
    match solve_relaxed(lp, opts, 0.1 * opts.feas_tol)? {
        Some(alpha) => Ok(alpha),
        None => {
            let mm = min_max_violation(lp, opts)?;
            if mm.t <= opts.feas_tol {
                let slack = mm.t.max(0.0) + 0.1 * (opts.feas_tol - mm.t.max(0.0));
                if let Some(alpha) = solve_relaxed(lp, opts, slack)? {
                    return Ok(alpha);
                }
            }
            Err(Error::Infeasible { worst_row: mm.worst_row, violation: mm.t })
        }
    }
}

/// Solves with every row relaxed by `slack`; `None` when still infeasible.
fn solve_relaxed(lp: &LpProblem, opts: &SimplexOptions, slack: f64) -> Result<Option<DVector<f64>>> {
    let n = lp.n_w();
    let lo = vec![lp.lower; n];
    let hi = vec![lp.upper; n];
    let rhs = (-&lp.b).add_scalar(slack);
    let (dense, _) = DenseLp::boxed(lp.d.clone(), &lp.a, &rhs, &lo, &hi, 0.1 * opts.feas_tol)?;
    match dense.solve(opts)? {
        LpOutcome::Optimal(sol) => {
            let alpha = sol.x.map(|v| v.clamp(lp.lower, lp.upper));
            let (viol, row) = max_entry(&lp.residual(&alpha));
            if viol > opts.feas_tol {
                return Err(Error::Numerical(format!(
                    "LP solution violates row {row} by {viol:.3e}"
                )));
            }
            Ok(Some(alpha))
        }
        LpOutcome::Infeasible { .. } => Ok(None),
        LpOutcome::Unbounded => Err(Error::Numerical("boxed LP reported unbounded".into())),
    }
}

/// Result of `min t  s.t.  A alpha + b <= t, 0 <= alpha <= 1`.
#[derive(Debug, Clone)]
pub struct MinMaxViolation {
    pub t: f64,
    pub alpha: DVector<f64>,
    pub worst_row: usize,
    /// Multipliers of the sample rows.
    pub weights: DVector<f64>,
}

pub fn min_max_violation(lp: &LpProblem, opts: &SimplexOptions) -> Result<MinMaxViolation> {
    let (ns, nw) = (lp.n_s(), lp.n_w());
    let m = ns + 2 * nw;
    let mut g = DMatrix::zeros(m, nw + 1);
    let mut h = DVector::zeros(m);
    for k in 0..ns {
        for j in 0..nw {
            g[(k, j)] = lp.a[(k, j)];
        }
        g[(k, nw)] = -1.0;
        h[k] = -lp.b[k];
    }
    for j in 0..nw {
        g[(ns + 2 * j, j)] = 1.0;
        h[ns + 2 * j] = lp.upper;
        g[(ns + 2 * j + 1, j)] = -1.0;
        h[ns + 2 * j + 1] = -lp.lower;
    }
    let mut c = DVector::zeros(nw + 1);
    c[nw] = 1.0;
    let dense = DenseLp::new(c, g, h)?;
    let inner = SimplexOptions { lexicographic: false, ..*opts };
    match dense.solve(&inner)? {
        LpOutcome::Optimal(sol) => {
            let alpha = sol.x.rows(0, nw).map(|v| v.clamp(lp.lower, lp.upper));
            let (t, worst_row) = max_entry(&lp.residual(&alpha));
            Ok(MinMaxViolation { t, alpha, worst_row, weights: sol.duals.rows(0, ns).into_owned() })
        }
        _ => Err(Error::Numerical("min-max violation LP did not solve".into())),
    }
}

fn max_entry(v: &DVector<f64>) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, x) in v.iter().enumerate() {
        if *x > best.0 {
            best = (*x, i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Largest `<P, psi_k> - (gamma - eps_k lambda)`.
    pub worst_decrease: f64,
    pub worst_row: usize,
    pub min_eig_lower: f64,
    pub min_eig_upper: f64,
    pub passed: bool,
    /// Per-row slack `gamma - eps_k lambda - <P, psi_k>` (omitted from bundles).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slacks: Vec<f64>,
}

impl FeasibilityReport {
    pub fn without_slacks(&self) -> Self {
        Self { slacks: Vec::new(), ..self.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub p_matrix: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub objective: f64,
    pub factor: PFactor,
    pub feasibility_report: Option<FeasibilityReport>,
}

/// `P = c c^T + sum_j alpha_j W_j` and the cost `<P, Psi>`.
pub fn recover_p(alpha: &DVector<f64>, wb: &WBasis, psi_weight: &DMatrix<f64>) -> Result<SynthesisResult> {
    if alpha.len() != wb.n_w() {
        return Err(Error::Dimension("alpha does not match the basis".into()));
    }
    let factor = PFactor::from_basis(alpha, wb);
    let mut p = &wb.c * wb.c.transpose();
    for j in 0..wb.n_w() {
        if alpha[j] != 0.0 {
            p += alpha[j] * wb.w_matrix(j);
        }
    }
    symmetrize(&mut p);
    let objective = p.dot(psi_weight);
    Ok(SynthesisResult {
        p_matrix: p,
        alpha: alpha.clone(),
        objective,
        factor,
        feasibility_report: None,
    })
}

pub const EIG_TOL: f64 = 1e-9;
pub const DECREASE_TOL: f64 = 1e-8;

pub fn verify_sdp_feasibility(
    result: &SynthesisResult,
    ls: &LiftedSamples,
    c: &DVector<f64>,
    lambda: f64,
) -> Result<FeasibilityReport> {
    check_certificate(&result.p_matrix, ls, c, lambda)
}

/// Decrease rows and the bounds `c c^T <= P <= lambda I` for an arbitrary `P`.
pub fn check_certificate(
    p: &DMatrix<f64>,
    ls: &LiftedSamples,
    c: &DVector<f64>,
    lambda: f64,
) -> Result<FeasibilityReport> {
    let n = c.len();
    if p.nrows() != n || p.ncols() != n || ls.n_phi() != n {
        return Err(Error::Dimension("certificate dimensions differ".into()));
    }
    let pa = &ls.varphi_plus * p;
    let pb = &ls.varphi * p;
    let mut slacks = Vec::with_capacity(ls.n_s());
    let mut worst = (f64::NEG_INFINITY, 0);
    for k in 0..ls.n_s() {
        let v = pa.row(k).dot(&ls.varphi_plus.row(k))
            - (1.0 - ls.gamma) * pb.row(k).dot(&ls.varphi.row(k));
        let excess = v - (ls.gamma - ls.eps[k] * lambda);
        slacks.push(-excess);
        if excess > worst.0 {
            worst = (excess, k);
        }
    }
    let lower = min_eigenvalue(&(p - c * c.transpose()));
    let upper = min_eigenvalue(&(DMatrix::identity(n, n) * lambda - p));
    let worst_decrease = if ls.n_s() == 0 { f64::NEG_INFINITY } else { worst.0 };
    Ok(FeasibilityReport {
        worst_decrease,
        worst_row: worst.1,
        min_eig_lower: lower,
        min_eig_upper: upper,
        passed: worst_decrease <= DECREASE_TOL && lower >= -EIG_TOL && upper >= -EIG_TOL,
        slacks,
    })
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Data-derived constants of one reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisDiagnostics {
    pub r_bar: f64,
    pub n_s: usize,
    pub delta: f64,
    pub l_f: f64,
    pub l_phi: f64,
    pub equilibrium_residual: f64,
    pub g_inf: f64,
    pub refinements: usize,
    pub min_lift_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibilityDiagnostics {
    pub constants: SynthesisDiagnostics,
    pub worst_row: usize,
    pub violation: f64,
    pub worst_x: Vec<f64>,
    pub worst_x_plus: Vec<f64>,
}

impl fmt::Display for InfeasibilityDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "row {} violated by {:.3e} at x = {:?} (delta = {:.3e}, L_f = {:.3}, L_phi = {:.3}, {} refinements)",
            self.worst_row,
            self.violation,
            self.worst_x,
            self.constants.delta,
            self.constants.l_f,
            self.constants.l_phi,
            self.constants.refinements
        )
    }
}

/// Everything produced for one reference.
#[derive(Debug, Clone)]
pub struct PiSynthesis {
    pub set: PISet,
    pub result: SynthesisResult,
    pub lifted: LiftedSamples,
    pub basis: WBasis,
    pub lp: LpProblem,
    pub diagnostics: SynthesisDiagnostics,
}

pub fn synthesize_pi_set(
    ts: &TrajectorySet,
    r_bar: f64,
    dict: &Dictionary,
    cfg: &SynthesisConfig,
) -> Result<PISet> {
    let lb = dict.lipschitz_bound()?;
    synthesize_pi_set_detailed(ts, r_bar, dict, &lb, cfg).map(|s| s.set)
}

pub fn synthesize_pi_set_detailed(
    ts: &TrajectorySet,
    r_bar: f64,
    dict: &Dictionary,
    lb: &LipschitzBound,
    cfg: &SynthesisConfig,
) -> Result<PiSynthesis> {
    cfg.validate()?;
    let eq = estimate_equilibrium(ts, r_bar)?;
    let r_bar = ts.entry(r_bar)?.r_bar;
    let c = solve_c(dict)?;
    let phi_inf = dict.eval_phi(&eq.x_inf)?;
    let g_inf = c.dot(&phi_inf);
    if g_inf > 1.0 {
        return Err(Error::InadmissibleEquilibrium { r_bar, g_value: g_inf });
    }
    let sp = extract_pairs(ts, r_bar)?;
    if sp.n_s() == 0 {
        return Err(Error::Empty(format!("no sample pairs for r_bar = {r_bar}")));
    }
    let region = sp.bounding_box()?;
    let delta = sample_density(&sp, &region, cfg.density_resolution)?;
    let l_f = if sp.n_s() >= 2 {
        estimate_lipschitz_f(&sp, cfg.lf_safety).unwrap_or(0.0)
    } else {
        0.0
    };
    let ls = lift_samples(&sp, dict, &eq.x_inf, cfg, lb.l_phi, l_f, delta)?;
    let min_lift_norm = (0..ls.n_s())
        .map(|k| ls.varphi.row(k).norm())
        .fold(f64::INFINITY, f64::min);
    let mut diagnostics = SynthesisDiagnostics {
        r_bar,
        n_s: sp.n_s(),
        delta,
        l_f,
        l_phi: lb.l_phi,
        equilibrium_residual: eq.residual,
        g_inf,
        refinements: 0,
        min_lift_norm,
    };
    let psi = assemble_psi_weight(&ls)?;
    let mut basis = build_w_basis(&c, cfg, &psi)?;
    let opts = cfg.simplex();
    let limit = cfg.max_refinements.min(basis.n_w().saturating_sub(1));
    let (lp, alpha) = loop {
        let lp = assemble_lp(&ls, &basis, &psi, cfg)?;
        match solve_lp_with(&lp, &opts) {
            Ok(alpha) => break (lp, alpha),
            Err(Error::Infeasible { worst_row, violation }) => {
                let fail = |diagnostics: SynthesisDiagnostics, row: usize, v: f64| Error::SynthesisInfeasible {
                    r_bar,
                    diagnostics: Box::new(InfeasibilityDiagnostics {
                        constants: diagnostics,
                        worst_row: row,
                        violation: v,
                        worst_x: sp.x[row].clone(),
                        worst_x_plus: sp.x_plus[row].clone(),
                    }),
                };
                if basis.refined >= limit {
                    return Err(fail(diagnostics, worst_row, violation));
                }
                let mm = min_max_violation(&lp, &opts)?;
                match refine_direction(&ls, &basis, &mm.weights) {
                    Some(u) => {
                        let slot = basis.n_w() - 1 - basis.refined;
                        basis.directions.set_column(slot, &u);
                        basis.refined += 1;
                        diagnostics.refinements = basis.refined;
                        log::debug!(
                            "r_bar = {r_bar}: min-max violation {:.3e}, refined slot {slot}",
                            mm.t
                        );
                    }
                    None => return Err(fail(diagnostics, mm.worst_row, mm.t)),
                }
            }
            Err(e) => return Err(e),
        }
    };
    let mut result = recover_p(&alpha, &basis, &psi)?;
    let report = verify_sdp_feasibility(&result, &ls, &c, cfg.lambda)?;
    result.feasibility_report = Some(report.clone());
    let set = PISet::new(
        r_bar,
        eq.x_inf.clone(),
        c.as_slice().to_vec(),
        cfg.lambda,
        cfg.gamma,
        result.p_matrix.clone(),
        dict,
        Some(result.factor.clone()),
        Some(report.without_slacks()),
    )?;
    Ok(PiSynthesis { set, result, lifted: ls, basis, lp, diagnostics })
}

/// Unit direction minimizing `sum_k y_k <W(u), psi_k>`: the eigenvector of
/// the smallest eigenvalue of `S^{1/2} (sum_k y_k psi_k) S^{1/2}`, if negative.
fn refine_direction(ls: &LiftedSamples, wb: &WBasis, y: &DVector<f64>) -> Option<DVector<f64>> {
    let s = wb.s_half();
    let mut gp = &ls.varphi_plus * &s;
    let mut g = &ls.varphi * &s;
    for k in 0..ls.n_s() {
        let w = y[k].max(0.0).sqrt();
        gp.row_mut(k).scale_mut(w);
        g.row_mut(k).scale_mut(w);
    }
    let mut m = gp.tr_mul(&gp) - (1.0 - ls.gamma) * g.tr_mul(&g);
    symmetrize(&mut m);
    let eig = m.symmetric_eigen();
    let k = eig.eigenvalues.imin();
    if !(eig.eigenvalues[k] < 0.0) {
        return None;
    }
    let mut u = eig.eigenvectors.column(k).into_owned();
    canonical_sign(&mut u);
    Some(u)
}

/// Fits every reference; LP failures and inadmissible equilibria are recorded as exclusions.
pub fn synthesize_ci(ts: &TrajectorySet, dict: &Dictionary, cfg: &SynthesisConfig) -> Result<AdmissibleSet> {
    cfg.validate()?;
    if ts.entries.is_empty() {
        return Err(Error::Empty("dataset has no references".into()));
    }
    let lb = dict.lipschitz_bound()?;
    let outcomes: Vec<(f64, Result<PiSynthesis>)> = ts
        .entries
        .par_iter()
        .map(|e| (e.r_bar, synthesize_pi_set_detailed(ts, e.r_bar, dict, &lb, cfg)))
        .collect();
    let mut sets = Vec::new();
    let mut excluded = Vec::new();
    for (r_bar, out) in outcomes {
        match out {
            Ok(s) => sets.push(s.set),
            Err(e @ (Error::SynthesisInfeasible { .. } | Error::InadmissibleEquilibrium { .. } | Error::Empty(_))) => {
                log::info!("excluding r_bar = {r_bar}: {e}");
                excluded.push(Exclusion { r_bar, reason: e.to_string() });
            }
            Err(e) => return Err(e),
        }
    }
    if sets.is_empty() {
        return Err(Error::NoAdmissibleReference);
    }
    AdmissibleSet::new(dict.clone(), sets, excluded, cfg.is_nominal())
}

/// Problem data for an external conic solver. Each `psi_k` is stored through
/// its two rank-one factors, `psi_k = p p^T - (1 - gamma) q q^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpExport {
    pub r_bar: f64,
    pub psi_k: Vec<PsiFactors>,
    pub eps_k: Vec<f64>,
    pub gamma: f64,
    pub lambda: f64,
    pub c: Vec<f64>,
    pub psi_weight: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiFactors {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

impl SdpExport {
    pub fn new(r_bar: f64, ls: &LiftedSamples, c: &DVector<f64>, lambda: f64) -> Result<Self> {
        let psi = assemble_psi_weight(ls)?;
        Ok(Self {
            r_bar,
            psi_k: (0..ls.n_s())
                .map(|k| PsiFactors {
                    plus: ls.varphi_plus.row(k).iter().cloned().collect(),
                    minus: ls.varphi.row(k).iter().cloned().collect(),
                })
                .collect(),
            eps_k: ls.eps.clone(),
            gamma: ls.gamma,
            lambda,
            c: c.as_slice().to_vec(),
            psi_weight: psi.row_iter().map(|r| r.iter().cloned().collect()).collect(),
        })
    }
}
