//! Exact maximal output admissible sets for stable LTI plants and grid
//! comparison against a data-driven admissible set.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::REFERENCE_TOL;
use crate::domain::BoxDomain;
use crate::error::{Error, Result};
use crate::invariance::AdmissibleSet;
use crate::lp::{DenseLp, LpOutcome, SimplexOptions};
use crate::plants::{LtiParams, LtiPlant};

/// Tightening applied to the equilibrium admissibility check.
pub const FINITE_DETERMINATION_TIGHTENING: f64 = 1e-6;
/// Slack allowed when a row is declared redundant.
pub const REDUNDANCY_TOL: f64 = 1e-9;
/// Tolerance on halfspaces when testing grid points against the oracle.
pub const ORACLE_TOL: f64 = 1e-6;

/// `{x : H x <= h}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub h_matrix: DMatrix<f64>,
    pub h_vector: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolytopeRepr {
    #[serde(rename = "H")]
    h_rows: Vec<Vec<f64>>,
    h: Vec<f64>,
}

impl Serialize for Polytope {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let h_rows = (0..self.h_matrix.nrows())
            .map(|i| self.h_matrix.row(i).iter().cloned().collect())
            .collect();
        PolytopeRepr { h_rows, h: self.h_vector.iter().cloned().collect() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Polytope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = PolytopeRepr::deserialize(d)?;
        let dim = r.h_rows.first().map_or(0, Vec::len);
        if r.h_rows.len() != r.h.len() || r.h_rows.iter().any(|row| row.len() != dim) {
            return Err(serde::de::Error::custom("ragged polytope rows"));
        }
        let flat: Vec<f64> = r.h_rows.iter().flatten().cloned().collect();
        Polytope::new(DMatrix::from_row_slice(r.h.len(), dim, &flat), DVector::from_vec(r.h))
            .map_err(serde::de::Error::custom)
    }
}

impl Polytope {
    pub fn new(h_matrix: DMatrix<f64>, h_vector: DVector<f64>) -> Result<Self> {
        if h_matrix.nrows() != h_vector.len() {
            return Err(Error::Dimension(format!(
                "{} rows but {} offsets",
                h_matrix.nrows(),
                h_vector.len()
            )));
        }
        if h_matrix.iter().chain(h_vector.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("polytope entries must be finite".into()));
        }
        Ok(Self { h_matrix, h_vector })
    }

    /// `|x_i| <= bound` on one coordinate of an `n`-dimensional state.
    pub fn coordinate_band(n: usize, index: usize, bound: f64) -> Self {
        let mut h = DMatrix::zeros(2, n);
        h[(0, index)] = 1.0;
        h[(1, index)] = -1.0;
        Self { h_matrix: h, h_vector: DVector::from_element(2, bound) }
    }

    /// The canonical empty set `{x : 0 <= -1}`.
    pub fn empty(n: usize) -> Self {
        Self { h_matrix: DMatrix::zeros(1, n), h_vector: DVector::from_element(1, -1.0) }
    }

    pub fn dim(&self) -> usize {
        self.h_matrix.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.h_matrix.nrows()
    }

    /// Largest `H_i x - h_i`.
    pub fn max_residual(&self, x: &[f64]) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.n_rows() {
            let mut s = -self.h_vector[i];
            for (j, xj) in x.iter().enumerate() {
                s += self.h_matrix[(i, j)] * xj;
            }
            worst = worst.max(s);
        }
        worst
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.max_residual(x) <= tol
    }

    /// `max a.x` over the polytope; `None` when unbounded or empty.
    pub fn support(&self, a: &DVector<f64>) -> Result<Option<f64>> {
        let lp = DenseLp::new(-a.clone(), self.h_matrix.clone(), self.h_vector.clone())?;
        let opts = SimplexOptions { lexicographic: false, ..Default::default() };
        Ok(match lp.solve(&opts)? {
            LpOutcome::Optimal(s) => Some(-s.objective),
            _ => None,
        })
    }

    pub fn is_empty(&self) -> Result<bool> {
        let lp = DenseLp::new(
            DVector::zeros(self.dim()),
            self.h_matrix.clone(),
            self.h_vector.clone(),
        )?;
        Ok(matches!(lp.solve(&SimplexOptions::default())?, LpOutcome::Infeasible { .. }))
    }

    /// Drops rows implied by the others.
    pub fn remove_redundant(&self) -> Result<Self> {
        let mut keep: Vec<usize> = (0..self.n_rows()).collect();
        let mut i = 0;
        while i < keep.len() {
            let others: Vec<usize> = keep.iter().cloned().filter(|&k| k != keep[i]).collect();
            let sub = self.select(&others);
            let row = self.h_matrix.row(keep[i]).transpose();
            let bound = self.h_vector[keep[i]];
            match sub.support(&row)? {
                Some(v) if v <= bound + REDUNDANCY_TOL * bound.abs().max(1.0) => {
                    keep.remove(i);
                }
                _ => i += 1,
            }
        }
        Ok(self.select(&keep))
    }

    fn select(&self, rows: &[usize]) -> Self {
        Self {
            h_matrix: self.h_matrix.select_rows(rows.iter()),
            h_vector: self.h_vector.select_rows(rows.iter()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoasResult {
    pub r_bar: f64,
    pub polytope: Polytope,
    pub x_e: Vec<f64>,
    /// Largest power of `A_d` examined.
    pub iterations: usize,
    pub empty: bool,
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Maximal positively invariant subset of `constraints` for
/// `x+ = A_d x + B_d r_bar`, built by stacking `H A^k` until every new row is
/// implied by the rows already present.
pub fn maximal_output_admissible(
    a_d: &DMatrix<f64>,
    b_d: &DVector<f64>,
    r_bar: f64,
    constraints: &Polytope,
) -> Result<MoasResult> {
    let n = a_d.nrows();
    if !a_d.is_square() || b_d.len() != n || constraints.dim() != n {
        return Err(Error::Dimension("inconsistent system and constraint sizes".into()));
    }
    let rho = spectral_radius(a_d);
    if !(rho < 1.0) {
        return Err(Error::InvalidParameter(format!("A_d is not Schur stable (radius {rho})")));
    }
    let i_minus_a = DMatrix::identity(n, n) - a_d;
    let x_e = i_minus_a
        .lu()
        .solve(&(b_d * r_bar))
        .ok_or_else(|| Error::Numerical("I - A_d is singular".into()))?;
    let h = &constraints.h_matrix;
    let h_shift = &constraints.h_vector - h * &x_e;
    let tight = &constraints.h_vector * (1.0 - FINITE_DETERMINATION_TIGHTENING);
    let admissible = (0..h.nrows()).all(|i| (h.row(i) * &x_e)[0] <= tight[i]);
    if !admissible {
        return Ok(MoasResult {
            r_bar,
            polytope: Polytope::empty(n),
            x_e: x_e.iter().cloned().collect(),
            iterations: 0,
            empty: true,
        });
    }

    let mut rows: Vec<DVector<f64>> = (0..h.nrows()).map(|i| h.row(i).transpose()).collect();
    let mut rhs: Vec<f64> = h_shift.iter().cloned().collect();
    let mut hak = h.clone();
    let mut k = 0;
    let max_k = 10_000;
    loop {
        k += 1;
        if k > max_k {
            return Err(Error::Numerical("maximal admissible set did not terminate".into()));
        }
        hak = &hak * a_d;
        let current = stack(&rows, &rhs, n);
        let mut added = Vec::new();
        for i in 0..hak.nrows() {
            let row = hak.row(i).transpose();
            let bound = h_shift[i];
            match current.support(&row)? {
                Some(v) if v <= bound + REDUNDANCY_TOL * bound.abs().max(1.0) => {}
                _ => added.push((row, bound)),
            }
        }
        if added.is_empty() {
            break;
        }
        for (row, b) in added {
            rows.push(row);
            rhs.push(b);
        }
    }
    // back to original coordinates: H' (x - x_e) <= h'  <=>  H' x <= h' + H' x_e
    let shifted = stack(&rows, &rhs, n);
    let offset = &shifted.h_vector + &shifted.h_matrix * &x_e;
    Ok(MoasResult {
        r_bar,
        polytope: Polytope::new(shifted.h_matrix, offset)?,
        x_e: x_e.iter().cloned().collect(),
        iterations: k,
        empty: false,
    })
}

fn stack(rows: &[DVector<f64>], rhs: &[f64], n: usize) -> Polytope {
    let mut m = DMatrix::zeros(rows.len(), n);
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).copy_from(&r.transpose());
    }
    Polytope { h_matrix: m, h_vector: DVector::from_column_slice(rhs) }
}

/// Oracle sets for the second-order LTI plant with `|x1| <= 1`, one per reference.
pub fn lti_oracle(params: &LtiParams, references: &[f64]) -> Result<Vec<MoasResult>> {
    let plant = LtiPlant::new(*params)?;
    let a = DMatrix::from_iterator(2, 2, plant.ad.iter().cloned());
    let b = DVector::from_iterator(2, plant.bd.iter().cloned());
    let cons = Polytope::coordinate_band(2, 0, 1.0);
    references
        .par_iter()
        .map(|&r| maximal_output_admissible(&a, &b, r, &cons))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolytopeProbe {
    pub n_members: usize,
    pub n_violations: usize,
    pub worst_residual: f64,
}

/// Steps `n` random members once and counts successors outside the polytope.
/// Members are drawn from the polytope's bounding box clipped to `region`.
pub fn probe_polytope_invariance(
    moas: &MoasResult,
    a_d: &DMatrix<f64>,
    b_d: &DVector<f64>,
    region: &BoxDomain,
    n: usize,
    seed: u64,
) -> Result<PolytopeProbe> {
    if moas.empty {
        return Ok(PolytopeProbe { n_members: 0, n_violations: 0, worst_residual: f64::NEG_INFINITY });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &moas.polytope;
    let mut lower = region.lower.clone();
    let mut upper = region.upper.clone();
    for k in 0..region.dim() {
        let mut e = DVector::zeros(region.dim());
        e[k] = 1.0;
        if let Some(hi) = p.support(&e)? {
            upper[k] = upper[k].min(hi);
        }
        e[k] = -1.0;
        if let Some(lo) = p.support(&e)? {
            lower[k] = lower[k].max(-lo);
        }
    }
    if lower.iter().zip(&upper).any(|(l, u)| l > u) {
        return Err(Error::Numerical("polytope does not meet the region".into()));
    }
    let mut rep = PolytopeProbe { n_members: 0, n_violations: 0, worst_residual: f64::NEG_INFINITY };
    let mut draws = 0usize;
    while rep.n_members < n {
        draws += 1;
        if draws > 1000 * n.max(1) {
            return Err(Error::Numerical("polytope occupies too little of the region".into()));
        }
        let x: Vec<f64> =
            (0..region.dim()).map(|k| rng.gen_range(lower[k]..=upper[k])).collect();
        if !p.contains(&x, 0.0) {
            continue;
        }
        rep.n_members += 1;
        let xv = DVector::from_column_slice(&x);
        let next = a_d * xv + b_d * moas.r_bar;
        let res = p.max_residual(next.as_slice());
        rep.worst_residual = rep.worst_residual.max(res);
        if res > 1e-9 {
            rep.n_violations += 1;
        }
    }
    Ok(rep)
}

/// First step at which `|x_index| > bound` under constant `r`, within `horizon`.
pub fn first_violation(
    a_d: &DMatrix<f64>,
    b_d: &DVector<f64>,
    r: f64,
    x0: &[f64],
    index: usize,
    bound: f64,
    horizon: usize,
) -> Option<usize> {
    let mut x = DVector::from_column_slice(x0);
    for k in 0..=horizon {
        if x[index].abs() > bound {
            return Some(k);
        }
        x = a_d * &x + b_d * r;
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub r_bar: f64,
    pub n_data: usize,
    pub n_oracle: usize,
    pub n_both: usize,
    pub false_positives: usize,
    pub worst_false_positive: Option<Vec<f64>>,
}

impl ReferenceComparison {
    pub fn coverage(&self) -> Option<f64> {
        (self.n_oracle > 0).then(|| self.n_data as f64 / self.n_oracle as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub grid_shape: Vec<usize>,
    pub region: BoxDomain,
    pub per_reference: Vec<ReferenceComparison>,
    pub false_positives: usize,
    pub coverage: f64,
}

impl ComparisonReport {
    fn from_rows(region: &BoxDomain, shape: Vec<usize>, rows: Vec<ReferenceComparison>) -> Self {
        let fp = rows.iter().map(|r| r.false_positives).sum();
        let data: usize = rows.iter().map(|r| r.n_data).sum();
        let oracle: usize = rows.iter().map(|r| r.n_oracle).sum();
        let coverage = if oracle == 0 { 0.0 } else { data as f64 / oracle as f64 };
        Self { grid_shape: shape, region: region.clone(), per_reference: rows, false_positives: fp, coverage }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["r_bar", "n_data", "n_oracle", "n_both", "false_positives", "coverage"])?;
        for r in &self.per_reference {
            out.write_record([
                format!("{:?}", r.r_bar),
                r.n_data.to_string(),
                r.n_oracle.to_string(),
                r.n_both.to_string(),
                r.false_positives.to_string(),
                r.coverage().map_or(String::new(), |c| format!("{c:.6}")),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn matched_oracle<'a>(references: &[f64], oracle: &'a [MoasResult]) -> Result<Vec<&'a MoasResult>> {
    if references.len() != oracle.len() {
        return Err(Error::InvalidParameter(format!(
            "reference grids differ: {} vs {} references",
            references.len(),
            oracle.len()
        )));
    }
    references
        .iter()
        .map(|&r| {
            oracle
                .iter()
                .find(|o| (o.r_bar - r).abs() <= REFERENCE_TOL)
                .ok_or(Error::UnknownReference(r))
        })
        .collect()
}

/// Grid comparison where `member(i, g, x)` tests grid point `g` (at `x`)
/// against the candidate set for `references[i]`.
pub fn compare_membership<F>(
    references: &[f64],
    member: F,
    oracle: &[MoasResult],
    region: &BoxDomain,
    resolution: usize,
) -> Result<ComparisonReport>
where
    F: Fn(usize, usize, &[f64]) -> bool + Sync,
{
    let matched = matched_oracle(references, oracle)?;
    let grid = region.grid(resolution);
    let rows = references
        .par_iter()
        .enumerate()
        .map(|(i, &r)| {
            let o = matched[i];
            let mut row = ReferenceComparison {
                r_bar: r,
                n_data: 0,
                n_oracle: 0,
                n_both: 0,
                false_positives: 0,
                worst_false_positive: None,
            };
            let mut worst = f64::NEG_INFINITY;
            for (g, x) in grid.iter().enumerate() {
                let in_o = !o.empty && o.polytope.contains(x, ORACLE_TOL);
                let in_d = member(i, g, x);
                row.n_oracle += in_o as usize;
                row.n_data += in_d as usize;
                row.n_both += (in_o && in_d) as usize;
                if in_d && !in_o {
                    row.false_positives += 1;
                    let res = o.polytope.max_residual(x);
                    if res > worst {
                        worst = res;
                        row.worst_false_positive = Some(x.clone());
                    }
                }
            }
            row
        })
        .collect();
    Ok(ComparisonReport::from_rows(region, vec![resolution; region.dim()], rows))
}

/// Compares `adm` against per-reference oracle polytopes on a
/// `resolution^n` grid over `region`. Excluded references count as empty.
pub fn compare_admissible_sets(
    adm: &AdmissibleSet,
    oracle: &[MoasResult],
    region: &BoxDomain,
    resolution: usize,
) -> Result<ComparisonReport> {
    let mut refs: Vec<(f64, Option<usize>)> =
        adm.sets.iter().enumerate().map(|(i, s)| (s.r_bar, Some(i))).collect();
    refs.extend(adm.excluded.iter().map(|e| (e.r_bar, None)));
    refs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let references: Vec<f64> = refs.iter().map(|r| r.0).collect();
    let dict = &adm.dictionary;
    let grid = region.grid(resolution);
    let phis: Vec<Option<Vec<f64>>> = grid
        .par_iter()
        .map(|x| dict.eval_phi(x).ok().map(|p| p.as_slice().to_vec()))
        .collect();
    compare_membership(
        &references,
        |i, g, _| match (refs[i].1, &phis[g]) {
            (Some(s), Some(phi)) => adm.sets[s].contains_phi(dict, phi),
            _ => false,
        },
        oracle,
        region,
        resolution,
    )
}
