//! Fitted invariant sets, their union, and empirical invariance checks.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::REFERENCE_TOL;
use crate::domain::BoxDomain;
use crate::error::{Error, Result};
use crate::lift::Dictionary;
use crate::plants::Plant;
use crate::synthesis::{min_eigenvalue, FeasibilityReport, WBasis, EIG_TOL};

/// Absolute tolerance on `V` for membership.
pub const MEMBERSHIP_TOL: f64 = 1e-10;

/// Low-rank-plus-identity form of an LP certificate,
/// `P = kappa I + c_weight c c^T + sum_j weights_j w_j w_j^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PFactor {
    pub kappa: f64,
    pub c_weight: f64,
    pub weights: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

impl PFactor {
    pub fn from_basis(alpha: &DVector<f64>, wb: &WBasis) -> Self {
        let m = wb.n_w() as f64;
        let total: f64 = alpha.iter().sum();
        let w = wb.w_vectors();
        let mut weights = Vec::new();
        let mut vectors = Vec::new();
        for j in 0..wb.n_w() {
            if alpha[j] != 0.0 {
                weights.push((1.0 - wb.eta) * alpha[j]);
                vectors.push(w.column(j).iter().cloned().collect());
            }
        }
        Self {
            kappa: wb.eta * wb.lambda * total / m,
            c_weight: 1.0 - wb.eta * total / m,
            weights,
            vectors,
        }
    }

    pub fn dense(&self, c: &[f64]) -> DMatrix<f64> {
        let n = c.len();
        let cv = DVector::from_column_slice(c);
        let mut p = DMatrix::identity(n, n) * self.kappa + self.c_weight * &cv * cv.transpose();
        for (w, v) in self.weights.iter().zip(&self.vectors) {
            let v = DVector::from_column_slice(v);
            p += *w * &v * v.transpose();
        }
        p
    }

    fn quadratic(&self, c: &[f64], v: &[f64]) -> f64 {
        let norm2: f64 = v.iter().map(|a| a * a).sum();
        let cv: f64 = c.iter().zip(v).map(|(a, b)| a * b).sum();
        let mut out = self.kappa * norm2 + self.c_weight * cv * cv;
        for (w, u) in self.weights.iter().zip(&self.vectors) {
            let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            out += w * d * d;
        }
        out
    }
}

/// `O(r_bar) = {x : V(x) <= (1 - c^T phi(x_inf))^2}`, empty when `c^T phi(x_inf) > 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PISet {
    pub r_bar: f64,
    pub x_inf: Vec<f64>,
    pub c: Vec<f64>,
    pub lambda: f64,
    pub gamma: f64,
    #[serde(rename = "P", with = "row_major")]
    pub p_matrix: DMatrix<f64>,
    pub dict_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<PFactor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasibility_report: Option<FeasibilityReport>,
    #[serde(skip)]
    phi_inf: OnceLock<Vec<f64>>,
}

impl PartialEq for PISet {
    fn eq(&self, o: &Self) -> bool {
        self.r_bar == o.r_bar
            && self.x_inf == o.x_inf
            && self.c == o.c
            && self.lambda == o.lambda
            && self.gamma == o.gamma
            && self.p_matrix == o.p_matrix
            && self.dict_ref == o.dict_ref
            && self.factor == o.factor
    }
}

mod row_major {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().cloned().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("P must be square"));
        }
        Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }
}

impl PISet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        r_bar: f64,
        x_inf: Vec<f64>,
        c: Vec<f64>,
        lambda: f64,
        gamma: f64,
        p_matrix: DMatrix<f64>,
        dict: &Dictionary,
        factor: Option<PFactor>,
        feasibility_report: Option<FeasibilityReport>,
    ) -> Result<Self> {
        let set = Self {
            r_bar,
            x_inf,
            c,
            lambda,
            gamma,
            p_matrix,
            dict_ref: dict.id().to_string(),
            factor,
            feasibility_report,
            phi_inf: OnceLock::new(),
        };
        set.check_shape(dict)?;
        Ok(set)
    }

    /// Dimension and symmetry checks plus agreement of the stored factor with `P`.
    pub fn check_shape(&self, dict: &Dictionary) -> Result<()> {
        let n = dict.n_phi();
        if self.p_matrix.nrows() != n || self.c.len() != n || self.x_inf.len() != dict.state_dim() {
            return Err(Error::Dimension(format!(
                "set for r_bar = {} does not match the dictionary",
                self.r_bar
            )));
        }
        if self.p_matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite P".into()));
        }
        let scale = self.p_matrix.amax().max(1.0);
        let asym = (&self.p_matrix - self.p_matrix.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::Numerical(format!("P is not symmetric ({asym:.2e})")));
        }
        if let Some(f) = &self.factor {
            if f.vectors.iter().any(|v| v.len() != n) || f.vectors.len() != f.weights.len() {
                return Err(Error::Dimension("factor vectors do not match P".into()));
            }
            let gap = (f.dense(&self.c) - &self.p_matrix).amax();
            if gap > 1e-9 * scale {
                return Err(Error::Numerical(format!("factor disagrees with P by {gap:.2e}")));
            }
        }
        Ok(())
    }

    /// Spectral bounds `c c^T <= P <= lambda I` (tolerance `1e-9`).
    pub fn check_bounds(&self) -> (f64, f64, bool) {
        let n = self.c.len();
        let c = DVector::from_column_slice(&self.c);
        let lo = min_eigenvalue(&(&self.p_matrix - &c * c.transpose()));
        let hi = min_eigenvalue(&(DMatrix::identity(n, n) * self.lambda - &self.p_matrix));
        (lo, hi, lo >= -EIG_TOL && hi >= -EIG_TOL)
    }

    fn ensure_dict(&self, dict: &Dictionary) -> Result<()> {
        if dict.id() != self.dict_ref {
            return Err(Error::InvalidParameter(format!(
                "set was fitted with dictionary {} but {} was given",
                self.dict_ref,
                dict.id()
            )));
        }
        Ok(())
    }

    pub fn phi_inf(&self, dict: &Dictionary) -> Result<&[f64]> {
        self.ensure_dict(dict)?;
        if let Some(v) = self.phi_inf.get() {
            return Ok(v);
        }
        let v = dict.eval_phi(&self.x_inf)?.as_slice().to_vec();
        Ok(self.phi_inf.get_or_init(|| v))
    }

    /// `c^T phi(x_inf)`.
    pub fn g_inf(&self, dict: &Dictionary) -> Result<f64> {
        let p = self.phi_inf(dict)?;
        Ok(self.c.iter().zip(p).map(|(a, b)| a * b).sum())
    }

    /// Squared distance of the equilibrium to the constraint boundary,
    /// `(1 - c^T phi(x_inf))^2`, or `None` when the equilibrium is inadmissible.
    pub fn margin(&self, dict: &Dictionary) -> Result<Option<f64>> {
        let g = self.g_inf(dict)?;
        Ok((g <= 1.0).then_some((1.0 - g) * (1.0 - g)))
    }

    /// `V(x) = (phi(x) - phi(x_inf))^T P (phi(x) - phi(x_inf))`.
    pub fn lyapunov_value(&self, dict: &Dictionary, x: &[f64]) -> Result<f64> {
        self.ensure_dict(dict)?;
        let phi = dict.eval_phi(x)?;
        self.value_from_phi(dict, phi.as_slice())
    }

    /// `V` from a precomputed `phi(x)`.
    pub fn value_from_phi(&self, dict: &Dictionary, phi: &[f64]) -> Result<f64> {
        let pinf = self.phi_inf(dict)?;
        let v: Vec<f64> = phi.iter().zip(pinf).map(|(a, b)| a - b).collect();
        Ok(match &self.factor {
            Some(f) => f.quadratic(&self.c, &v).max(0.0),
            None => {
                let vv = DVector::from_vec(v);
                vv.dot(&(&self.p_matrix * &vv)).max(0.0)
            }
        })
    }

    pub fn contains(&self, dict: &Dictionary, x: &[f64]) -> bool {
        match dict.eval_phi(x) {
            Ok(phi) => self.contains_phi(dict, phi.as_slice()),
            Err(_) => false,
        }
    }

    pub fn contains_phi(&self, dict: &Dictionary, phi: &[f64]) -> bool {
        let Ok(Some(m)) = self.margin(dict) else {
            return false;
        };
        match self.value_from_phi(dict, phi) {
            Ok(v) => v <= m + MEMBERSHIP_TOL,
            Err(_) => false,
        }
    }

    /// Copy with a replaced `P` (factor dropped).
    pub fn with_p(&self, p: DMatrix<f64>) -> Self {
        Self {
            p_matrix: p,
            factor: None,
            feasibility_report: None,
            phi_inf: OnceLock::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub r_bar: f64,
    pub reason: String,
}

/// The admissible set: one invariant set per reference, all on one dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AdmissibleRepr")]
pub struct AdmissibleSet {
    pub dictionary: Dictionary,
    pub sets: Vec<PISet>,
    pub excluded: Vec<Exclusion>,
    /// Fitted without tightening (`epsilon_scale = 0`).
    pub nominal: bool,
}

#[derive(Deserialize)]
struct AdmissibleRepr {
    dictionary: Dictionary,
    sets: Vec<PISet>,
    #[serde(default)]
    excluded: Vec<Exclusion>,
    #[serde(default)]
    nominal: bool,
}

impl TryFrom<AdmissibleRepr> for AdmissibleSet {
    type Error = Error;

    fn try_from(r: AdmissibleRepr) -> Result<Self> {
        AdmissibleSet::new(r.dictionary, r.sets, r.excluded, r.nominal)
    }
}

impl AdmissibleSet {
    pub fn new(
        dictionary: Dictionary,
        mut sets: Vec<PISet>,
        mut excluded: Vec<Exclusion>,
        nominal: bool,
    ) -> Result<Self> {
        for s in &sets {
            if s.dict_ref != dictionary.id() {
                return Err(Error::InvalidParameter(format!(
                    "set for r_bar = {} uses another dictionary",
                    s.r_bar
                )));
            }
            s.check_shape(&dictionary)?;
        }
        sets.sort_by(|a, b| a.r_bar.total_cmp(&b.r_bar));
        if sets.windows(2).any(|w| w[1].r_bar - w[0].r_bar <= REFERENCE_TOL) {
            return Err(Error::InvalidData("duplicate reference in admissible set".into()));
        }
        excluded.sort_by(|a, b| a.r_bar.total_cmp(&b.r_bar));
        Ok(Self { dictionary, sets, excluded, nominal })
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn references(&self) -> Vec<f64> {
        self.sets.iter().map(|s| s.r_bar).collect()
    }

    pub fn find(&self, r_bar: f64) -> Option<&PISet> {
        self.sets.iter().find(|s| (s.r_bar - r_bar).abs() <= REFERENCE_TOL)
    }

    /// Every reference whose set contains `x`, ascending.
    pub fn admissible_references(&self, x: &[f64]) -> Vec<f64> {
        let Ok(phi) = self.dictionary.eval_phi(x) else {
            return Vec::new();
        };
        self.sets
            .iter()
            .filter(|s| s.contains_phi(&self.dictionary, phi.as_slice()))
            .map(|s| s.r_bar)
            .collect()
    }

    /// Membership in the union of all sets.
    pub fn ci_contains(&self, x: &[f64]) -> bool {
        let Ok(phi) = self.dictionary.eval_phi(x) else {
            return false;
        };
        self.sets.iter().any(|s| s.contains_phi(&self.dictionary, phi.as_slice()))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    /// Rows `(x1, x2, r_bar, V, inside)` over a grid for every set.
    pub fn write_containment_csv<W: std::io::Write>(&self, w: W, grid: &[Vec<f64>]) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let n = self.dictionary.state_dim();
        let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        header.extend(["r_bar".to_string(), "V".into(), "inside".into()]);
        out.write_record(&header)?;
        for x in grid {
            let phi = self.dictionary.eval_phi(x).ok();
            for s in &self.sets {
                let (v, inside) = match &phi {
                    Some(p) => (
                        s.value_from_phi(&self.dictionary, p.as_slice())?,
                        s.contains_phi(&self.dictionary, p.as_slice()),
                    ),
                    None => (f64::INFINITY, false),
                };
                let mut rec: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
                rec.push(format!("{:?}", s.r_bar));
                rec.push(format!("{v:?}"));
                rec.push((inside as u8).to_string());
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Violation threshold on `V(x+) - margin` used by the invariance probe.
pub const INVARIANCE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeStatus {
    Passed,
    Violated,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub r_bar: f64,
    pub status: ProbeStatus,
    pub n_probe: usize,
    pub n_members: usize,
    pub n_boundary: usize,
    pub n_violations: usize,
    /// Largest `V(x+) - margin` over all probes (negative when every successor is strictly inside).
    pub worst_overshoot: f64,
    pub worst_point: Option<Vec<f64>>,
}

/// Ray search from `x_inf` for points of the set near its boundary.
struct Prober<'a> {
    set: &'a PISet,
    dict: &'a Dictionary,
    margin: f64,
    widths: Vec<f64>,
    region: BoxDomain,
}

impl Prober<'_> {
    fn value(&self, x: &[f64]) -> Option<f64> {
        let phi = self.dict.eval_phi(x).ok()?;
        self.set.value_from_phi(self.dict, phi.as_slice()).ok()
    }

    /// Probes are confined to the plant's working domain.
    fn member(&self, x: &[f64]) -> bool {
        self.region.contains(x) && self.value(x).is_some_and(|v| v <= self.margin + MEMBERSHIP_TOL)
    }

    fn point(&self, dir: &[f64], s: f64) -> Vec<f64> {
        self.set
            .x_inf
            .iter()
            .zip(dir)
            .zip(&self.widths)
            .map(|((x, d), w)| x + s * d * w)
            .collect()
    }

    /// Largest member step before the first exit along `dir`.
    fn boundary(&self, dir: &[f64]) -> f64 {
        let mut lo = 0.0;
        let mut hi = 1e-3;
        let mut exited = false;
        for _ in 0..40 {
            if self.member(&self.point(dir, hi)) {
                lo = hi;
                hi *= 2.0;
            } else {
                exited = true;
                break;
            }
        }
        if !exited {
            return lo;
        }
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            if self.member(&self.point(dir, mid)) {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-9 * hi {
                break;
            }
        }
        lo
    }
}

/// Steps `n_probe` members of `set` once under `r = r_bar` and reports
/// successors that leave the set by more than [`INVARIANCE_TOL`]. About 80% of
/// the probes lie in the band `V in [0.8, 1] margin`. Probes are drawn from
/// the part of the set inside the plant's working domain.
pub fn validate_invariance(
    set: &PISet,
    dict: &Dictionary,
    plant: &dyn Plant,
    n_probe: usize,
    seed: u64,
) -> Result<InvarianceReport> {
    set.ensure_dict(dict)?;
    let empty = |n_members| InvarianceReport {
        r_bar: set.r_bar,
        status: ProbeStatus::Inconclusive,
        n_probe,
        n_members,
        n_boundary: 0,
        n_violations: 0,
        worst_overshoot: f64::NEG_INFINITY,
        worst_point: None,
    };
    let Some(margin) = set.margin(dict)? else {
        return Ok(empty(0));
    };
    let region = plant.initial_domain();
    let prober = Prober { set, dict, margin, widths: region.widths(), region };
    let dim = dict.state_dim();
    let results: Vec<Option<(bool, f64, Vec<f64>)>> = (0..n_probe)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let x = if i == 0 {
                set.x_inf.clone()
            } else {
                let mut dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                dir.iter_mut().for_each(|v| *v /= n);
                let sb = prober.boundary(&dir);
                if rng.gen_bool(0.8) {
                    let s = sb * rng.gen_range(0.97..=1.0);
                    let cand = prober.point(&dir, s);
                    match prober.value(&cand) {
                        Some(v) if v >= 0.8 * margin && v <= margin + MEMBERSHIP_TOL => cand,
                        _ => prober.point(&dir, sb),
                    }
                } else {
                    prober.point(&dir, sb * rng.gen_range(0.0..=1.0))
                }
            };
            if !prober.member(&x) {
                return None;
            }
            let v = prober.value(&x)?;
            let boundary = v >= 0.8 * margin;
            let next = plant.step(&x, set.r_bar).ok();
            let overshoot = next
                .as_deref()
                .and_then(|xn| prober.value(xn))
                .map_or(f64::INFINITY, |vn| vn - margin);
            Some((boundary, overshoot, x))
        })
        .collect();
    let mut report = empty(0);
    for (boundary, overshoot, x) in results.into_iter().flatten() {
        report.n_members += 1;
        report.n_boundary += boundary as usize;
        if overshoot > INVARIANCE_TOL {
            report.n_violations += 1;
        }
        if overshoot > report.worst_overshoot {
            report.worst_overshoot = overshoot;
            report.worst_point = Some(x);
        }
    }
    report.status = if report.n_members * 10 < n_probe {
        ProbeStatus::Inconclusive
    } else if report.n_violations > 0 {
        ProbeStatus::Violated
    } else {
        ProbeStatus::Passed
    };
    Ok(report)
}
