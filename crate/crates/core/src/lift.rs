//! Dictionary lifting: the constraint function followed by a grid of
//! thin-plate radial basis functions.
//!
//! The first dictionary element is always the constraint function `g`, so
//! that `c = e_1` yields `c^T phi(x) = g(x)` and the admissible region
//! `{x : c^T phi(x) <= 1}` coincides with the state constraint set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::BoxDomain;
use crate::error::{Error, Result};

/// Scalar constraint function `g` with `X = {x : g(x) <= 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConstraintFn {
    /// `g(x) = (x[index] / bound)^2`, the smooth surrogate of `|x[index]| <= bound`.
    SquaredCoordinate { index: usize, bound: f64 },
}

impl ConstraintFn {
    pub fn box_coordinate(index: usize, bound: f64) -> Self {
        ConstraintFn::SquaredCoordinate { index, bound }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            ConstraintFn::SquaredCoordinate { index, bound } => {
                let s = x[index] / bound;
                s * s
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match *self {
            ConstraintFn::SquaredCoordinate { index, bound } => {
                let mut g = vec![0.0; x.len()];
                g[index] = 2.0 * x[index] / (bound * bound);
                g
            }
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match *self {
            ConstraintFn::SquaredCoordinate { index, bound } => {
                if index >= dim {
                    return Err(Error::Dimension(format!(
                        "constraint index {index} out of range for dimension {dim}"
                    )));
                }
                if !(bound > 0.0 && bound.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "constraint bound must be positive, got {bound}"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    ThinPlate,
}

/// Thin-plate kernel `rho^2 ln rho`, continuous at zero.
#[inline]
pub fn thin_plate(rho: f64) -> f64 {
    thin_plate_sq(rho * rho)
}

/// Thin-plate kernel evaluated from the squared radius.
#[inline]
pub fn thin_plate_sq(rho_sq: f64) -> f64 {
    if rho_sq > 0.0 {
        0.5 * rho_sq * rho_sq.ln()
    } else {
        0.0
    }
}

/// Serialized form: `{kind, centers, domain, grid_shape, constraint, eval_expansion}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DictionaryRepr {
    kind: BasisKind,
    centers: Vec<Vec<f64>>,
    domain: BoxDomain,
    grid_shape: Vec<usize>,
    constraint: ConstraintFn,
    #[serde(default = "default_expansion")]
    eval_expansion: f64,
}

fn default_expansion() -> f64 {
    3.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "DictionaryRepr", into = "DictionaryRepr")]
pub struct Dictionary {
    kind: BasisKind,
    dim: usize,
    centers: Vec<f64>,
    grid_shape: Vec<usize>,
    domain: BoxDomain,
    constraint: ConstraintFn,
    eval_domain: BoxDomain,
    eval_expansion: f64,
    id: String,
}

impl PartialEq for Dictionary {
    fn eq(&self, o: &Self) -> bool {
        self.id == o.id && self.centers == o.centers && self.domain == o.domain
    }
}

impl TryFrom<DictionaryRepr> for Dictionary {
    type Error = Error;

    fn try_from(r: DictionaryRepr) -> Result<Self> {
        Dictionary::from_centers(r.centers, r.grid_shape, r.domain, r.constraint, r.eval_expansion)
    }
}

impl From<Dictionary> for DictionaryRepr {
    fn from(d: Dictionary) -> Self {
        DictionaryRepr {
            kind: d.kind,
            centers: d.centers().map(<[f64]>::to_vec).collect(),
            domain: d.domain,
            grid_shape: d.grid_shape,
            constraint: d.constraint,
            eval_expansion: d.eval_expansion,
        }
    }
}

impl Dictionary {
    /// Thin-plate centers on a rectangular grid spanning `domain`.
    pub fn grid(domain: BoxDomain, grid_shape: &[usize], constraint: ConstraintFn) -> Result<Self> {
        if grid_shape.len() != domain.dim() || grid_shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "grid shape {grid_shape:?} does not match a {}-dimensional domain",
                domain.dim()
            )));
        }
        let centers = domain.grid_shape(grid_shape);
        Self::from_centers(centers, grid_shape.to_vec(), domain, constraint, default_expansion())
    }

    /// Grid over the bounding box of `points` inflated by `inflation` (0.1 = 10%).
    pub fn for_points<'a, I>(
        points: I,
        grid_shape: &[usize],
        inflation: f64,
        constraint: ConstraintFn,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let bbox = BoxDomain::bounding(points)?;
        Self::grid(bbox.scaled(1.0 + inflation), grid_shape, constraint)
    }

    pub fn from_centers(
        centers: Vec<Vec<f64>>,
        grid_shape: Vec<usize>,
        domain: BoxDomain,
        constraint: ConstraintFn,
        eval_expansion: f64,
    ) -> Result<Self> {
        let dim = domain.dim();
        constraint.validate(dim)?;
        if !(eval_expansion >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "evaluation expansion must be >= 1, got {eval_expansion}"
            )));
        }
        let mut flat = Vec::with_capacity(centers.len() * dim);
        for c in &centers {
            if c.len() != dim {
                return Err(Error::Dimension("center dimension differs from domain".into()));
            }
            if !domain.contains(c) {
                return Err(Error::Domain(format!("center {c:?} lies outside the domain")));
            }
            flat.extend_from_slice(c);
        }
        let mut dict = Dictionary {
            kind: BasisKind::ThinPlate,
            dim,
            centers: flat,
            grid_shape,
            eval_domain: domain.scaled(eval_expansion),
            domain,
            constraint,
            eval_expansion,
            id: String::new(),
        };
        dict.id = dict.compute_id();
        Ok(dict)
    }

    fn compute_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}|{}|{:?}|", self.kind, self.dim, self.constraint).as_bytes());
        for v in self.centers.iter().chain(&self.domain.lower).chain(&self.domain.upper) {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Content fingerprint used to tie fitted sets to the dictionary they were fitted with.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn state_dim(&self) -> usize {
        self.dim
    }

    pub fn n_centers(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn n_phi(&self) -> usize {
        1 + self.n_centers()
    }

    pub fn centers(&self) -> impl Iterator<Item = &[f64]> {
        self.centers.chunks_exact(self.dim)
    }

    pub fn grid_shape(&self) -> &[usize] {
        &self.grid_shape
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn constraint(&self) -> &ConstraintFn {
        &self.constraint
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "state of length {} for a {}-dimensional dictionary",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite state {x:?}")));
        }
        if !self.eval_domain.contains(x) {
            return Err(Error::Domain(format!("state {x:?} outside the evaluation domain")));
        }
        Ok(())
    }

    /// Writes `phi(x)` into `out` (length `n_phi`).
    pub fn eval_phi_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_point(x)?;
        debug_assert_eq!(out.len(), self.n_phi());
        out[0] = self.constraint.eval(x);
        for (o, c) in out[1..].iter_mut().zip(self.centers()) {
            let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            *o = thin_plate_sq(r2);
        }
        Ok(())
    }

    pub fn eval_phi(&self, x: &[f64]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.n_phi());
        self.eval_phi_into(x, out.as_mut_slice())?;
        Ok(out)
    }

    /// Centered lift `phi(x) - phi(x_inf)`.
    pub fn eval_varphi(&self, x: &[f64], x_inf: &[f64]) -> Result<DVector<f64>> {
        Ok(self.eval_phi(x)? - self.eval_phi(x_inf)?)
    }

    /// Jacobian of `phi` at `x` (`n_phi x dim`).
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.n_phi(), self.dim);
        for (k, g) in self.constraint.gradient(x).into_iter().enumerate() {
            j[(0, k)] = g;
        }
        for (i, c) in self.centers().enumerate() {
            let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if r2 > 0.0 {
                // d/dx (rho^2 ln rho) = (2 ln rho + 1)(x - c)
                let s = r2.ln() + 1.0;
                for k in 0..self.dim {
                    j[(i + 1, k)] = s * (x[k] - c[k]);
                }
            }
        }
        j
    }

    /// Spectral norm of the Jacobian at `x`.
    pub fn jacobian_norm(&self, x: &[f64]) -> f64 {
        let j = self.jacobian(x);
        let gram = j.transpose() * &j;
        let lmax = gram
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(0.0_f64, f64::max);
        lmax.max(0.0).sqrt()
    }

    /// Lipschitz constant of `phi` on the dictionary domain with the default
    /// resolution (200 per axis) and safety factor (1.1).
    pub fn lipschitz_bound(&self) -> Result<LipschitzBound> {
        self.lipschitz_bound_on(&self.domain, 200, 1.1)
    }

    /// Max Jacobian norm over a `resolution`-per-axis grid of `region`, times `safety`.
    pub fn lipschitz_bound_on(
        &self,
        region: &BoxDomain,
        resolution: usize,
        safety: f64,
    ) -> Result<LipschitzBound> {
        if region.dim() != self.dim {
            return Err(Error::Dimension("region dimension differs from dictionary".into()));
        }
        if region.widths().iter().any(|w| !w.is_finite()) {
            return Err(Error::Domain("Lipschitz bound needs a bounded region".into()));
        }
        if safety < 1.0 {
            return Err(Error::InvalidParameter(format!("safety factor {safety} < 1")));
        }
        let max_norm = region
            .grid(resolution.max(2))
            .iter()
            .map(|x| self.jacobian_norm(x))
            .fold(0.0_f64, f64::max);
        Ok(LipschitzBound {
            l_phi: safety * max_norm,
            domain: region.clone(),
        })
    }
}

/// Lipschitz constant of the dictionary map, valid on `domain` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBound {
    pub l_phi: f64,
    pub domain: BoxDomain,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lti_dict() -> Dictionary {
        let domain = BoxDomain::new(vec![-1.1, -6.6], vec![1.1, 6.6]).unwrap();
        Dictionary::grid(domain, &[14, 14], ConstraintFn::box_coordinate(0, 1.0)).unwrap()
    }

    #[test]
    fn size_and_first_element() {
        let d = lti_dict();
        assert_eq!(d.n_phi(), 197);
        let phi = d.eval_phi(&[1.0, 0.0]).unwrap();
        assert_eq!(phi[0], 1.0);
        assert_eq!(phi[0], d.constraint().eval(&[1.0, 0.0]));
    }

    #[test]
    fn thin_plate_reference_values() {
        assert_eq!(thin_plate(0.0), 0.0);
        assert_eq!(thin_plate(1.0), 0.0);
        let e = std::f64::consts::E;
        assert!((thin_plate(e) - e * e).abs() < 1e-12);
        assert!((thin_plate(e) - 7.3891).abs() < 1e-4);
    }

    #[test]
    fn value_at_own_center_is_zero() {
        let d = lti_dict();
        let c: Vec<f64> = d.centers().nth(17).unwrap().to_vec();
        let phi = d.eval_phi(&c).unwrap();
        assert_eq!(phi[18], 0.0);
        let mut x = c.clone();
        x[1] += std::f64::consts::E;
        let phi = d.eval_phi(&x).unwrap();
        assert!((phi[18] - std::f64::consts::E.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_and_far_points() {
        let d = lti_dict();
        assert!(matches!(d.eval_phi(&[f64::NAN, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(d.eval_phi(&[100.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(d.eval_phi(&[0.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn varphi_at_equilibrium_is_zero() {
        let d = lti_dict();
        let x = [0.3, -1.2];
        assert!(d.eval_varphi(&x, &x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn varphi_matches_two_phi_calls() {
        let d = lti_dict();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-6.0..6.0)];
            let y = [rng.gen_range(-1.0..1.0), rng.gen_range(-6.0..6.0)];
            let v = d.eval_varphi(&x, &y).unwrap();
            let w = d.eval_varphi(&y, &x).unwrap();
            let (px, py) = (d.eval_phi(&x).unwrap(), d.eval_phi(&y).unwrap());
            for i in 0..d.n_phi() {
                assert_eq!(v[i], px[i] - py[i]);
                assert_eq!(v[i], -w[i]);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let d = lti_dict();
        let x = [0.37, 2.1];
        let j = d.jacobian(&x);
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (d.eval_phi(&xp).unwrap() - d.eval_phi(&xm).unwrap()) / (2.0 * h);
            for i in 0..d.n_phi() {
                assert!((fd[i] - j[(i, k)]).abs() < 1e-5 * (1.0 + j[(i, k)].abs()));
            }
        }
    }

    #[test]
    fn single_center_degenerate_domain() {
        let domain = BoxDomain::new(vec![0.5, 0.0], vec![0.5, 0.0]).unwrap();
        let d = Dictionary::grid(domain.clone(), &[1, 1], ConstraintFn::box_coordinate(0, 1.0))
            .unwrap();
        let lb = d.lipschitz_bound_on(&domain, 5, 1.0).unwrap();
        // only g contributes: |dg/dx1| = 2 * 0.5
        assert!((lb.l_phi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bound_grows_with_domain() {
        let d = lti_dict();
        let small = BoxDomain::new(vec![-0.5, -3.0], vec![0.5, 3.0]).unwrap();
        let l1 = d.lipschitz_bound_on(&small, 60, 1.1).unwrap().l_phi;
        let l2 = d.lipschitz_bound_on(&small.scaled(2.0), 60, 1.1).unwrap().l_phi;
        assert!(l2 >= l1);
    }

    #[test]
    fn bound_dominates_sampled_slopes() {
        // sampled-slope oracle: ||phi(x) - phi(y)|| / ||x - y|| over random pairs
        let d = lti_dict();
        let lb = d.lipschitz_bound().unwrap();
        let dom = d.domain().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for i in 0..20_000 {
            let x: Vec<f64> = (0..2).map(|k| rng.gen_range(dom.lower[k]..dom.upper[k])).collect();
            let y: Vec<f64> = if i % 2 == 0 {
                x.iter().map(|v| v + rng.gen_range(-1e-3..1e-3)).collect()
            } else {
                (0..2).map(|k| rng.gen_range(dom.lower[k]..dom.upper[k])).collect()
            };
            if !dom.contains(&y) {
                continue;
            }
            let num = (d.eval_phi(&x).unwrap() - d.eval_phi(&y).unwrap()).norm();
            let den = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if den > 0.0 {
                worst = worst.max(num / den);
            }
        }
        assert!(lb.l_phi >= worst, "bound {} < sampled slope {}", lb.l_phi, worst);
    }

    #[test]
    fn json_round_trip_preserves_id() {
        let d = lti_dict();
        let s = serde_json::to_string(&d).unwrap();
        let back: Dictionary = serde_json::from_str(&s).unwrap();
        assert_eq!(back.id(), d.id());
        assert_eq!(back.n_phi(), d.n_phi());
    }

    proptest! {
        #[test]
        fn first_entry_is_constraint(x1 in -1.0f64..1.0, x2 in -6.0f64..6.0) {
            let d = lti_dict();
            let phi = d.eval_phi(&[x1, x2]).unwrap();
            prop_assert_eq!(phi[0], d.constraint().eval(&[x1, x2]));
        }
    }
}
