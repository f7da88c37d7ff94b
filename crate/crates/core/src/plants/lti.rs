use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::Plant;
use crate::domain::BoxDomain;
use crate::error::{Error, Result};
use crate::lift::ConstraintFn;

/// `x1'' = -omega^2 x1 - 2 zeta omega x1' + omega^2 r`, output `y = x1`, `|y| <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LtiParams {
    pub omega: f64,
    pub zeta: f64,
    pub dt: f64,
}

impl Default for LtiParams {
    fn default() -> Self {
        Self { omega: 5.0, zeta: 0.1, dt: 0.1 }
    }
}

impl LtiParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) {
            return Err(Error::InvalidParameter(format!("omega = {} must be positive", self.omega)));
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "zeta = {} must lie in (0, 1)",
                self.zeta
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt = {} must be positive", self.dt)));
        }
        Ok(())
    }

    pub fn continuous(&self) -> (Matrix2<f64>, Vector2<f64>) {
        let w2 = self.omega * self.omega;
        (
            Matrix2::new(0.0, 1.0, -w2, -2.0 * self.zeta * self.omega),
            Vector2::new(0.0, w2),
        )
    }
}

/// Zero-order-hold discretization `(A_d, B_d)` of `(A, B)` over `dt`.
pub fn zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = b.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * dt));
    let e = aug.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

#[derive(Debug, Clone)]
pub struct LtiPlant {
    pub params: LtiParams,
    pub ad: Matrix2<f64>,
    pub bd: Vector2<f64>,
}

impl LtiPlant {
    pub fn new(params: LtiParams) -> Result<Self> {
        params.validate()?;
        let (a, b) = params.continuous();
        let (ad, bd) = zoh(
            &DMatrix::from_iterator(2, 2, a.iter().cloned()),
            &DMatrix::from_iterator(2, 1, b.iter().cloned()),
            params.dt,
        );
        Ok(Self {
            params,
            ad: Matrix2::from_iterator(ad.iter().cloned()),
            bd: Vector2::new(bd[0], bd[1]),
        })
    }

    pub fn step_vec(&self, x: &Vector2<f64>, r: f64) -> Vector2<f64> {
        self.ad * x + self.bd * r
    }
}

/// One ZOH step of the second-order system.
pub fn lti_step(params: &LtiParams, x: &[f64], r: f64) -> Result<Vec<f64>> {
    LtiPlant::new(*params)?.step(x, r)
}

impl Plant for LtiPlant {
    fn state_dim(&self) -> usize {
        2
    }

    fn dt(&self) -> f64 {
        self.params.dt
    }

    fn step(&self, x: &[f64], r: f64) -> Result<Vec<f64>> {
        if x.len() != 2 {
            return Err(Error::Dimension(format!("LTI state has length {}", x.len())));
        }
        let n = self.step_vec(&Vector2::new(x[0], x[1]), r);
        Ok(vec![n[0], n[1]])
    }

    fn constraint(&self) -> ConstraintFn {
        ConstraintFn::box_coordinate(0, 1.0)
    }

    fn initial_domain(&self) -> BoxDomain {
        BoxDomain::symmetric(&[1.0, 6.0]).expect("static box")
    }

    fn equilibrium(&self, r: f64) -> Option<Vec<f64>> {
        Some(vec![r, 0.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::ode::{dopri5, Tolerances};

    #[test]
    fn equilibrium_is_fixed() {
        let p = LtiPlant::new(LtiParams::default()).unwrap();
        for r in [-1.2, 0.0, 0.37] {
            let x = p.step(&[r, 0.0], r).unwrap();
            assert!((x[0] - r).abs() < 1e-14 && x[1].abs() < 1e-13);
        }
        assert_eq!(p.step(&[0.0, 0.0], 0.0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn matches_fine_integration() {
        let params = LtiParams::default();
        let p = LtiPlant::new(params).unwrap();
        let (a, b) = params.continuous();
        let tol = Tolerances { rtol: 1e-12, atol: 1e-14, max_steps: 1_000_000 };
        for (x0, r) in [([1.0, 0.0], 0.0), ([0.0, 1.0], 0.0), ([0.0, 0.0], 1.0)] {
            let x = dopri5(
                |_, x, dx| {
                    let v = a * Vector2::new(x[0], x[1]) + b * r;
                    dx[0] = v[0];
                    dx[1] = v[1];
                },
                0.0,
                params.dt,
                &x0,
                &tol,
            )
            .unwrap();
            let d = p.step(&x0, r).unwrap();
            assert!((x[0] - d[0]).abs() < 1e-6 && (x[1] - d[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(LtiPlant::new(LtiParams { zeta: 1.5, ..Default::default() }).is_err());
        assert!(LtiPlant::new(LtiParams { omega: 0.0, ..Default::default() }).is_err());
    }
}
