use nalgebra::{DMatrix, Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};

use super::lti::zoh;
use super::ode::{dopri5, Tolerances};
use super::Plant;
use crate::domain::BoxDomain;
use crate::error::{Error, Result};
use crate::lift::ConstraintFn;

/// Kinematic bicycle `y' = v sin(theta + beta)`, `theta' = (v / l) sin(beta)`
/// with lateral constraint `|y| <= 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BicycleParams {
    pub l: f64,
    pub v: f64,
    pub lqr_q: [[f64; 2]; 2],
    pub lqr_r: f64,
    pub dt: f64,
    /// Speed the LQR gain is designed for.
    pub design_v: f64,
    pub beta_max: f64,
    pub y_max: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self {
            l: 1.6,
            v: 20.0,
            lqr_q: [[100.0, 0.0], [0.0, 10.0]],
            lqr_r: 1.0,
            dt: 0.1,
            design_v: 20.0,
            beta_max: 0.5,
            y_max: 2.0,
        }
    }
}

impl BicycleParams {
    pub fn at_speed(v: f64) -> Self {
        Self { v, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l", self.l), ("v", self.v), ("dt", self.dt), ("design_v", self.design_v)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.lqr_r > 0.0) {
            return Err(Error::InvalidParameter("lqr_r must be positive".into()));
        }
        if !(self.beta_max > 0.0 && self.beta_max < std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidParameter("beta_max must lie in (0, pi/2)".into()));
        }
        if !(self.y_max > 0.0) {
            return Err(Error::InvalidParameter("y_max must be positive".into()));
        }
        Ok(())
    }

    /// Linearization about straight driving at speed `v`.
    pub fn linearization(&self, v: f64) -> (Matrix2<f64>, Vector2<f64>) {
        (Matrix2::new(0.0, v, 0.0, 0.0), Vector2::new(v, v / self.l))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrGain {
    pub k: RowVector2<f64>,
    pub p: Matrix2<f64>,
    pub residual: f64,
    pub iterations: usize,
    /// Spectral radius of `A_d - B_d K` at the design speed.
    pub spectral_radius: f64,
}

/// Discrete LQR gain for the linearization at `params.v`, from a fixed-point
/// iteration of the Riccati recursion.
pub fn lqr_gain(params: &BicycleParams) -> Result<LqrGain> {
    params.validate()?;
    let (a, b) = params.linearization(params.v);
    let (ad, bd) = zoh(
        &DMatrix::from_iterator(2, 2, a.iter().cloned()),
        &DMatrix::from_iterator(2, 1, b.iter().cloned()),
        params.dt,
    );
    let ad = Matrix2::from_iterator(ad.iter().cloned());
    let bd = Vector2::new(bd[0], bd[1]);
    let q = Matrix2::new(
        params.lqr_q[0][0],
        params.lqr_q[0][1],
        params.lqr_q[1][0],
        params.lqr_q[1][1],
    );
    let r = params.lqr_r;
    let ricc = |p: &Matrix2<f64>| -> Matrix2<f64> {
        let pb = p * bd;
        let s = r + bd.dot(&pb);
        let atpb = ad.transpose() * pb;
        let next = q + ad.transpose() * p * ad - atpb * atpb.transpose() / s;
        0.5 * (next + next.transpose())
    };
    let mut p = q;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..200_000 {
        let next = ricc(&p);
        residual = (next - p).amax();
        p = next;
        iterations = it + 1;
        if !residual.is_finite() {
            return Err(Error::Numerical("Riccati iteration diverged".into()));
        }
        // absolute 1e-12, relaxed to rounding level once P is large
        if residual <= 1e-12 * p.amax().max(1.0) {
            break;
        }
    }
    if residual > 1e-12 * p.amax().max(1.0) {
        return Err(Error::Numerical(format!("Riccati iteration stalled at {residual:.2e}")));
    }
    let pb = p * bd;
    let k = (ad.transpose() * pb).transpose() / (r + bd.dot(&pb));
    let acl = ad - bd * k;
    let eig = acl.complex_eigenvalues();
    let spectral_radius = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
    Ok(LqrGain { k, p, residual, iterations, spectral_radius })
}

#[derive(Debug, Clone)]
pub struct BicyclePlant {
    pub params: BicycleParams,
    pub gain: RowVector2<f64>,
    pub tol: Tolerances,
}

impl BicyclePlant {
    /// Uses the LQR gain designed at `params.design_v`.
    pub fn new(params: BicycleParams) -> Result<Self> {
        params.validate()?;
        let design = BicycleParams { v: params.design_v, ..params };
        let gain = lqr_gain(&design)?.k;
        Ok(Self::with_gain(params, gain))
    }

    pub fn with_gain(params: BicycleParams, gain: RowVector2<f64>) -> Self {
        Self { params, gain, tol: Tolerances::default() }
    }

    /// `beta = sat(-K (x - [r, 0]))`.
    pub fn control(&self, x: &[f64], r: f64) -> f64 {
        let e = Vector2::new(x[0] - r, x[1]);
        let b = -(self.gain * e)[0];
        b.clamp(-self.params.beta_max, self.params.beta_max)
    }

    pub fn rhs(&self, x: &[f64], beta: f64, dx: &mut [f64]) {
        let v = self.params.v;
        dx[0] = v * (x[1] + beta).sin();
        dx[1] = v / self.params.l * beta.sin();
    }

    /// Integrates with a fixed `beta` over one sampling period.
    pub fn step_with_input(&self, x: &[f64], beta: f64) -> Result<Vec<f64>> {
        dopri5(|_, x, dx| self.rhs(x, beta, dx), 0.0, self.params.dt, x, &self.tol)
    }
}

pub fn bicycle_step(plant: &BicyclePlant, x: &[f64], r: f64) -> Result<Vec<f64>> {
    plant.step(x, r)
}

impl Plant for BicyclePlant {
    fn state_dim(&self) -> usize {
        2
    }

    fn dt(&self) -> f64 {
        self.params.dt
    }

    fn step(&self, x: &[f64], r: f64) -> Result<Vec<f64>> {
        if x.len() != 2 {
            return Err(Error::Dimension(format!("bicycle state has length {}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) || !r.is_finite() {
            return Err(Error::Integration("non-finite bicycle input".into()));
        }
        self.step_with_input(x, self.control(x, r))
    }

    fn constraint(&self) -> ConstraintFn {
        ConstraintFn::box_coordinate(0, self.params.y_max)
    }

    fn initial_domain(&self) -> BoxDomain {
        BoxDomain::symmetric(&[2.4, 0.4]).expect("static box")
    }

    fn equilibrium(&self, r: f64) -> Option<Vec<f64>> {
        Some(vec![r, 0.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_response(v: f64) -> Vec<f64> {
        let plant = BicyclePlant::new(BicycleParams::at_speed(v)).unwrap();
        let mut x = vec![0.0, 0.0];
        let mut ys = Vec::new();
        for _ in 0..100 {
            x = plant.step(&x, 1.0).unwrap();
            ys.push(x[0]);
        }
        ys
    }

    #[test]
    fn nominal_gain_stabilizes() {
        let g = lqr_gain(&BicycleParams::default()).unwrap();
        assert!(g.spectral_radius < 1.0, "{}", g.spectral_radius);
        assert!(g.residual <= 1e-12 * g.p.amax().max(1.0));
    }

    #[test]
    fn zero_state_weight_gives_zero_gain() {
        let p = BicycleParams { lqr_q: [[0.0, 0.0], [0.0, 0.0]], ..Default::default() };
        let g = lqr_gain(&p).unwrap();
        assert!(g.k.amax() < 1e-12);
    }

    #[test]
    fn equilibrium_and_straight_line() {
        let plant = BicyclePlant::new(BicycleParams::default()).unwrap();
        let x = plant.step(&[0.7, 0.0], 0.7).unwrap();
        assert!((x[0] - 0.7).abs() < 1e-12 && x[1].abs() < 1e-12);
        let theta = 0.05;
        let x = plant.step_with_input(&[0.0, theta], 0.0).unwrap();
        assert!((x[1] - theta).abs() < 1e-14);
        assert!((x[0] - 20.0 * theta.sin() * 0.1).abs() < 1e-9);
    }

    #[test]
    fn overshoot_grows_with_speed() {
        let over = |ys: &[f64]| ys.iter().cloned().fold(f64::MIN, f64::max) - 1.0;
        let nominal = over(&step_response(20.0));
        let fast = over(&step_response(27.0));
        assert!(nominal < 0.05, "nominal overshoot {nominal}");
        assert!(fast > nominal, "{fast} <= {nominal}");
    }
}
