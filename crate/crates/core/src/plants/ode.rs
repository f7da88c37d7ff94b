//! Adaptive Dormand-Prince 5(4) integration for small autonomous systems.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10, max_steps: 100_000 }
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// 5th order weights equal the last row of A (FSAL); these are 5th - 4th.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates `x' = f(t, x)` from `t0` to `t1`.
pub fn dopri5<F>(f: F, t0: f64, t1: f64, x0: &[f64], tol: &Tolerances) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = x0.len();
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(x0.to_vec());
    }
    let dir = span.signum();
    let mut t = t0;
    let mut x = x0.to_vec();
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    f(t, &x, &mut k[0]);
    let mut h = 0.1 * span.abs().min(initial_step(&x, &k[0], tol));
    let mut steps = 0;
    while (t1 - t) * dir > 0.0 {
        if steps >= tol.max_steps {
            return Err(Error::Integration(format!("step limit reached at t = {t}")));
        }
        steps += 1;
        let rest = (t1 - t).abs();
        let last = h >= rest;
        if last {
            h = rest;
        }
        for s in 1..7 {
            for i in 0..n {
                let mut acc = x[i];
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += dir * h * A[s][j] * kj[i];
                }
                tmp[i] = acc;
            }
            f(t + dir * h * C[s], &tmp, &mut k[s]);
        }
        // tmp now holds the 5th order solution (stage 7 was evaluated at it)
        let mut err = 0.0;
        for i in 0..n {
            let e: f64 = (0..7).map(|s| E[s] * k[s][i]).sum::<f64>() * h;
            let sc = tol.atol + tol.rtol * x[i].abs().max(tmp[i].abs());
            err += (e / sc).powi(2);
        }
        let err = (err / n as f64).sqrt();
        if !err.is_finite() {
            return Err(Error::Integration(format!("non-finite error estimate at t = {t}")));
        }
        if err <= 1.0 {
            t = if last { t1 } else { t + dir * h };
            x.copy_from_slice(&tmp);
            let k6 = k[6].clone();
            k[0] = k6;
        }
        let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= fac;
        if h < 1e-14 * span.abs() {
            return Err(Error::Integration(format!("step size underflow at t = {t}")));
        }
    }
    Ok(x)
}

fn initial_step(x: &[f64], dx: &[f64], tol: &Tolerances) -> f64 {
    let d0: f64 = x.iter().map(|v| (v / (tol.atol + tol.rtol * v.abs())).powi(2)).sum::<f64>().sqrt();
    let d1: f64 = x
        .iter()
        .zip(dx)
        .map(|(v, d)| (d / (tol.atol + tol.rtol * v.abs())).powi(2))
        .sum::<f64>()
        .sqrt();
    if d0 < 1e-5 || d1 < 1e-5 {
        1e-2
    } else {
        (0.01 * d0 / d1).max(1e-6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let x = dopri5(|_, x, dx| dx[0] = -x[0], 0.0, 1.0, &[1.0], &Tolerances::default()).unwrap();
        assert!((x[0] - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn harmonic_oscillator() {
        let x = dopri5(
            |_, x, dx| {
                dx[0] = x[1];
                dx[1] = -x[0];
            },
            0.0,
            std::f64::consts::PI,
            &[1.0, 0.0],
            &Tolerances::default(),
        )
        .unwrap();
        assert!((x[0] + 1.0).abs() < 1e-7 && x[1].abs() < 1e-7);
    }
}
