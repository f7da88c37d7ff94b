//! Simulated plants used to generate data and to close the loop.

pub mod bicycle;
pub mod lti;
pub mod ode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ReferenceEntry, TrajectorySet};
use crate::domain::BoxDomain;
use crate::error::{Error, Result};
use crate::lift::ConstraintFn;

pub use bicycle::{bicycle_step, lqr_gain, BicycleParams, BicyclePlant, LqrGain};
pub use lti::{lti_step, LtiParams, LtiPlant};

/// Closed-loop map `x+ = f(x, r)` sampled at `dt`.
pub trait Plant: Send + Sync {
    fn state_dim(&self) -> usize;
    fn dt(&self) -> f64;
    fn step(&self, x: &[f64], r: f64) -> Result<Vec<f64>>;
    /// `g` with `X = {x : g(x) <= 1}`.
    fn constraint(&self) -> ConstraintFn;
    /// Box initial conditions are drawn from.
    fn initial_domain(&self) -> BoxDomain;
    /// Constrained output.
    fn output(&self, x: &[f64]) -> f64 {
        x[0]
    }
    /// Exact equilibrium under constant `r`, when known.
    fn equilibrium(&self, _r: f64) -> Option<Vec<f64>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "plant", rename_all = "snake_case")]
pub enum PlantConfig {
    Lti(LtiParams),
    Bicycle(BicycleParams),
}

impl PlantConfig {
    pub fn build(&self) -> Result<Box<dyn Plant>> {
        Ok(match self {
            PlantConfig::Lti(p) => Box::new(LtiPlant::new(*p)?),
            PlantConfig::Bicycle(p) => Box::new(BicyclePlant::new(*p)?),
        })
    }

    pub fn dt(&self) -> f64 {
        match self {
            PlantConfig::Lti(p) => p.dt,
            PlantConfig::Bicycle(p) => p.dt,
        }
    }
}

/// `start + step * i` for `i < count`, rounded to 10 decimals so grid values compare exactly.
pub fn reference_grid(start: f64, step: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| ((start + step * i as f64) * 1e10).round() / 1e10)
        .collect()
}

/// `n_t` trajectories per reference from uniform initial conditions over the
/// plant's initial domain. Reference `i` uses stream `i` of a ChaCha8
/// generator seeded with `seed`, so results do not depend on scheduling.
pub fn generate_dataset(
    plant: &dyn Plant,
    references: &[f64],
    n_t: usize,
    horizon_s: f64,
    seed: u64,
) -> Result<TrajectorySet> {
    if references.is_empty() {
        return Err(Error::Empty("no references to simulate".into()));
    }
    if !(horizon_s >= 0.0) {
        return Err(Error::InvalidParameter(format!("horizon {horizon_s} must be nonnegative")));
    }
    let steps = (horizon_s / plant.dt()).round() as usize;
    let dom = plant.initial_domain();
    let entries = references
        .par_iter()
        .enumerate()
        .map(|(i, &r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut trajectories = Vec::with_capacity(n_t);
            for _ in 0..n_t {
                let mut x: Vec<f64> = (0..dom.dim())
                    .map(|k| rng.gen_range(dom.lower[k]..=dom.upper[k]))
                    .collect();
                let mut t = Vec::with_capacity(steps + 1);
                t.push(x.clone());
                for _ in 0..steps {
                    x = plant.step(&x, r)?;
                    t.push(x.clone());
                }
                trajectories.push(t);
            }
            Ok(ReferenceEntry { r_bar: r, trajectories })
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectorySet::new(plant.dt(), entries)
}
