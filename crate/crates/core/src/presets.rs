//! Parameter sets for the two reference experiments and their closed-loop scenarios.

use serde::{Deserialize, Serialize};

use crate::data::TrajectorySet;
use crate::error::{Error, Result};
use crate::governor::{PlantPhase, Scenario, SchedulePoint};
use crate::invariance::AdmissibleSet;
use crate::lift::Dictionary;
use crate::plants::{generate_dataset, reference_grid, BicycleParams, LtiParams, PlantConfig};
use crate::synthesis::{synthesize_ci, SynthesisConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub name: String,
    pub plant: PlantConfig,
    pub references: Vec<f64>,
    pub n_t: usize,
    pub horizon_s: f64,
    pub seed: u64,
    pub grid_shape: Vec<usize>,
    /// Relative enlargement of the data bounding box that carries the centers.
    pub inflation: f64,
    pub synthesis: SynthesisConfig,
}

impl ExperimentPreset {
    pub fn generate(&self) -> Result<TrajectorySet> {
        let plant = self.plant.build()?;
        generate_dataset(plant.as_ref(), &self.references, self.n_t, self.horizon_s, self.seed)
    }

    pub fn dictionary(&self, ts: &TrajectorySet) -> Result<Dictionary> {
        let plant = self.plant.build()?;
        Dictionary::for_points(ts.samples(), &self.grid_shape, self.inflation, plant.constraint())
    }

    pub fn fit(&self, ts: &TrajectorySet) -> Result<AdmissibleSet> {
        let dict = self.dictionary(ts)?;
        synthesize_ci(ts, &dict, &self.synthesis)
    }
}

/// Synthesis settings shared by both experiments. Tightening is off: at
/// `gamma = 0` samples at the equilibrium leave no room for any margin.
pub fn experiment_synthesis() -> SynthesisConfig {
    SynthesisConfig { gamma: 0.0, epsilon_scale: 0.0, ..SynthesisConfig::default() }
}

pub fn paper_4_1() -> ExperimentPreset {
    ExperimentPreset {
        name: "paper-4.1".into(),
        plant: PlantConfig::Lti(LtiParams::default()),
        references: reference_grid(-1.2, 0.02, 121),
        n_t: 5,
        horizon_s: 40.0,
        seed: 41,
        grid_shape: vec![14, 14],
        inflation: 0.1,
        synthesis: experiment_synthesis(),
    }
}

/// Bicycle experiment at forward speed `v`.
pub fn paper_4_2(v: f64) -> ExperimentPreset {
    ExperimentPreset {
        name: format!("paper-4.2-v{v}"),
        plant: PlantConfig::Bicycle(BicycleParams::at_speed(v)),
        references: reference_grid(-2.4, 0.02, 241),
        n_t: 5,
        horizon_s: 4.0,
        seed: 4200 + v.round() as u64,
        grid_shape: vec![14, 14],
        inflation: 0.1,
        synthesis: experiment_synthesis(),
    }
}

pub const BICYCLE_SPEEDS: [f64; 2] = [20.0, 27.0];

/// Presets by name; `paper-4.2` expands to one preset per speed, and
/// `paper-4.2-v20` selects a single speed.
pub fn presets(name: &str) -> Result<Vec<ExperimentPreset>> {
    match name {
        "paper-4.1" => Ok(vec![paper_4_1()]),
        "paper-4.2" => Ok(BICYCLE_SPEEDS.iter().map(|&v| paper_4_2(v)).collect()),
        other => BICYCLE_SPEEDS
            .iter()
            .map(|&v| paper_4_2(v))
            .find(|p| p.name == other)
            .map(|p| vec![p])
            .ok_or_else(|| Error::InvalidParameter(format!("unknown preset {other:?}"))),
    }
}

fn schedule(points: &[(f64, f64)]) -> Vec<SchedulePoint> {
    points.iter().map(|&(t_start, r_desired)| SchedulePoint { t_start, r_desired }).collect()
}

/// Steps of the desired output to +-1.15, beyond what the constraint allows.
pub fn lti_scenario() -> Scenario {
    Scenario {
        x0: vec![0.0, 0.0],
        duration: 60.0,
        schedule: schedule(&[(0.0, 1.15), (20.0, -1.15), (40.0, 1.15)]),
        plant_params: vec![PlantPhase {
            t_start: 0.0,
            plant: PlantConfig::Lti(LtiParams::default()),
            bundle: 0,
        }],
    }
}

/// Lane targets at +-2.2, close to the road edge, at the nominal speed.
pub fn bicycle_edge_scenario() -> Scenario {
    Scenario {
        x0: vec![0.0, 0.0],
        duration: 15.0,
        schedule: schedule(&[(0.0, 2.2), (5.0, -2.2), (10.0, 2.2)]),
        plant_params: vec![PlantPhase {
            t_start: 0.0,
            plant: PlantConfig::Bicycle(BicycleParams::at_speed(20.0)),
            bundle: 0,
        }],
    }
}

/// Lane change out and back with a speed increase from 20 to 27 m/s at
/// `t = 4 s`. Bundle 0 is fitted at 20 m/s, bundle 1 at 27 m/s.
pub fn bicycle_overtake_scenario() -> Scenario {
    Scenario {
        x0: vec![-1.5, 0.0],
        duration: 12.0,
        schedule: schedule(&[(0.0, -1.5), (1.0, 1.5), (6.0, -1.5)]),
        plant_params: vec![
            PlantPhase {
                t_start: 0.0,
                plant: PlantConfig::Bicycle(BicycleParams::at_speed(20.0)),
                bundle: 0,
            },
            PlantPhase {
                t_start: 4.0,
                plant: PlantConfig::Bicycle(BicycleParams::at_speed(27.0)),
                bundle: 1,
            },
        ],
    }
}
