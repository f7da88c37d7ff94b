//! Reference selection over the admissible set and closed-loop simulation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::distance;
use crate::error::{Error, Result};
use crate::invariance::AdmissibleSet;
use crate::plants::{Plant, PlantConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Governed {
    pub r_star: f64,
    /// Index into `AdmissibleSet::sets`.
    pub index: usize,
}

/// Order in which references are tried for a desired value: by distance,
/// ties toward the smaller reference.
pub fn candidate_order(adm: &AdmissibleSet, r_desired: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..adm.sets.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (adm.sets[a].r_bar, adm.sets[b].r_bar);
        (ra - r_desired)
            .abs()
            .total_cmp(&(rb - r_desired).abs())
            .then(ra.total_cmp(&rb))
    });
    idx
}

/// The reference closest to `r_desired` whose invariant set contains `x`.
pub fn govern(adm: &AdmissibleSet, x: &[f64], r_desired: f64) -> Result<Governed> {
    if adm.is_empty() {
        return Err(Error::Empty("admissible set has no members".into()));
    }
    if !r_desired.is_finite() {
        return Err(Error::InvalidParameter("non-finite desired reference".into()));
    }
    let phi = match adm.dictionary.eval_phi(x) {
        Ok(p) => p,
        Err(Error::Domain(_)) => return Err(Error::NoAdmissibleReference),
        Err(e) => return Err(e),
    };
    for i in candidate_order(adm, r_desired) {
        if adm.sets[i].contains_phi(&adm.dictionary, phi.as_slice()) {
            return Ok(Governed { r_star: adm.sets[i].r_bar, index: i });
        }
    }
    Err(Error::NoAdmissibleReference)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulePoint {
    pub t_start: f64,
    pub r_desired: f64,
}

/// Plant configuration and admissible-set bundle in force from `t_start` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantPhase {
    pub t_start: f64,
    pub plant: PlantConfig,
    #[serde(default)]
    pub bundle: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub x0: Vec<f64>,
    pub duration: f64,
    pub schedule: Vec<SchedulePoint>,
    pub plant_params: Vec<PlantPhase>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::InvalidParameter("scenario duration must be positive".into()));
        }
        if self.schedule.is_empty() || self.plant_params.is_empty() {
            return Err(Error::InvalidParameter("scenario needs a schedule and a plant".into()));
        }
        let increasing = |ts: Vec<f64>| ts.windows(2).all(|w| w[0] < w[1]);
        let st: Vec<f64> = self.schedule.iter().map(|s| s.t_start).collect();
        let pt: Vec<f64> = self.plant_params.iter().map(|s| s.t_start).collect();
        if !increasing(st.clone()) || !increasing(pt.clone()) {
            return Err(Error::InvalidParameter("schedule times must increase strictly".into()));
        }
        if st.iter().chain(&pt).any(|t| *t < 0.0 || *t > self.duration) {
            return Err(Error::InvalidParameter("schedule time outside the scenario".into()));
        }
        if pt[0] != 0.0 {
            return Err(Error::InvalidParameter("the first plant phase must start at t = 0".into()));
        }
        let dt = self.plant_params[0].plant.dt();
        if self.plant_params.iter().any(|p| (p.plant.dt() - dt).abs() > 1e-12) {
            return Err(Error::InvalidParameter("all plant phases must share dt".into()));
        }
        Ok(())
    }

    /// Desired reference in force at `t` (the first entry before its start time).
    pub fn r_desired(&self, t: f64) -> f64 {
        let eps = 1e-9;
        self.schedule
            .iter()
            .rev()
            .find(|s| s.t_start <= t + eps)
            .unwrap_or(&self.schedule[0])
            .r_desired
    }

    fn phase(&self, t: f64) -> usize {
        self.plant_params
            .iter()
            .rposition(|p| p.t_start <= t + 1e-9)
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub r_desired: f64,
    pub r_applied: f64,
    pub active_set_index: Option<usize>,
    pub bundle: usize,
    pub g: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GovernorLog {
    pub dt: f64,
    pub records: Vec<LogRecord>,
    /// Set when the plant failed mid-run; `records` then hold the partial run.
    pub aborted: Option<String>,
}

impl GovernorLog {
    pub fn max_abs_output(&self) -> f64 {
        self.records.iter().map(|r| r.x[0].abs()).fold(0.0, f64::max)
    }

    pub fn max_g(&self) -> f64 {
        self.records.iter().map(|r| r.g).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Fallback flags at or after step `from`.
    pub fn fallbacks_after(&self, from: usize) -> usize {
        self.records.iter().skip(from).filter(|r| r.fallback).count()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let n = self.records.first().map_or(0, |r| r.x.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend(["r_desired", "r_applied", "g", "fallback"].map(String::from));
        out.write_record(&header)?;
        for r in &self.records {
            let mut rec = vec![format!("{:.10}", r.t)];
            rec.extend(r.x.iter().map(|v| format!("{v:?}")));
            rec.push(format!("{:?}", r.r_desired));
            rec.push(format!("{:?}", r.r_applied));
            rec.push(format!("{:?}", r.g));
            rec.push((r.fallback as u8).to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs the governor at the plant's sampling period. `bank[k]` is the
/// admissible set used while a phase with `bundle = k` is active.
///
/// When no set contains the state the previous reference is held and the
/// step is flagged; before any reference was applied the set whose
/// equilibrium is nearest the state is used instead.
pub fn closed_loop_simulate(scenario: &Scenario, bank: &[AdmissibleSet]) -> Result<GovernorLog> {
    scenario.validate()?;
    if bank.is_empty() || bank.iter().any(AdmissibleSet::is_empty) {
        return Err(Error::Empty("closed loop needs nonempty admissible sets".into()));
    }
    if let Some(p) = scenario.plant_params.iter().find(|p| p.bundle >= bank.len()) {
        return Err(Error::InvalidParameter(format!("phase refers to missing bundle {}", p.bundle)));
    }
    let plants = scenario
        .plant_params
        .iter()
        .map(|p| p.plant.build())
        .collect::<Result<Vec<_>>>()?;
    let dt = plants[0].dt();
    let steps = (scenario.duration / dt).round() as usize;
    let mut log = GovernorLog { dt, records: Vec::with_capacity(steps + 1), aborted: None };
    let mut x = scenario.x0.clone();
    let mut prev: Option<f64> = None;
    for k in 0..=steps {
        let t = k as f64 * dt;
        let ph = scenario.phase(t);
        let plant: &dyn Plant = plants[ph].as_ref();
        let adm = &bank[scenario.plant_params[ph].bundle];
        let r_d = scenario.r_desired(t);
        let (r_applied, index, fallback) = match govern(adm, &x, r_d) {
            Ok(g) => (g.r_star, Some(g.index), false),
            Err(Error::NoAdmissibleReference) => match prev {
                Some(r) => (r, None, true),
                None => {
                    let i = nearest_equilibrium(adm, &x);
                    (adm.sets[i].r_bar, None, true)
                }
            },
            Err(e) => return Err(e),
        };
        log.records.push(LogRecord {
            t,
            x: x.clone(),
            r_desired: r_d,
            r_applied,
            active_set_index: index,
            bundle: scenario.plant_params[ph].bundle,
            g: plant.constraint().eval(&x),
            fallback,
        });
        prev = Some(r_applied);
        if k == steps {
            break;
        }
        match plant.step(&x, r_applied) {
            Ok(next) => x = next,
            Err(e) => {
                log.aborted = Some(e.to_string());
                break;
            }
        }
    }
    Ok(log)
}

fn nearest_equilibrium(adm: &AdmissibleSet, x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, s) in adm.sets.iter().enumerate() {
        let d = distance(&s.x_inf, x);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}
