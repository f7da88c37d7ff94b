//! Trajectory datasets, equilibrium estimates, sample pairs and the
//! data-derived constants (sample density, Lipschitz constant of the dynamics).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::BoxDomain;
use crate::error::{Error, Result};

/// Absolute tolerance used when looking up a reference value.
pub const REFERENCE_TOL: f64 = 1e-9;

pub type Trajectory = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub r_bar: f64,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSet")]
pub struct TrajectorySet {
    pub dt: f64,
    pub entries: Vec<ReferenceEntry>,
}

#[derive(Deserialize)]
struct RawSet {
    dt: f64,
    entries: Vec<ReferenceEntry>,
}

impl TryFrom<RawSet> for TrajectorySet {
    type Error = Error;

    fn try_from(raw: RawSet) -> Result<Self> {
        TrajectorySet::new(raw.dt, raw.entries)
    }
}

impl TrajectorySet {
    pub fn new(dt: f64, entries: Vec<ReferenceEntry>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidData(format!("sampling period {dt} must be positive")));
        }
        let mut dim = None;
        for (i, e) in entries.iter().enumerate() {
            if !e.r_bar.is_finite() {
                return Err(Error::InvalidData("non-finite reference".into()));
            }
            if entries[..i].iter().any(|o| (o.r_bar - e.r_bar).abs() <= REFERENCE_TOL) {
                return Err(Error::InvalidData(format!("duplicate reference {}", e.r_bar)));
            }
            let len = e.trajectories.first().map(Vec::len);
            for t in &e.trajectories {
                if Some(t.len()) != len {
                    return Err(Error::InvalidData(format!(
                        "trajectories of unequal length for r_bar = {}",
                        e.r_bar
                    )));
                }
                for x in t {
                    if *dim.get_or_insert(x.len()) != x.len() {
                        return Err(Error::Dimension("states of different dimension".into()));
                    }
                    if x.iter().any(|v| !v.is_finite()) {
                        return Err(Error::InvalidData(format!(
                            "non-finite state for r_bar = {}",
                            e.r_bar
                        )));
                    }
                }
            }
        }
        Ok(Self { dt, entries })
    }

    pub fn state_dim(&self) -> Option<usize> {
        self.samples().next().map(<[f64]>::len)
    }

    pub fn references(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.r_bar).collect()
    }

    pub fn entry(&self, r_bar: f64) -> Result<&ReferenceEntry> {
        self.entries
            .iter()
            .find(|e| (e.r_bar - r_bar).abs() <= REFERENCE_TOL)
            .ok_or(Error::UnknownReference(r_bar))
    }

    /// Every state sample of every trajectory.
    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.entries
            .iter()
            .flat_map(|e| e.trajectories.iter())
            .flat_map(|t| t.iter().map(Vec::as_slice))
    }

    pub fn bounding_box(&self) -> Result<BoxDomain> {
        BoxDomain::bounding(self.samples())
    }

    pub fn from_json_reader<R: Read>(r: R) -> Result<Self> {
        Ok(serde_json::from_reader(r)?)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_json_reader(std::io::BufReader::new(f))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    /// Rows `(traj_id, t_index, r_bar, x1..xn)`; `traj_id` is global across references.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let n = self.state_dim().unwrap_or(0);
        let mut header = vec!["traj_id".to_string(), "t_index".into(), "r_bar".into()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        out.write_record(&header)?;
        let mut id = 0usize;
        for e in &self.entries {
            for t in &e.trajectories {
                for (k, x) in t.iter().enumerate() {
                    let mut rec = vec![id.to_string(), k.to_string(), format!("{:?}", e.r_bar)];
                    rec.extend(x.iter().map(|v| format!("{v:?}")));
                    out.write_record(&rec)?;
                }
                id += 1;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, dt: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        // traj_id -> (r_bar, samples by t_index)
        let mut trajs: BTreeMap<u64, (f64, BTreeMap<u64, Vec<f64>>)> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() < 4 {
                return Err(Error::InvalidData("CSV row needs traj_id, t_index, r_bar and a state".into()));
            }
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidData(format!("bad number {:?}", &rec[i])))
            };
            let id: u64 = rec[0]
                .trim()
                .parse()
                .map_err(|_| Error::InvalidData(format!("bad traj_id {:?}", &rec[0])))?;
            let k: u64 = rec[1]
                .trim()
                .parse()
                .map_err(|_| Error::InvalidData(format!("bad t_index {:?}", &rec[1])))?;
            let r = parse(2)?;
            let x = (3..rec.len()).map(parse).collect::<Result<Vec<_>>>()?;
            let slot = trajs.entry(id).or_insert((r, BTreeMap::new()));
            if (slot.0 - r).abs() > REFERENCE_TOL {
                return Err(Error::InvalidData(format!("trajectory {id} mixes references")));
            }
            if slot.1.insert(k, x).is_some() {
                return Err(Error::InvalidData(format!("duplicate sample ({id}, {k})")));
            }
        }
        let mut entries: Vec<ReferenceEntry> = Vec::new();
        for (_, (r, samples)) in trajs {
            for (expect, k) in samples.keys().enumerate() {
                if *k != expect as u64 {
                    return Err(Error::InvalidData("gap in t_index".into()));
                }
            }
            let t: Trajectory = samples.into_values().collect();
            match entries.iter_mut().find(|e| (e.r_bar - r).abs() <= REFERENCE_TOL) {
                Some(e) => e.trajectories.push(t),
                None => entries.push(ReferenceEntry { r_bar: r, trajectories: vec![t] }),
            }
        }
        Self::new(dt, entries)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumEstimate {
    pub x_inf: Vec<f64>,
    pub residual: f64,
}

/// Mean of the final states of the trajectories generated under `r_bar`.
pub fn estimate_equilibrium(ts: &TrajectorySet, r_bar: f64) -> Result<EquilibriumEstimate> {
    let entry = ts.entry(r_bar)?;
    let ends: Vec<&[f64]> = entry
        .trajectories
        .iter()
        .filter_map(|t| t.last().map(Vec::as_slice))
        .collect();
    if ends.is_empty() {
        return Err(Error::Empty(format!("no trajectory endpoints for r_bar = {r_bar}")));
    }
    let n = ends[0].len();
    let mut x_inf = vec![0.0; n];
    for e in &ends {
        for (m, v) in x_inf.iter_mut().zip(e.iter()) {
            *m += v;
        }
    }
    for m in &mut x_inf {
        *m /= ends.len() as f64;
    }
    let residual = ends
        .iter()
        .map(|e| distance(e, &x_inf))
        .fold(0.0, f64::max);
    Ok(EquilibriumEstimate { x_inf, residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePairs {
    pub r_bar: f64,
    pub x: Vec<Vec<f64>>,
    pub x_plus: Vec<Vec<f64>>,
}

impl SamplePairs {
    pub fn n_s(&self) -> usize {
        self.x.len()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.x.iter().map(Vec::as_slice).zip(self.x_plus.iter().map(Vec::as_slice))
    }

    pub fn bounding_box(&self) -> Result<BoxDomain> {
        BoxDomain::bounding(self.x.iter().chain(&self.x_plus).map(Vec::as_slice))
    }
}

/// Consecutive-sample pairs, trajectory-major then time-minor.
pub fn extract_pairs(ts: &TrajectorySet, r_bar: f64) -> Result<SamplePairs> {
    let entry = ts.entry(r_bar)?;
    let mut x = Vec::new();
    let mut x_plus = Vec::new();
    for (i, t) in entry.trajectories.iter().enumerate() {
        if t.len() < 2 {
            log::warn!("trajectory {i} for r_bar = {r_bar} has fewer than two samples");
            continue;
        }
        for w in t.windows(2) {
            x.push(w[0].clone());
            x_plus.push(w[1].clone());
        }
    }
    Ok(SamplePairs { r_bar: entry.r_bar, x, x_plus })
}

/// Covering radius of the samples `x_k` over `region`, evaluated on a
/// `resolution`-per-axis grid (at least 100).
pub fn sample_density(sp: &SamplePairs, region: &BoxDomain, resolution: usize) -> Result<f64> {
    covering_radius(&sp.x, region, resolution.max(100))
}

/// Max over grid nodes of the distance to the nearest point.
pub fn covering_radius(points: &[Vec<f64>], region: &BoxDomain, resolution: usize) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("no samples for a density estimate".into()));
    }
    if points.iter().any(|p| p.len() != region.dim()) {
        return Err(Error::Dimension("sample and region dimension differ".into()));
    }
    let grid = region.grid(resolution);
    let worst = grid
        .par_iter()
        .map(|g| {
            points
                .iter()
                .map(|p| squared_distance(g, p))
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst.sqrt())
}

/// Minimum separation below which two states count as coincident.
pub const LIPSCHITZ_MIN_SEPARATION: f64 = 1e-9;

/// Safety factor times the largest pairwise slope `|x_j+ - x_k+| / |x_j - x_k|`.
pub fn estimate_lipschitz_f(sp: &SamplePairs, safety: f64) -> Result<f64> {
    if sp.n_s() < 2 {
        return Err(Error::Empty("need at least two sample pairs".into()));
    }
    if safety < 1.0 {
        return Err(Error::InvalidParameter(format!("safety factor {safety} < 1")));
    }
    let n = sp.n_s();
    let best = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut best: Option<f64> = None;
            for k in (j + 1)..n {
                let den = distance(&sp.x[j], &sp.x[k]);
                if den > LIPSCHITZ_MIN_SEPARATION {
                    let ratio = distance(&sp.x_plus[j], &sp.x_plus[k]) / den;
                    best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
                }
            }
            best
        })
        .reduce(|| None, |a, b| match (a, b) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, None) => a,
            (None, b) => b,
        });
    best.map(|b| safety * b)
        .ok_or_else(|| Error::InvalidData("all sampled states coincide".into()))
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(entries: Vec<(f64, Vec<Trajectory>)>) -> TrajectorySet {
        TrajectorySet::new(
            0.1,
            entries
                .into_iter()
                .map(|(r_bar, trajectories)| ReferenceEntry { r_bar, trajectories })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn equilibrium_of_constant_trajectories() {
        let ts = set(vec![(0.5, vec![vec![vec![0.5, 0.0]; 4]; 3])]);
        let eq = estimate_equilibrium(&ts, 0.5).unwrap();
        assert_eq!(eq.x_inf, vec![0.5, 0.0]);
        assert_eq!(eq.residual, 0.0);
    }

    #[test]
    fn equilibrium_is_mean_of_endpoints() {
        let ts = set(vec![(
            0.0,
            vec![vec![vec![5.0, 5.0], vec![0.0, 0.0]], vec![vec![1.0, 1.0], vec![2.0, 0.0]]],
        )]);
        let eq = estimate_equilibrium(&ts, 0.0).unwrap();
        assert_eq!(eq.x_inf, vec![1.0, 0.0]);
        assert_eq!(eq.residual, 1.0);
        assert!(matches!(estimate_equilibrium(&ts, 0.3), Err(Error::UnknownReference(_))));
    }

    #[test]
    fn degenerate_trajectory_counts_for_equilibrium_only() {
        let ts = set(vec![(0.0, vec![vec![vec![2.0]], vec![vec![0.0]]])]);
        let eq = estimate_equilibrium(&ts, 0.0).unwrap();
        assert_eq!(eq.x_inf, vec![1.0]);
        assert_eq!(extract_pairs(&ts, 0.0).unwrap().n_s(), 0);
    }

    #[test]
    fn pairs_in_order() {
        let (a, b, c) = (vec![0.0], vec![1.0], vec![2.0]);
        let ts = set(vec![(1.0, vec![vec![a.clone(), b.clone(), c.clone()]])]);
        let sp = extract_pairs(&ts, 1.0).unwrap();
        assert_eq!(sp.x, vec![a, b.clone()]);
        assert_eq!(sp.x_plus, vec![b, c]);
        let five = set(vec![(0.0, vec![vec![vec![0.0, 0.0]; 401]; 5])]);
        assert_eq!(extract_pairs(&five, 0.0).unwrap().n_s(), 2000);
    }

    #[test]
    fn density_of_single_center_sample() {
        let sp = SamplePairs { r_bar: 0.0, x: vec![vec![0.5, 0.5]], x_plus: vec![vec![0.5, 0.5]] };
        let region = BoxDomain::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let d = sample_density(&sp, &region, 101).unwrap();
        assert!((d - 0.5f64.sqrt()).abs() < 1e-12);
        let grid = region.grid(100);
        let full = SamplePairs { r_bar: 0.0, x: grid.clone(), x_plus: grid };
        assert_eq!(sample_density(&full, &region, 100).unwrap(), 0.0);
    }

    #[test]
    fn lipschitz_of_linear_maps() {
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.1, (i * i) as f64 * 0.01]).collect();
        let id = SamplePairs { r_bar: 0.0, x: xs.clone(), x_plus: xs.clone() };
        assert!((estimate_lipschitz_f(&id, 1.2).unwrap() - 1.2).abs() < 1e-12);
        let half = SamplePairs {
            r_bar: 0.0,
            x: xs.clone(),
            x_plus: xs.iter().map(|x| x.iter().map(|v| 0.5 * v).collect()).collect(),
        };
        assert!((estimate_lipschitz_f(&half, 1.2).unwrap() - 0.6).abs() < 1e-12);
        let same = SamplePairs { r_bar: 0.0, x: vec![vec![1.0]; 3], x_plus: vec![vec![0.0]; 3] };
        assert!(estimate_lipschitz_f(&same, 1.2).is_err());
    }

    #[test]
    fn json_and_csv_round_trip() {
        let ts = set(vec![
            (-0.1, vec![vec![vec![0.1, 0.2], vec![0.3, 0.4]]]),
            (0.2, vec![vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]; 2]),
        ]);
        let s = serde_json::to_string(&ts).unwrap();
        assert_eq!(serde_json::from_str::<TrajectorySet>(&s).unwrap(), ts);
        let mut buf = Vec::new();
        ts.write_csv(&mut buf).unwrap();
        assert_eq!(TrajectorySet::read_csv(&buf[..], 0.1).unwrap(), ts);
    }

    #[test]
    fn rejects_bad_sets() {
        let bad_len = TrajectorySet::new(
            0.1,
            vec![ReferenceEntry { r_bar: 0.0, trajectories: vec![vec![vec![0.0]], vec![vec![0.0], vec![1.0]]] }],
        );
        assert!(bad_len.is_err());
        let dup = TrajectorySet::new(
            0.1,
            vec![
                ReferenceEntry { r_bar: 0.0, trajectories: vec![] },
                ReferenceEntry { r_bar: 0.0, trajectories: vec![] },
            ],
        );
        assert!(dup.is_err());
        let nan = TrajectorySet::new(
            0.1,
            vec![ReferenceEntry { r_bar: 0.0, trajectories: vec![vec![vec![f64::NAN]]] }],
        );
        assert!(nan.is_err());
    }

    fn arb_points() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 2..25)
    }

    proptest! {
        #[test]
        fn equilibrium_permutation_invariant(ends in arb_points(), seed in any::<u64>()) {
            let trajs: Vec<Trajectory> = ends.iter().map(|e| vec![vec![0.0, 0.0], e.clone()]).collect();
            let mut shuffled = trajs.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let a = estimate_equilibrium(&set(vec![(0.0, trajs)]), 0.0).unwrap();
            let b = estimate_equilibrium(&set(vec![(0.0, shuffled)]), 0.0).unwrap();
            for (u, v) in a.x_inf.iter().zip(&b.x_inf) {
                prop_assert!((u - v).abs() < 1e-12);
            }
            prop_assert!((a.residual - b.residual).abs() < 1e-12);
        }

        #[test]
        fn density_monotone(pts in arb_points(), extra in prop::collection::vec(-3.0f64..3.0, 2)) {
            let region = BoxDomain::symmetric(&[3.0, 3.0]).unwrap();
            let d1 = covering_radius(&pts, &region, 30).unwrap();
            let mut more = pts.clone();
            more.push(extra);
            let d2 = covering_radius(&more, &region, 30).unwrap();
            prop_assert!(d2 <= d1);
        }

        #[test]
        fn lipschitz_scale_consistent(pts in arb_points(), s in 0.1f64..10.0) {
            let xp: Vec<Vec<f64>> = pts.iter().map(|x| vec![x[0].sin() + x[1], 0.5 * x[0]]).collect();
            let sp = SamplePairs { r_bar: 0.0, x: pts.clone(), x_plus: xp.clone() };
            let scaled = SamplePairs {
                r_bar: 0.0,
                x: pts.iter().map(|x| x.iter().map(|v| v * s).collect()).collect(),
                x_plus: xp.iter().map(|x| x.iter().map(|v| v * s).collect()).collect(),
            };
            match (estimate_lipschitz_f(&sp, 1.2), estimate_lipschitz_f(&scaled, 1.2)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0)),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "inconsistent estimate under scaling"),
            }
        }
    }
}
