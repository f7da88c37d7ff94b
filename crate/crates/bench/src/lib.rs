//! Shared fixtures for the benchmarks.

use ddrg_core::plants::reference_grid;
use ddrg_core::presets::paper_4_1;
use ddrg_core::{AdmissibleSet, Dictionary, TrajectorySet};

/// LTI dataset over a reduced reference grid, its dictionary and fitted sets.
pub fn lti_fixture(n_refs: usize) -> (TrajectorySet, Dictionary, AdmissibleSet) {
    let mut p = paper_4_1();
    p.references = reference_grid(-0.6, 1.2 / (n_refs.max(2) - 1) as f64, n_refs.max(2));
    let ts = p.generate().expect("dataset");
    let dict = p.dictionary(&ts).expect("dictionary");
    let adm = p.fit(&ts).expect("fit");
    (ts, dict, adm)
}
