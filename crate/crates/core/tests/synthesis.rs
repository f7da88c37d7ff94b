use ddrg_core::data::SamplePairs;
use ddrg_core::lift::ConstraintFn;
use ddrg_core::plants::{generate_dataset, LtiParams, LtiPlant};
use ddrg_core::synthesis::*;
use ddrg_core::*;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_dict(n: usize) -> Dictionary {
    let dom = BoxDomain::new(vec![-1.2, -6.0], vec![1.2, 6.0]).unwrap();
    Dictionary::grid(dom, &[n, n], ConstraintFn::box_coordinate(0, 1.0)).unwrap()
}

fn random_lifted(rng: &mut ChaCha8Rng, ns: usize, n: usize, gamma: f64) -> LiftedSamples {
    LiftedSamples {
        varphi: DMatrix::from_fn(ns, n, |_, _| rng.gen_range(-1.0..1.0)),
        varphi_plus: DMatrix::from_fn(ns, n, |_, _| rng.gen_range(-1.0..1.0)),
        eps: (0..ns).map(|_| rng.gen_range(0.0..0.01)).collect(),
        gamma,
    }
}

fn random_basis(rng: &mut ChaCha8Rng, n: usize, nw: usize, lambda: f64) -> WBasis {
    let mut c = DVector::zeros(n);
    c[0] = 1.0;
    let mut dirs = DMatrix::from_fn(n, nw, |_, _| rng.gen_range(-1.0..1.0));
    for mut col in dirs.column_iter_mut() {
        let nrm = col.norm();
        col /= nrm;
    }
    WBasis::new(c, lambda, BASIS_ETA, dirs).unwrap()
}

#[test]
fn tightening_reference_values() {
    let z = DVector::zeros(3);
    assert_eq!(tightening(&z, &z, 2.0, 3.0, 0.0).unwrap(), 0.0);
    assert_eq!(tightening(&z, &z, 1.0, 1.0, 1.0).unwrap(), 1.0);
    let k = DVector::from_vec(vec![2.0, 0.0]);
    let kp = DVector::from_vec(vec![0.0, 1.0]);
    let e = tightening(&k, &kp, 2.0, 3.0, 0.1).unwrap();
    let expected = 0.4f64 * 5.0 + 0.6f64.powi(2);
    assert!((e - 2.36).abs() < 1e-12 && (e - expected).abs() < 1e-12, "{e}");
    assert!(tightening(&k, &kp, -1.0, 1.0, 1.0).is_err());
    assert!(tightening(&k, &kp, 1.0, 1.0, -0.1).is_err());
}

proptest! {
    #[test]
    fn tightening_matches_closed_form(
        a in prop::collection::vec(-5.0f64..5.0, 3),
        b in prop::collection::vec(-5.0f64..5.0, 3),
        l_phi in 0.0f64..100.0, l_f in 0.0f64..3.0, delta in 0.0f64..1.0,
    ) {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let expect = 2.0 * l_phi * delta * (l_f * nb + na) + (l_phi * l_f * delta).powi(2);
        let got = tightening(&DVector::from_vec(a), &DVector::from_vec(b), l_phi, l_f, delta).unwrap();
        prop_assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1e-300));
    }

    #[test]
    fn tightening_monotone(
        na in 0.0f64..10.0, nb in 0.0f64..10.0,
        l_phi in 0.0f64..50.0, l_f in 0.0f64..3.0, delta in 0.0f64..1.0, bump in 0.0f64..1.0,
    ) {
        let base = tightening_from_norms(na, nb, l_phi, l_f, delta).unwrap();
        prop_assert!(tightening_from_norms(na, nb, l_phi + bump, l_f, delta).unwrap() >= base);
        prop_assert!(tightening_from_norms(na, nb, l_phi, l_f + bump, delta).unwrap() >= base);
        prop_assert!(tightening_from_norms(na, nb, l_phi, l_f, delta + bump).unwrap() >= base);
    }
}

#[test]
fn lifting_at_the_equilibrium_is_zero() {
    let dict = small_dict(5);
    let x = vec![0.3, 0.1];
    let sp = SamplePairs { r_bar: 0.3, x: vec![x.clone()], x_plus: vec![x.clone()] };
    let cfg = SynthesisConfig::default();
    let ls = lift_samples(&sp, &dict, &x, &cfg, 10.0, 1.0, 0.0).unwrap();
    assert!(ls.varphi.iter().chain(ls.varphi_plus.iter()).all(|v| *v == 0.0));
    assert!(ls.psi(0).iter().all(|v| *v == 0.0));
    assert_eq!(ls.eps, vec![0.0]);
}

#[test]
fn psi_with_full_contraction_keeps_successor_term() {
    let dict = small_dict(4);
    let sp = SamplePairs { r_bar: 0.0, x: vec![vec![0.5, 1.0]], x_plus: vec![vec![0.2, -0.4]] };
    let cfg = SynthesisConfig { gamma: 1.0, ..SynthesisConfig::default() };
    let ls = lift_samples(&sp, &dict, &[0.0, 0.0], &cfg, 1.0, 1.0, 0.0).unwrap();
    let a = ls.varphi_k_plus(0);
    assert!((ls.psi(0) - &a * a.transpose()).amax() < 1e-12);
}

#[test]
fn psi_trace_identity() {
    let dict = small_dict(5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x: Vec<f64> = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-5.0..5.0)];
        let xp: Vec<f64> = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-5.0..5.0)];
        let xi: Vec<f64> = vec![rng.gen_range(-1.0..1.0), 0.0];
        let gamma = rng.gen_range(0.0..1.0);
        let sp = SamplePairs { r_bar: 0.0, x: vec![x.clone()], x_plus: vec![xp.clone()] };
        let cfg = SynthesisConfig { gamma, ..SynthesisConfig::default() };
        let ls = lift_samples(&sp, &dict, &xi, &cfg, 1.0, 1.0, 0.0).unwrap();
        let va = dict.eval_varphi(&xp, &xi).unwrap();
        let vb = dict.eval_varphi(&x, &xi).unwrap();
        let expect = va.norm_squared() - (1.0 - gamma) * vb.norm_squared();
        let trace = ls.psi(0).trace();
        assert!((trace - expect).abs() <= 1e-9 * expect.abs().max(1.0));
        let n = dict.n_phi();
        assert!((ls.inner(0, &DMatrix::identity(n, n)) - expect).abs() <= 1e-9 * expect.abs().max(1.0));
    }
}

#[test]
fn tightening_scales_with_epsilon_scale() {
    let dict = small_dict(4);
    let sp = SamplePairs { r_bar: 0.0, x: vec![vec![0.5, 1.0]], x_plus: vec![vec![0.2, -0.4]] };
    let full = SynthesisConfig { epsilon_scale: 1.0, ..SynthesisConfig::default() };
    let half = SynthesisConfig { epsilon_scale: 0.5, ..SynthesisConfig::default() };
    let a = lift_samples(&sp, &dict, &[0.0, 0.0], &full, 3.0, 1.1, 0.05).unwrap();
    let b = lift_samples(&sp, &dict, &[0.0, 0.0], &half, 3.0, 1.1, 0.05).unwrap();
    let direct = tightening(&a.varphi_k(0), &a.varphi_k_plus(0), 3.0, 1.1, 0.05).unwrap();
    assert!((a.eps[0] - direct).abs() < 1e-12 * direct);
    assert!((b.eps[0] - 0.5 * direct).abs() < 1e-12 * direct);
}

#[test]
fn psi_weight_cases() {
    let zero = LiftedSamples {
        varphi: DMatrix::zeros(3, 4),
        varphi_plus: DMatrix::zeros(3, 4),
        eps: vec![0.0; 3],
        gamma: 0.0,
    };
    assert!(assemble_psi_weight(&zero).unwrap().iter().all(|v| *v == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let one = random_lifted(&mut rng, 1, 4, 0.0);
    let p = one.varphi_k(0);
    assert!((assemble_psi_weight(&one).unwrap() - &p * p.transpose()).amax() < 1e-14);
    let many = random_lifted(&mut rng, 30, 8, 0.0);
    let psi = assemble_psi_weight(&many).unwrap();
    assert!(min_eigenvalue(&psi) >= -1e-10);
    let empty = LiftedSamples {
        varphi: DMatrix::zeros(0, 4),
        varphi_plus: DMatrix::zeros(0, 4),
        eps: vec![],
        gamma: 0.0,
    };
    assert!(assemble_psi_weight(&empty).is_err());
}

#[test]
fn constraint_coefficients_pick_g() {
    let dict = small_dict(6);
    let c = solve_c(&dict).unwrap();
    assert_eq!(c[0], 1.0);
    assert!(c.iter().skip(1).all(|v| *v == 0.0));
    let g = dict.constraint().clone();
    for x in dict.domain().grid(41) {
        let cphi = c.dot(&dict.eval_phi(&x).unwrap());
        assert_eq!(cphi, g.eval(&x));
        assert_eq!(cphi <= 1.0, x[0].abs() <= 1.0);
    }
}

#[test]
fn identity_basis_from_unit_mix() {
    let n = 4;
    let nw = 3;
    let dirs = DMatrix::from_fn(n, nw, |i, j| (i == j) as u8 as f64);
    let wb = WBasis::new(DVector::zeros(n), nw as f64, 1.0, dirs).unwrap();
    for w in wb.w_list() {
        assert!((w - DMatrix::<f64>::identity(n, n)).amax() < 1e-12);
    }
}

#[test]
fn basis_respects_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..10 {
        let ls = random_lifted(&mut rng, 40, 12, 0.0);
        let psi = assemble_psi_weight(&ls).unwrap();
        let mut c = DVector::zeros(12);
        c[0] = 1.0;
        let cfg = SynthesisConfig { n_w: 4 + trial, lambda: 2.0 + trial as f64, ..SynthesisConfig::default() };
        let wb = build_w_basis(&c, &cfg, &psi).unwrap();
        let s = wb.s_matrix();
        let mut total = DMatrix::zeros(12, 12);
        for w in wb.w_list() {
            assert!(min_eigenvalue(&w) > 0.0);
            assert!(min_eigenvalue(&(&s - &w)) >= -1e-9);
            total += w;
        }
        let cap = DMatrix::identity(12, 12) * cfg.lambda - &c * c.transpose();
        assert!(min_eigenvalue(&(cap - total)) >= -1e-9);
    }
    let mut c = DVector::zeros(3);
    c[0] = 2.0;
    assert!(WBasis::new(c, 4.0, BASIS_ETA, DMatrix::identity(3, 1)).is_err());
}

#[test]
fn lp_rows_at_the_equilibrium_vanish() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ls = random_lifted(&mut rng, 3, 6, 0.0);
    ls.varphi.row_mut(1).fill(0.0);
    ls.varphi_plus.row_mut(1).fill(0.0);
    ls.eps[1] = 0.0;
    let wb = random_basis(&mut rng, 6, 4, 10.0);
    let cfg = SynthesisConfig::default();
    let lp = assemble_lp(&ls, &wb, &DMatrix::identity(6, 6), &cfg).unwrap();
    assert!(lp.a.row(1).iter().all(|v| *v == 0.0));
    assert_eq!(lp.b[1], 0.0);
    for j in 0..wb.n_w() {
        assert!((lp.d[j] - wb.w_matrix(j).trace()).abs() < 1e-10);
    }
}

#[test]
fn lp_rows_match_certificate_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let gamma = rng.gen_range(0.0..0.5);
        let ls = random_lifted(&mut rng, 15, 7, gamma);
        let wb = random_basis(&mut rng, 7, 5, 10.0);
        let cfg = SynthesisConfig { gamma, ..SynthesisConfig::default() };
        let psi = assemble_psi_weight(&ls).unwrap();
        let lp = assemble_lp(&ls, &wb, &psi, &cfg).unwrap();
        let alpha = DVector::from_fn(5, |_, _| rng.gen_range(0.0..1.0));
        let res = recover_p(&alpha, &wb, &psi).unwrap();
        let row = lp.residual(&alpha);
        for k in 0..ls.n_s() {
            let direct = ls.psi(k).dot(&res.p_matrix) - gamma + ls.eps[k] * cfg.lambda;
            assert!((direct - row[k]).abs() < 1e-9 * direct.abs().max(1.0), "{direct} {}", row[k]);
        }
        let cc = &wb.c * wb.c.transpose();
        assert!((lp.d.dot(&alpha) + cc.dot(&psi) - res.objective).abs() < 1e-9);
    }
}

#[test]
fn lp_trivial_instances() {
    let lp = LpProblem {
        a: DMatrix::zeros(1, 1),
        b: DVector::zeros(1),
        d: DVector::from_vec(vec![1.0]),
        lower: 0.0,
        upper: 1.0,
    };
    assert_eq!(solve_lp(&lp).unwrap()[0], 0.0);
    let lp = LpProblem {
        a: DMatrix::from_vec(1, 1, vec![-1.0]),
        b: DVector::from_vec(vec![-1.0]),
        d: DVector::from_vec(vec![-1.0]),
        lower: 0.0,
        upper: 1.0,
    };
    assert!((solve_lp(&lp).unwrap()[0] - 1.0).abs() < 1e-12);
    let lp = LpProblem {
        a: DMatrix::from_vec(1, 1, vec![1.0]),
        b: DVector::from_vec(vec![2.0]),
        d: DVector::from_vec(vec![1.0]),
        lower: 0.0,
        upper: 1.0,
    };
    assert!(matches!(solve_lp(&lp), Err(Error::Infeasible { worst_row: 0, .. })));
}

/// Minimum over the vertices of `{A a + b <= 0, 0 <= a <= 1}` in three variables.
fn vertex_minimum(lp: &LpProblem) -> Option<f64> {
    let mut rows: Vec<(Vector3<f64>, f64)> = (0..lp.n_s())
        .map(|k| (Vector3::new(lp.a[(k, 0)], lp.a[(k, 1)], lp.a[(k, 2)]), -lp.b[k]))
        .collect();
    for j in 0..3 {
        let mut e = Vector3::zeros();
        e[j] = 1.0;
        rows.push((e, 1.0));
        rows.push((-e, 0.0));
    }
    let mut best: Option<f64> = None;
    let m = rows.len();
    for i in 0..m {
        for j in (i + 1)..m {
            for k in (j + 1)..m {
                let mat = Matrix3::from_rows(&[rows[i].0.transpose(), rows[j].0.transpose(), rows[k].0.transpose()]);
                let Some(inv) = mat.try_inverse() else { continue };
                let v = inv * Vector3::new(rows[i].1, rows[j].1, rows[k].1);
                if rows.iter().all(|(a, h)| a.dot(&v) <= h + 1e-9) {
                    let obj = lp.d[0] * v[0] + lp.d[1] * v[1] + lp.d[2] * v[2];
                    best = Some(best.map_or(obj, |b: f64| b.min(obj)));
                }
            }
        }
    }
    best
}

#[test]
fn lp_matches_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let a = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let centre = DVector::from_fn(3, |_, _| rng.gen_range(0.0..1.0));
        let b = DVector::from_fn(5, |k, _| -(a.row(k) * &centre)[0] - rng.gen_range(0.0..0.3));
        let d = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let lp = LpProblem { a, b, d, lower: 0.0, upper: 1.0 };
        let alpha = solve_lp(&lp).unwrap();
        let brute = vertex_minimum(&lp).unwrap();
        assert!((lp.d.dot(&alpha) - brute).abs() < 1e-6, "{} vs {brute}", lp.d.dot(&alpha));
        assert!(lp.residual(&alpha).max() <= 1e-8);
        assert_eq!(solve_lp(&lp).unwrap(), alpha);
    }
}

#[test]
fn recovered_certificate_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let wb = random_basis(&mut rng, 6, 4, 10.0);
    let psi = DMatrix::identity(6, 6);
    let cc = &wb.c * wb.c.transpose();
    let zero = recover_p(&DVector::zeros(4), &wb, &psi).unwrap();
    assert_eq!(zero.p_matrix, cc);
    let full = recover_p(&DVector::from_element(4, 1.0), &wb, &psi).unwrap();
    assert!(min_eigenvalue(&(DMatrix::identity(6, 6) * 10.0 - &full.p_matrix)) >= -1e-9);
    for _ in 0..20 {
        let alpha = DVector::from_fn(4, |_, _| rng.gen_range(0.0..1.0));
        let r = recover_p(&alpha, &wb, &psi).unwrap();
        let mut rebuilt = cc.clone();
        for j in 0..4 {
            rebuilt += alpha[j] * wb.w_matrix(j);
        }
        assert!((&r.p_matrix - rebuilt).amax() < 1e-12);
        assert!((r.factor.dense(wb.c.as_slice()) - &r.p_matrix).amax() < 1e-12);
        assert!(min_eigenvalue(&(&r.p_matrix - &cc)) >= -1e-9);
        assert!(min_eigenvalue(&(DMatrix::identity(6, 6) * 10.0 - &r.p_matrix)) >= -1e-9);
    }
}

#[test]
fn verification_flags_the_violated_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut ls = random_lifted(&mut rng, 6, 5, 0.0);
    ls.eps = vec![0.0; 6];
    // rows contract except row 4
    for k in 0..6 {
        let v: Vec<f64> = ls.varphi.row(k).iter().cloned().collect();
        let s = if k == 4 { 2.0 } else { 0.5 };
        for (i, x) in v.iter().enumerate() {
            ls.varphi_plus[(k, i)] = s * x;
        }
    }
    let mut c = DVector::zeros(5);
    c[0] = 1.0;
    let p = DMatrix::identity(5, 5) * 10.0;
    let rep = check_certificate(&p, &ls, &c, 10.0).unwrap();
    assert!(!rep.passed);
    assert_eq!(rep.worst_row, 4);
    for k in 0..6 {
        let direct = ls.varphi_k_plus(k).dot(&(&p * ls.varphi_k_plus(k))) - ls.varphi_k(k).dot(&(&p * ls.varphi_k(k)));
        assert!((rep.slacks[k] + direct).abs() < 1e-10 * direct.abs().max(1.0));
    }
}

#[test]
fn equilibrium_data_gives_constraint_certificate() {
    let x = vec![0.4, 0.0];
    let ts = TrajectorySet::new(
        0.1,
        vec![ddrg_core::data::ReferenceEntry { r_bar: 0.4, trajectories: vec![vec![x.clone(); 5]; 3] }],
    )
    .unwrap();
    let dict = small_dict(5);
    let set = synthesize_pi_set(&ts, 0.4, &dict, &SynthesisConfig::default()).unwrap();
    let mut cc = DMatrix::zeros(dict.n_phi(), dict.n_phi());
    cc[(0, 0)] = 1.0;
    assert!((&set.p_matrix - cc).amax() < 1e-10);
    assert!(set.contains(&dict, &x));
    let adm = synthesize_ci(&ts, &dict, &SynthesisConfig::default()).unwrap();
    assert_eq!(adm.sets.len(), 1);
}

fn lti_data(refs: &[f64]) -> TrajectorySet {
    let plant = LtiPlant::new(LtiParams::default()).unwrap();
    generate_dataset(&plant, refs, 5, 20.0, 17).unwrap()
}

#[test]
fn lti_fit_is_feasible_and_deterministic() {
    let ts = lti_data(&[-0.3, 0.0, 0.4]);
    let dict = Dictionary::for_points(ts.samples(), &[8, 8], 0.1, ConstraintFn::box_coordinate(0, 1.0)).unwrap();
    let cfg = SynthesisConfig { epsilon_scale: 0.0, ..SynthesisConfig::default() };
    let lb = dict.lipschitz_bound().unwrap();
    for r in [-0.3, 0.0] {
        let a = synthesize_pi_set_detailed(&ts, r, &dict, &lb, &cfg).unwrap();
        assert!(a.result.feasibility_report.as_ref().unwrap().passed);
        let b = synthesize_pi_set_detailed(&ts, r, &dict, &lb, &cfg).unwrap();
        assert_eq!(a.lp, b.lp);
        assert_eq!(a.result.alpha, b.result.alpha);
        assert!(a.set.contains(&dict, &a.set.x_inf));
    }
}

#[test]
fn union_membership_is_or_over_sets() {
    let ts = lti_data(&[-0.4, 0.0, 0.4]);
    let dict = Dictionary::for_points(ts.samples(), &[8, 8], 0.1, ConstraintFn::box_coordinate(0, 1.0)).unwrap();
    let cfg = SynthesisConfig { epsilon_scale: 0.0, ..SynthesisConfig::default() };
    let adm = synthesize_ci(&ts, &dict, &cfg).unwrap();
    assert!(adm.nominal);
    let region = BoxDomain::new(vec![-1.0, -3.0], vec![1.0, 3.0]).unwrap();
    for x in region.grid(40) {
        let any = adm.sets.iter().any(|s| s.contains(&dict, &x));
        assert_eq!(adm.ci_contains(&x), any);
    }
}

#[test]
fn sdp_export_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let ls = random_lifted(&mut rng, 4, 3, 0.2);
    let mut c = DVector::zeros(3);
    c[0] = 1.0;
    let ex = SdpExport::new(0.1, &ls, &c, 10.0).unwrap();
    let s = serde_json::to_string(&ex).unwrap();
    let back: SdpExport = serde_json::from_str(&s).unwrap();
    assert_eq!(ex, back);
    assert_eq!(back.psi_k.len(), 4);
}

#[test]
fn config_validation() {
    assert!(SynthesisConfig::default().validate().is_ok());
    assert!(SynthesisConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
    assert!(SynthesisConfig { n_w: 0, ..Default::default() }.validate().is_err());
    assert!(SynthesisConfig { beta_margin: 0.1, gamma: 0.0, ..Default::default() }.validate().is_err());
    assert!(SynthesisConfig { epsilon_scale: -1.0, ..Default::default() }.validate().is_err());
}

