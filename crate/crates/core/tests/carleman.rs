use hardy_control::carleman::*;
use hardy_control::*;
use proptest::prelude::*;

mod common;
use common::{desk_problem, radial_problem, radial_regions, rel, rng, weights_for};

fn radial_grid(cells: usize) -> SpatialGrid {
    build_grid(&GridSpec::radial(2.0, cells)).unwrap()
}

fn default_psi(cells: usize, case: CaseFlag) -> PsiField {
    let g = radial_grid(cells);
    build_psi(&g, &default_variant(&g, &radial_regions(case)).unwrap()).unwrap()
}

#[test]
fn weight_is_logarithmic_inside_unit_ball() {
    let prof = &build_profiles(1.3, 1.5, &[1.4], 2.0).unwrap()[0];
    assert!((prof.eval(0.5).0 - 0.5f64.ln()).abs() < 1e-15);
    assert!((prof.eval(0.5).1 - 2.0).abs() < 1e-15);
    let g = radial_grid(32);
    let psi = default_psi(32, CaseFlag::Shared);
    for j in 0..g.n_cells() {
        if g.radius(j) < 1.0 {
            assert!((psi.values[0][j] - g.radius(j).ln()).abs() < 1e-14);
        }
    }
}

#[test]
fn weight_vanishes_at_the_boundary() {
    for cells in [32, 64] {
        let g = radial_grid(cells);
        let psi = default_psi(cells, CaseFlag::Distinct);
        for k in 0..2 {
            let gmax = psi.gradient_norms[k].iter().cloned().fold(0.0, f64::max);
            assert!(psi.values[k][cells - 1].abs() <= g.spacing() * gmax);
            assert!(psi.profiles[k].eval(2.0).0.abs() < 1e-12);
        }
    }
}

#[test]
fn leak_check_tightens_with_resolution() {
    // the largest gradient sits at the first cell and grows like 2/h, while the
    // gradient just outside the narrow second observation interval does not
    let g = radial_grid(128);
    let variant = default_variant(&g, &radial_regions(CaseFlag::Distinct)).unwrap();
    assert!(matches!(build_psi(&g, &variant), Err(Error::CriticalPointLeak { .. })));
    let shared = default_variant(&g, &radial_regions(CaseFlag::Shared)).unwrap();
    assert!(build_psi(&g, &shared).is_ok());
}

#[test]
fn weight_peaks_only_inside_observation_set() {
    let g = radial_grid(64);
    let psi = default_psi(64, CaseFlag::Shared);
    let top = (0..g.n_cells()).max_by(|&a, &b| psi.values[0][a].total_cmp(&psi.values[0][b])).unwrap();
    assert!(psi.omega_masks[0][top]);
    assert!(psi.values[0].iter().all(|&v| v <= psi.sup + 1e-15));
}

#[test]
fn pair_weights_agree_outside_the_hull() {
    let g = radial_grid(64);
    let psi = default_psi(64, CaseFlag::Distinct);
    let tilde = psi.tilde_mask.as_ref().unwrap();
    assert_eq!(psi.values.len(), 2);
    let mut differ = false;
    for j in 0..g.n_cells() {
        if !tilde[j] {
            assert_eq!(psi.values[0][j], psi.values[1][j], "cell {j}");
        } else {
            differ |= psi.values[0][j] != psi.values[1][j];
        }
    }
    assert!(differ);
    let p = radial_problem(64, 10, 0.5, 0.2, [1e3, 1e3], CaseFlag::Distinct);
    let w = weights_for(&p, &radial_regions(CaseFlag::Distinct), 1.0, 1.0);
    for n in 0..10 {
        for j in 0..g.n_cells() {
            if !tilde[j] {
                assert_eq!(w.sigma(0, j, n), w.sigma(1, j, n));
            }
        }
    }
}

#[test]
fn time_weight_examples() {
    let p = radial_problem(32, 3, 0.5, 0.2, [1e3, 1e3], CaseFlag::Shared);
    let w = weights_for(&p, &radial_regions(CaseFlag::Shared), 1.0, 1.0);
    assert_eq!(w.midpoint(1), 0.5);
    assert!(rel(w.log_theta(1).exp(), 64.0) < 1e-14);
    assert!(rel(w.theta[1], 64.0) < 1e-14);

    let p = desk_problem(CaseFlag::Shared, 1e3);
    let w = weights_for(&p, &radial_regions(CaseFlag::Shared), 2.0, 1.5);
    let nt = p.solver.n_steps();
    for n in 0..nt {
        assert!(rel(w.log_theta(n), w.log_theta(nt - 1 - n)) < 1e-14);
        let t = w.midpoint(n);
        assert!(rel(w.theta[n], 1.0 / (t * (1.0 - t)).powi(3)) < 1e-12);
    }
}

#[test]
fn sigma_is_positive_and_rho_follows_it() {
    let p = desk_problem(CaseFlag::Shared, 1e3);
    let w = weights_for(&p, &radial_regions(CaseFlag::Shared), 0.01, 1.0);
    for n in 0..p.solver.n_steps() {
        for j in 0..p.n_cells() {
            let s = w.sigma(0, j, n);
            assert!(s > 0.0);
            assert!(rel(w.log_rho_inv2(j, n), w.log_theta(n) - 2.0 * s) < 1e-14);
            assert!(rel(w.log_rho_inv2(j, n).exp(), w.theta[n] * (-2.0 * s).exp()) < 1e-12);
            assert_eq!(w.sigma_field().level(n)[j], s);
        }
    }
    assert!(w.damping_field().values().iter().all(|&x| (0.0..=1.0).contains(&x)));
}

#[test]
fn lambda_doubles_until_sigma_is_positive() {
    let p = desk_problem(CaseFlag::Shared, 1e3);
    let w = weights_for(&p, &radial_regions(CaseFlag::Shared), 1.0, 0.01);
    let steps = (w.lambda / 0.01).log2();
    assert!(w.lambda > 0.01 && (steps - steps.round()).abs() < 1e-12);
    for j in 0..p.n_cells() {
        assert!(w.sigma(0, j, 0) > 0.0);
    }
    // a flat weight can never make the spatial factor positive
    let mut flat = default_psi(32, CaseFlag::Shared);
    flat.values[0].iter_mut().for_each(|v| *v = 0.0);
    flat.sup = 0.0;
    assert!(matches!(build_weights(p.grid(), flat, 1.0, 1.0, 1.0, 12), Err(Error::LambdaEscalationFailure)));
    let psi = default_psi(32, CaseFlag::Shared);
    assert!(matches!(build_weights(p.grid(), psi, 0.0, 1.0, 1.0, 12), Err(Error::InvalidArgument(_))));
}

#[test]
fn geometry_errors() {
    let g = radial_grid(1000);
    let tiny = PsiVariant::Single { omega0: (1.0, 1.002) };
    assert!(matches!(build_psi(&g, &tiny), Err(Error::CriticalPointLeak { .. })));

    let coarse = radial_grid(16);
    let narrow = PsiVariant::Single { omega0: (1.33, 1.36) };
    assert!(matches!(build_psi(&coarse, &narrow), Err(Error::WeightGeometry(_))));
    assert!(matches!(build_psi(&coarse, &PsiVariant::Single { omega0: (0.8, 1.2) }), Err(Error::WeightGeometry(_))));

    let square = build_grid(&GridSpec::tensor(2, 1.5, 16)).unwrap();
    assert!(matches!(build_psi(&square, &PsiVariant::Single { omega0: (1.2, 1.6) }), Err(Error::WeightGeometry(_))));

    let boxes = RegionSpec {
        control: vec![geometry::Shape::Box { lo: vec![0.5, -1.5], hi: vec![1.5, 1.5] }],
        ..radial_regions(CaseFlag::Shared)
    };
    assert!(matches!(default_variant(&square, &boxes), Err(Error::WeightGeometry(_))));
}

#[test]
fn tensor_weight_is_finite_and_logarithmic_near_origin() {
    let g = build_grid(&GridSpec::tensor(2, 1.5, 16)).unwrap();
    let psi = build_psi(&g, &PsiVariant::Single { omega0: (1.1, 1.3) }).unwrap();
    assert!(psi.values[0].iter().all(|v| v.is_finite()));
    for j in 0..g.n_cells() {
        if g.radius(j) < 1.0 {
            assert!((psi.values[0][j] - g.radius(j).ln()).abs() < 1e-14);
        }
    }
}

#[test]
fn weights_are_deterministic() {
    let a = default_psi(64, CaseFlag::Distinct);
    let b = default_psi(64, CaseFlag::Distinct);
    assert_eq!(a, b);
    let p = desk_problem(CaseFlag::Distinct, 1e3);
    let spec = radial_regions(CaseFlag::Distinct);
    assert_eq!(weights_for(&p, &spec, 1.0, 1.0), weights_for(&p, &spec, 1.0, 1.0));
}

#[test]
fn critical_hardy_weight_drops_the_potential_term() {
    let p = radial_problem(32, 12, 0.5, 0.25, [1e3, 1e3], CaseFlag::Shared);
    let w = weights_for(&p, &radial_regions(CaseFlag::Shared), 1.0, 1.0);
    let mut r = rng(1);
    let s = carleman_sample(&p, &w, &p.random_unit_vector(&mut r), &p.random_unit_field(None, &mut r)).unwrap();
    assert_eq!(s.log_terms[3], f64::NEG_INFINITY);
    assert!(s.log_terms[0].is_finite() && s.log_lhs.is_finite());

    let p = desk_problem(CaseFlag::Shared, 1e3);
    let s = carleman_sample(&p, &w, &p.random_unit_vector(&mut r), &p.random_unit_field(None, &mut r)).unwrap();
    assert!(s.log_terms.iter().all(|t| t.is_finite()));
}

#[test]
fn degenerate_right_side_is_rejected() {
    let p = desk_problem(CaseFlag::Shared, 1e3);
    let w = weights_for(&p, &radial_regions(CaseFlag::Shared), 1.0, 1.0);
    let zero = vec![0.0; p.n_cells()];
    assert!(matches!(carleman_sample(&p, &w, &zero, &p.zeros()), Err(Error::DegenerateRhs)));
}

#[test]
fn ratio_is_scale_invariant_and_finite() {
    let p = desk_problem(CaseFlag::Shared, 1e3);
    let w = weights_for(&p, &radial_regions(CaseFlag::Shared), 1.0, 1.0);
    let mut r = rng(2);
    let u0 = p.random_unit_vector(&mut r);
    let g = p.random_unit_field(None, &mut r);
    let a = carleman_sample(&p, &w, &u0, &g).unwrap();
    let big: Vec<f64> = u0.iter().map(|x| 1e6 * x).collect();
    let b = carleman_sample(&p, &w, &big, &g.scaled(1e6)).unwrap();
    assert!(rel(a.ratio, b.ratio) < 1e-10);
    let many = carleman_ratio(&p, &w, 10, &mut r).unwrap();
    assert_eq!(many.samples.len(), 10);
    assert!(many.max.is_finite() && many.max > 0.0);
}

#[test]
fn admissibility_examples() {
    let p = desk_problem(CaseFlag::Shared, 1e3);
    let w = weights_for(&p, &radial_regions(CaseFlag::Shared), 1.0, 1.0);
    let mask = &p.regions.targets[0];
    let mut r = rng(3);
    let traj = p.random_field(None, &mut r);

    let same = target_admissibility(&p, &w, &traj, &traj, mask).unwrap();
    assert_eq!(same.log_value, f64::NEG_INFINITY);
    assert_eq!(same.value, 0.0);
    assert!(!same.warn);

    let t_final = p.solver.t_final();
    let fading = traj.combine(1.0, &Field::from_fn(p.n_cells(), 12, t_final, |n, _| (t_final - w.midpoint(n.min(11))).powi(4)), 1.0).unwrap();
    let a = target_admissibility(&p, &w, &traj, &fading, mask).unwrap();
    assert!(a.log_value.is_finite());

    let offset = traj.combine(1.0, &p.zeros().map(|_| 1.0), 1.0).unwrap();
    let b = target_admissibility(&p, &w, &traj, &offset, mask).unwrap();
    assert!(b.warn && b.log_value > a.log_value);

    let wrong = Field::zeros(p.n_cells(), 5, t_final);
    assert!(matches!(target_admissibility(&p, &w, &traj, &wrong, mask), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn log_sum_handles_extremes() {
    let mut s = LogSum::default();
    assert_eq!(s.value(), f64::NEG_INFINITY);
    s.add(f64::NEG_INFINITY);
    assert_eq!(s.value(), f64::NEG_INFINITY);
    for _ in 0..1000 {
        s.add(1e5);
    }
    assert!(rel(s.value(), 1e5 + 1000f64.ln()) < 1e-14);
    s.add(-1e5);
    assert!(rel(s.value(), 1e5 + 1000f64.ln()) < 1e-14);
}

#[test]
fn discrete_gradient_of_constant_lives_at_the_wall() {
    let g = radial_grid(16);
    let d = gradient_squared(&g, &vec![1.0; 16]);
    assert!(d[..15].iter().all(|&x| x == 0.0));
    assert!(d[15] > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn profile_is_continuous_at_every_knot(a in 1.0f64..1.3, width in 0.05f64..0.4) {
        let b = a + width;
        let prof = &build_profiles(a, b, &[a + 0.5 * width], 2.0).unwrap()[0];
        for knot in [1.0, a, a + 0.5 * width, b] {
            let (l, dl) = prof.eval(knot - 1e-10);
            let (r, dr) = prof.eval(knot + 1e-10);
            prop_assert!((l - r).abs() < 1e-7 && (dl - dr).abs() < 1e-5);
        }
        prop_assert!(prof.eval(2.0).0.abs() < 1e-12);
        prop_assert!(prof.sup() >= prof.eval(1.0).0);
    }

    #[test]
    fn sigma_stays_positive(s in 0.1f64..10.0, lambda in 0.5f64..4.0, case in any::<bool>()) {
        let case = if case { CaseFlag::Shared } else { CaseFlag::Distinct };
        let p = desk_problem(case, 1e3);
        let w = weights_for(&p, &radial_regions(case), s, lambda);
        for k in 0..w.psi.values.len() {
            for n in 0..p.solver.n_steps() {
                for j in 0..p.n_cells() {
                    prop_assert!(w.sigma(k, j, n) > 0.0);
                }
            }
        }
    }
}
