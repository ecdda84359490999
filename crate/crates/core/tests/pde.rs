use std::f64::consts::PI;

use hardy_control::*;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

mod common;
use common::{dense_lambda_min, heat_solver as solver, manufactured, rel, rng, temporal_error, DenseStepper};

fn noise(n: usize, r: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn noise_field(s: &HeatSolver, r: &mut impl Rng) -> Field {
    let mut f = s.zeros();
    for n in 0..s.n_steps() {
        for x in f.level_mut(n) {
            *x = r.sample(StandardNormal);
        }
    }
    f
}

#[test]
fn stiffness_is_exactly_symmetric() {
    for (spec, mu) in [(GridSpec::radial(2.0, 48), 0.25), (GridSpec::tensor(2, 1.5, 12), 0.0), (GridSpec::tensor(3, 1.2, 8), 0.2)] {
        let op = assemble(&build_grid(&spec).unwrap(), mu).unwrap();
        let k = op.stiffness();
        for i in 0..k.dim() {
            for (j, v) in k.row(i) {
                assert_eq!(v, k.get(j, i), "entry ({i},{j})");
            }
        }
    }
}

#[test]
fn laplacian_has_m_matrix_structure() {
    for spec in [GridSpec::radial(2.0, 32), GridSpec::tensor(2, 1.5, 16), GridSpec::tensor(3, 1.2, 8)] {
        let op = assemble(&build_grid(&spec).unwrap(), 0.0).unwrap();
        for j in 0..op.n_cells() {
            let row = op.operator_row(j);
            let sum: f64 = row.iter().map(|e| e.1).sum();
            assert!(sum >= -1e-12 * row.iter().map(|e| e.1.abs()).sum::<f64>());
            assert!(row.iter().all(|&(c, v)| c == j || v <= 0.0));
        }
    }
}

#[test]
fn five_point_stencil_in_the_plane() {
    let g = build_grid(&GridSpec::tensor(2, 1.5, 16)).unwrap();
    let op = assemble(&g, 0.0).unwrap();
    let h = g.spacing();
    let j = g.tensor_flat(&[6, 9]);
    let row = op.operator_row(j);
    assert_eq!(row.len(), 5);
    for (c, v) in row {
        let expect = if c == j { 4.0 / (h * h) } else { -1.0 / (h * h) };
        assert!((v - expect).abs() < 1e-10 * expect.abs());
    }
}

#[test]
fn radial_operator_is_consistent_with_the_laplacian() {
    // sin(πr/R)/r is a Dirichlet eigenfunction with eigenvalue (π/R)²
    let mut errs = Vec::new();
    for cells in [32, 64, 128] {
        let g = build_grid(&GridSpec::radial(2.0, cells)).unwrap();
        let op = assemble(&g, 0.0).unwrap();
        let u: Vec<f64> = g.radii().iter().map(|r| (PI * r / 2.0).sin() / r).collect();
        let mut au = vec![0.0; cells];
        op.apply(&u, &mut au);
        let lam = (PI / 2.0).powi(2);
        let err = (0..cells)
            .filter(|&j| g.radius(j) > 0.5 && g.radius(j) < 1.5)
            .map(|j| (au[j] - lam * u[j]).abs() / u[j].abs())
            .fold(0.0, f64::max);
        errs.push(err);
    }
    assert!(errs[2] < 1e-3, "{errs:?}");
    assert!(errs[0] / errs[1] > 3.5 && errs[1] / errs[2] > 3.5, "{errs:?}");
}

#[test]
fn critical_potential_keeps_operator_nonnegative() {
    let op = assemble(&build_grid(&GridSpec::radial(2.0, 128)).unwrap(), 0.25).unwrap();
    let dense = dense_lambda_min(&op);
    assert!(dense >= -1e-8, "{dense}");
    let iterated = op.smallest_eigenvalue(1e-13, 10_000).unwrap();
    assert!(rel(dense, iterated) < 1e-8, "{dense} vs {iterated}");
    assert!(op.positivity_diagnostic().unwrap() >= -1e-8);
    for mu in [0.0, 0.1, 0.2, 0.24] {
        let op = assemble(&build_grid(&GridSpec::radial(2.0, 128)).unwrap(), mu).unwrap();
        assert!(dense_lambda_min(&op) >= -1e-8);
    }
}

#[test]
fn first_dirichlet_eigenvalue_within_two_percent() {
    let ball = assemble(&build_grid(&GridSpec::radial(2.0, 64)).unwrap(), 0.0).unwrap();
    let exact = (PI / 2.0).powi(2);
    assert!(rel(ball.smallest_eigenvalue(1e-12, 10_000).unwrap(), exact) < 0.02);

    let square = assemble(&build_grid(&GridSpec::tensor(2, 1.5, 64)).unwrap(), 0.0).unwrap();
    let exact = 2.0 * (PI / 3.0).powi(2);
    assert!(rel(square.smallest_eigenvalue(1e-12, 10_000).unwrap(), exact) < 0.02);
}

#[test]
fn zero_data_gives_zero_solutions() {
    for theta in [0.5, 1.0] {
        let s = solver(GridSpec::radial(2.0, 16), 0.2, TimeScheme { theta, n_steps: 10 }, 1.0, LinearSolver::Direct);
        let y = s.forward(&vec![0.0; 16], Some(&s.zeros()), None).unwrap();
        assert!(y.is_zero());
        let b = s.backward(&vec![0.0; 16], Some(&s.zeros()), None).unwrap();
        assert!(b.field.is_zero() && b.initial.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn eigenmode_decays_at_the_analytic_rate() {
    let spec = GridSpec::tensor(2, 1.5, 32);
    let g = build_grid(&spec).unwrap();
    let s = solver(spec, 0.0, TimeScheme::crank_nicolson(40), 0.5, LinearSolver::Direct);
    let y0: Vec<f64> = (0..g.n_cells()).map(|j| g.center(j).iter().map(|x| (PI * (x + 1.5) / 3.0).sin()).product()).collect();
    let y = s.forward(&y0, None, None).unwrap();
    let lam = 2.0 * (PI / 3.0).powi(2);
    let decay = (-lam * 0.5).exp();
    let diff: Vec<f64> = y.terminal().iter().zip(&y0).map(|(a, b)| a - decay * b).collect();
    let err = s.norm_m(&diff) / s.norm_m(&y0);
    assert!(err <= 1e-2, "{err}");
}

#[test]
fn manufactured_solution_converges_in_space() {
    let e: Vec<f64> = [16, 32, 64].iter().map(|&c| manufactured(c, 512, 0.5)).collect();
    assert!(e[1] <= 1e-2, "{e:?}");
    let orders: Vec<f64> = e.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    assert!(orders.iter().all(|o| *o > 1.7), "{e:?} {orders:?}");
}

#[test]
fn time_order_matches_the_scheme() {
    for (theta, expect) in [(1.0, 1.0), (0.5, 2.0)] {
        let e: Vec<f64> = [20, 40, 80].iter().map(|&nt| temporal_error(nt, theta)).collect();
        let orders: Vec<f64> = e.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
        assert!(orders.iter().all(|o| (o - expect).abs() < 0.3), "theta {theta}: {e:?} {orders:?}");
    }
    let (ie, cn) = (manufactured(32, 200, 1.0), manufactured(32, 40, 0.5));
    assert!(ie <= 1e-2 && cn <= 1e-2, "{ie} {cn}");
}

#[test]
fn forward_matches_dense_stepper() {
    for theta in [0.5, 1.0] {
        let p = common::radial_problem(24, 9, theta, 0.2, [1.0, 1.0], CaseFlag::Shared);
        let dense = DenseStepper::new(&p);
        let mut r = rng(5);
        let y0 = noise(24, &mut r);
        let f = noise_field(&p.solver, &mut r);
        let y = p.solver.forward(&y0, Some(&f), None).unwrap();
        let src: Vec<DVector<f64>> = (0..9).map(|n| DVector::from_column_slice(f.level(n))).collect();
        let yd = dense.forward(&DVector::from_vec(y0), &src);
        for n in 0..=9 {
            for j in 0..24 {
                assert!((y.level(n)[j] - yd[n][j]).abs() <= 1e-12 * (1.0 + yd[n][j].abs()));
            }
        }
    }
}

#[test]
fn backward_reverses_time_for_implicit_euler() {
    for spec in [GridSpec::radial(2.0, 32), GridSpec::tensor(2, 1.5, 12)] {
        let n = build_grid(&spec).unwrap().n_cells();
        let s = solver(spec, 0.0, TimeScheme::implicit_euler(16), 1.0, LinearSolver::Direct);
        let y0 = noise(n, &mut rng(2));
        let y = s.forward(&y0, None, None).unwrap();
        let b = s.backward(&y0, None, None).unwrap();
        for k in 0..=16 {
            for j in 0..n {
                assert!((b.field.level(k)[j] - y.level(16 - k)[j]).abs() <= 1e-12 * (1.0 + y.level(16 - k)[j].abs()));
            }
        }
    }
}

#[test]
fn inner_product_examples() {
    let spec = GridSpec::tensor(2, 1.5, 16);
    let s = solver(spec.clone(), 0.0, TimeScheme::implicit_euler(10), 0.7, LinearSolver::Direct);
    let ones = s.zeros().map(|_| 1.0);
    assert!(rel(s.inner_q(&ones, &ones, None).unwrap(), 9.0 * 0.7) < 1e-13);

    let spec = GridSpec::radial(2.0, 64);
    let s = solver(spec.clone(), 0.0, TimeScheme::implicit_euler(10), 1.0, LinearSolver::Direct);
    let ones = s.zeros().map(|_| 1.0);
    let vol = 4.0 / 3.0 * PI * 8.0;
    assert!(rel(s.inner_q(&ones, &ones, None).unwrap(), vol) < 1e-3);

    let g = build_grid(&spec).unwrap();
    let inner: Vec<bool> = g.radii().iter().map(|&r| r < 1.0).collect();
    let outer: Vec<bool> = inner.iter().map(|b| !b).collect();
    let a = ones.restricted(&inner);
    let b = ones.restricted(&outer);
    assert_eq!(s.inner_q(&a, &b, None).unwrap(), 0.0);
    assert_eq!(s.inner_q(&ones, &ones, Some(&vec![false; 64])).unwrap(), 0.0);

    let other = Field::zeros(64, 11, 1.0);
    assert!(matches!(s.inner_q(&ones, &other, None), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn pcg_agrees_with_direct_factorisation() {
    let spec = GridSpec::tensor(2, 1.5, 16);
    let direct = solver(spec.clone(), 0.0, TimeScheme::crank_nicolson(12), 0.5, LinearSolver::Direct);
    let pcg = solver(spec, 0.0, TimeScheme::crank_nicolson(12), 0.5, LinearSolver::Pcg { tol: 1e-13, max_iter: 10_000 });
    let mut r = rng(9);
    let y0 = noise(256, &mut r);
    let f = noise_field(&direct, &mut r);
    let a = direct.forward(&y0, Some(&f), None).unwrap();
    let b = pcg.forward(&y0, Some(&f), None).unwrap();
    assert!(common::field_rel(&a, &b) < 1e-10);
    let starved = solver(GridSpec::tensor(2, 1.5, 16), 0.0, TimeScheme::crank_nicolson(4), 0.5, LinearSolver::Pcg { tol: 1e-14, max_iter: 2 });
    assert!(matches!(starved.forward(&y0, None, None), Err(Error::LinearSolveFailure(_))));
}

#[test]
fn scheme_validation() {
    assert!(TimeScheme { theta: 0.7, n_steps: 10 }.validate().is_err());
    assert!(TimeScheme { theta: 1.0, n_steps: 0 }.validate().is_err());
    assert!(TimeScheme::crank_nicolson(3).validate().is_ok());
}

#[test]
fn field_files_round_trip_bit_exactly() {
    let mut r = rng(4);
    let values: Vec<f64> = (0..5 * 7).map(|_| r.sample::<f64, _>(StandardNormal) * 1e-7).collect();
    let f = Field::from_values(7, 4, 0.3, values).unwrap();
    let mut buf = Vec::new();
    f.write_binary(&mut buf).unwrap();
    let g = Field::read_binary(buf.as_slice()).unwrap();
    assert_eq!(f, g);
    let h = Field::from_csv(&f.to_csv()).unwrap();
    assert_eq!(f.values(), h.values());
    assert!(Field::from_values(7, 4, 0.3, vec![0.0; 3]).is_err());
}

fn grid_case() -> impl Strategy<Value = (GridSpec, f64)> {
    prop_oneof![
        (16usize..40, 0.0f64..=0.25).prop_map(|(n, mu)| (GridSpec::radial(2.0, n), mu)),
        (4usize..8).prop_map(|k| (GridSpec::tensor(2, 1.5, 2 * k), 0.0)),
        Just((GridSpec::tensor(3, 1.2, 8), 0.2)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backward_is_the_exact_transpose(case in grid_case(), cn in any::<bool>(), seed in any::<u64>(), reactive in any::<bool>()) {
        let (spec, mu) = case;
        let scheme = if cn { TimeScheme::crank_nicolson(7) } else { TimeScheme::implicit_euler(7) };
        let s = solver(spec, mu, scheme, 0.8, LinearSolver::Direct);
        let n = s.n_cells();
        let mut r = rng(seed);
        let reaction = reactive.then(|| noise_field(&s, &mut r).map(|x| 0.3 * x.tanh()));
        let (y0, pt) = (noise(n, &mut r), noise(n, &mut r));
        let (f, g) = (noise_field(&s, &mut r), noise_field(&s, &mut r));
        let y = s.forward(&y0, Some(&f), reaction.as_ref()).unwrap();
        let b = s.backward(&pt, Some(&g), reaction.as_ref()).unwrap();
        let lhs = s.inner_q(&y, &g, None).unwrap() + s.inner_m(y.terminal(), &pt);
        let rhs = s.inner_m(&y0, &b.initial) + s.inner_q(&f, &b.field, None).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())), "{lhs} {rhs}");

        // pure source pairing with zero initial and terminal data
        let y = s.forward(&vec![0.0; n], Some(&f), None).unwrap();
        let b = s.backward(&vec![0.0; n], Some(&g), None).unwrap();
        let a1 = s.inner_q(&y, &g, None).unwrap();
        let a2 = s.inner_q(&f, &b.field, None).unwrap();
        prop_assert!((a1 - a2).abs() <= 1e-12 * (1.0 + a1.abs()));
        prop_assert_eq!(b.field.terminal(), &vec![0.0; n][..]);
    }

    #[test]
    fn energy_never_grows_without_sources(mu in prop_oneof![Just(0.0), Just(0.2), Just(0.25)], cn in any::<bool>(), seed in any::<u64>()) {
        let scheme = if cn { TimeScheme::crank_nicolson(20) } else { TimeScheme::implicit_euler(20) };
        let s = solver(GridSpec::radial(2.0, 48), mu, scheme, 1.0, LinearSolver::Direct);
        let y = s.forward(&noise(48, &mut rng(seed)), None, None).unwrap();
        for n in 0..20 {
            prop_assert!(s.norm_m(y.level(n + 1)) <= s.norm_m(y.level(n)) * (1.0 + 1e-8));
        }
    }

    #[test]
    fn inner_product_is_bilinear(seed in any::<u64>()) {
        let s = solver(GridSpec::radial(2.0, 20), 0.1, TimeScheme::implicit_euler(6), 1.0, LinearSolver::Direct);
        let mut r = rng(seed);
        let (a, b, c) = (noise_field(&s, &mut r), noise_field(&s, &mut r), noise_field(&s, &mut r));
        let sum = b.combine(1.0, &c, 1.0).unwrap();
        let lhs = s.inner_q(&a, &sum, None).unwrap();
        let rhs = s.inner_q(&a, &b, None).unwrap() + s.inner_q(&a, &c, None).unwrap();
        let scale = s.norm_q(&a, None).unwrap() * (s.norm_q(&b, None).unwrap() + s.norm_q(&c, None).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-13 * scale);
    }

    #[test]
    fn binary_round_trip(values in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 12)) {
        let f = Field::from_values(4, 2, 1.0, values).unwrap();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        prop_assert_eq!(Field::read_binary(buf.as_slice()).unwrap(), f.clone());
        let back = Field::from_csv(&f.to_csv()).unwrap();
        prop_assert_eq!(back.values(), f.values());
    }
}
