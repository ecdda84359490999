#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use hardy_control::geometry::Shape;
use hardy_control::*;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn scenario(name: &str) -> Scenario {
    Scenario::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)).unwrap()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn field_rel(a: &Field, b: &Field) -> f64 {
    let num: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = a.values().iter().map(|x| x * x).sum::<f64>().sqrt().max(b.values().iter().map(|x| x * x).sum::<f64>().sqrt());
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn annuli(v: &[(f64, f64)]) -> Vec<Shape> {
    v.iter().map(|&(a, b)| Shape::annulus(a, b)).collect()
}

/// The bundled radial geometry on another resolution.
pub fn radial_regions(case: CaseFlag) -> RegionSpec {
    let targets = match case {
        CaseFlag::Shared => [annuli(&[(1.3, 1.6)]), annuli(&[(1.3, 1.6)])],
        CaseFlag::Distinct => [annuli(&[(1.25, 1.45)]), annuli(&[(1.35, 1.55)])],
    };
    RegionSpec {
        control: annuli(&[(0.0, 0.6), (1.2, 1.5)]),
        followers: [annuli(&[(1.0, 1.2)]), annuli(&[(1.5, 1.7)])],
        targets,
        case,
    }
}

pub fn radial_problem(cells: usize, nt: usize, theta: f64, mu: f64, alpha: [f64; 2], case: CaseFlag) -> Problem {
    Problem::build(&ProblemSpec {
        grid: GridSpec::radial(2.0, cells),
        mu,
        regions: radial_regions(case),
        t_final: 1.0,
        scheme: TimeScheme { theta, n_steps: nt },
        alpha,
        linear_solver: LinearSolver::Direct,
    })
    .unwrap()
}

/// A small problem for dense oracles.
pub fn desk_problem(case: CaseFlag, alpha: f64) -> Problem {
    radial_problem(32, 12, 0.5, 0.2, [alpha, alpha], case)
}

/// Random initial datum and follower targets supported on the target regions.
pub fn random_data(p: &Problem, rng: &mut ChaCha8Rng) -> NashData {
    let initial = p.random_unit_vector(rng);
    let t0 = p.random_field(Some(&p.regions.targets[0]), rng);
    let t1 = if p.regions.shared_targets() { t0.clone() } else { p.random_field(Some(&p.regions.targets[1]), rng) };
    NashData { initial, targets: [t0, t1], state_source: None }
}

pub fn mask_indices(mask: &[bool]) -> Vec<usize> {
    (0..mask.len()).filter(|&j| mask[j]).collect()
}

/// Dense reimplementation of the θ-scheme with an LU factorisation.
pub struct DenseStepper {
    pub n: usize,
    pub nt: usize,
    pub dt: f64,
    pub mass: DVector<f64>,
    lhs: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    explicit: DMatrix<f64>,
}

impl DenseStepper {
    pub fn new(p: &Problem) -> Self {
        let k = dense_stiffness(p.solver.operator());
        let n = p.n_cells();
        let dt = p.solver.dt();
        let theta = p.solver.scheme().theta;
        let mass = DVector::from_column_slice(p.solver.mass());
        let m = DMatrix::from_diagonal(&mass);
        let lhs = (&m + &k * (theta * dt)).lu();
        let explicit = &m - &k * ((1.0 - theta) * dt);
        DenseStepper { n, nt: p.solver.n_steps(), dt, mass, lhs, explicit }
    }

    /// Levels `0..=nt`; `src[n]` is the source on interval `n`.
    pub fn forward(&self, y0: &DVector<f64>, src: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut out = vec![y0.clone()];
        for n in 0..self.nt {
            let rhs = &self.explicit * &out[n] + src[n].component_mul(&self.mass) * self.dt;
            out.push(self.lhs.solve(&rhs).unwrap());
        }
        out
    }

    /// Matrix taking sources on `mask × (0,T)` (cell-major within each interval) to
    /// state levels `0..nt` flattened level-major.
    pub fn propagator(&self, mask: &[bool]) -> DMatrix<f64> {
        let cells = mask_indices(mask);
        let cols = cells.len() * self.nt;
        let mut out = DMatrix::zeros(self.n * self.nt, cols);
        let zero = DVector::zeros(self.n);
        for n in 0..self.nt {
            for (c, &j) in cells.iter().enumerate() {
                let mut src = vec![DVector::zeros(self.n); self.nt];
                src[n][j] = 1.0;
                let y = self.forward(&zero, &src);
                for lvl in 0..self.nt {
                    for i in 0..self.n {
                        out[(lvl * self.n + i, n * cells.len() + c)] = y[lvl][i];
                    }
                }
            }
        }
        out
    }

    /// Quadrature weights `Δt M_j` of the space-time product on `mask`.
    pub fn weights(&self, mask: &[bool]) -> DVector<f64> {
        let cells = mask_indices(mask);
        DVector::from_iterator(cells.len() * self.nt, (0..self.nt).flat_map(|_| cells.iter().map(|&j| self.dt * self.mass[j])))
    }
}

/// Dense copy of the symmetric stiffness matrix.
pub fn dense_stiffness(op: &DiscreteOperator) -> DMatrix<f64> {
    let k = op.stiffness();
    let n = k.dim();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for (j, v) in k.row(i) {
            d[(i, j)] = v;
        }
    }
    d
}

/// Restrict a field to mask cells over intervals `0..nt`, in propagator column order.
pub fn pack(f: &Field, mask: &[bool]) -> DVector<f64> {
    let cells = mask_indices(mask);
    DVector::from_iterator(cells.len() * f.n_steps(), (0..f.n_steps()).flat_map(|n| cells.iter().map(move |&j| f.level(n)[j])))
}

/// Inverse of [`pack`].
pub fn unpack(v: &DVector<f64>, mask: &[bool], like: &Field) -> Field {
    let cells = mask_indices(mask);
    let mut out = Field::zeros(like.n_cells(), like.n_steps(), like.t_final());
    for n in 0..like.n_steps() {
        for (c, &j) in cells.iter().enumerate() {
            out.level_mut(n)[j] = v[n * cells.len() + c];
        }
    }
    out
}

/// Levels `0..nt` of a field, flattened level-major.
pub fn interval_values(f: &Field) -> DVector<f64> {
    DVector::from_column_slice(&f.values()[..f.n_steps() * f.n_cells()])
}

/// Carleman weights on the default geometry of `p`.
pub fn weights_for(p: &Problem, spec: &RegionSpec, s: f64, lambda: f64) -> hardy_control::carleman::CarlemanWeightSet {
    use hardy_control::carleman::{build_psi, build_weights, default_variant};
    let variant = default_variant(p.grid(), spec).unwrap();
    let psi = build_psi(p.grid(), &variant).unwrap();
    build_weights(p.grid(), psi, s, lambda, p.solver.t_final(), p.solver.n_steps()).unwrap()
}

/// Unit initial datum mixing the three lowest radial modes with random weights.
///
/// White noise would excite grid-scale modes that Crank-Nicolson barely damps and
/// that a control region barely sees.
pub fn smooth_initial(p: &Problem, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut r = rng(seed);
    let c: [f64; 3] = [r.gen_range(0.5..1.5), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
    let extent = p.grid().extent();
    let mut y0: Vec<f64> = p
        .grid()
        .radii()
        .iter()
        .map(|&x| (0..3).map(|k| c[k] * ((k + 1) as f64 * std::f64::consts::PI * x / extent).sin() / x).sum())
        .collect();
    let n = p.solver.norm_m(&y0);
    y0.iter_mut().for_each(|v| *v /= n);
    y0
}

pub fn heat_solver(spec: GridSpec, mu: f64, scheme: TimeScheme, t_final: f64, ls: LinearSolver) -> HeatSolver {
    let g = build_grid(&spec).unwrap();
    HeatSolver::new(Arc::new(assemble(&g, mu).unwrap()), scheme, t_final, ls).unwrap()
}

/// Smallest generalized eigenvalue of `K x = λ M x` by a dense symmetric solver.
pub fn dense_lambda_min(op: &DiscreteOperator) -> f64 {
    let k = dense_stiffness(op);
    let s: Vec<f64> = op.mass().iter().map(|m| 1.0 / m.sqrt()).collect();
    let d = DMatrix::from_diagonal(&DVector::from_vec(s));
    let a = &d * k * &d;
    SymmetricEigen::new(a).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// `y = e^{-t}·r²(R² - r²)` with `R = 2` and `μ = 0.2`.
pub fn manufactured(cells: usize, nt: usize, theta: f64) -> f64 {
    let (big_r, mu, t_final) = (2.0f64, 0.2, 1.0);
    let spec = GridSpec::radial(big_r, cells);
    let g = build_grid(&spec).unwrap();
    let s = heat_solver(spec, mu, TimeScheme { theta, n_steps: nt }, t_final, LinearSolver::Direct);
    let w = |r: f64| r * r * (big_r * big_r - r * r);
    // -Δw - μw/r²
    let lw = |r: f64| -(6.0 * big_r * big_r - 20.0 * r * r) - mu * (big_r * big_r - r * r);
    let dt = t_final / nt as f64;
    let src = Field::from_fn(cells, nt, t_final, |n, j| {
        let t = (n as f64 + 0.5) * dt;
        let r = g.radius(j);
        (-t).exp() * (-w(r) + lw(r))
    });
    let y0: Vec<f64> = g.radii().iter().map(|&r| w(r)).collect();
    let y = s.forward(&y0, Some(&src), None).unwrap();
    let exact: Vec<f64> = g.radii().iter().map(|&r| (-t_final).exp() * w(r)).collect();
    let diff: Vec<f64> = y.terminal().iter().zip(&exact).map(|(a, b)| a - b).collect();
    s.norm_m(&diff) / s.norm_m(&exact)
}

/// Largest error over the coarse time levels against a much finer step on the same mesh.
pub fn temporal_error(nt: usize, theta: f64) -> f64 {
    let spec = GridSpec::radial(2.0, 64);
    let g = build_grid(&spec).unwrap();
    let refine = 64;
    let run = |steps: usize| {
        let s = heat_solver(spec.clone(), 0.2, TimeScheme { theta, n_steps: steps }, 1.0, LinearSolver::Direct);
        let dt = 1.0 / steps as f64;
        // the source vanishes at t = 0, so zero initial data are compatible
        let src = Field::from_fn(64, steps, 1.0, |n, j| ((n as f64 + 0.5) * dt * 3.0).sin() * (-(g.radius(j) - 1.3).powi(2) * 8.0).exp());
        (s.forward(&vec![0.0; 64], Some(&src), None).unwrap(), s)
    };
    let (fine, s) = run(nt * refine);
    let (coarse, _) = run(nt);
    let scale = (0..=nt).map(|n| s.norm_m(fine.level(n * refine))).fold(0.0, f64::max);
    (0..=nt)
        .map(|n| {
            let d: Vec<f64> = coarse.level(n).iter().zip(fine.level(n * refine)).map(|(a, b)| a - b).collect();
            s.norm_m(&d)
        })
        .fold(0.0, f64::max)
        / scale
}

/// Dense follower system `A x = rhs` in the coordinates of [`pack`].
pub fn dense_nash_system(p: &Problem, data: &NashData, f: &Field) -> (DMatrix<f64>, DVector<f64>) {
    let d = DenseStepper::new(p);
    let all = vec![true; p.n_cells()];
    let w_out = d.weights(&all);
    let props = [d.propagator(&p.regions.followers[0]), d.propagator(&p.regions.followers[1])];
    let w_in = [d.weights(&p.regions.followers[0]), d.weights(&p.regions.followers[1])];
    let target_rows = |i: usize| -> DVector<f64> {
        DVector::from_iterator(d.n * d.nt, (0..d.nt).flat_map(|_| p.regions.targets[i].iter().map(|&b| if b { 1.0 } else { 0.0 })))
    };
    let sizes = [props[0].ncols(), props[1].ncols()];
    let total = sizes[0] + sizes[1];
    let mut a = DMatrix::zeros(total, total);
    let mut rhs = DVector::zeros(total);

    let src: Vec<DVector<f64>> = (0..d.nt).map(|n| DVector::from_column_slice(f.restricted(&p.regions.control).level(n))).collect();
    let u = d.forward(&DVector::from_column_slice(&data.initial), &src);
    let u_flat = DVector::from_iterator(d.n * d.nt, u[..d.nt].iter().flat_map(|v| v.iter().cloned()));

    let offset = [0, sizes[0]];
    for i in 0..2 {
        let di = target_rows(i);
        let left = DMatrix::from_diagonal(&w_in[i].map(|x| 1.0 / x)) * props[i].transpose() * DMatrix::from_diagonal(&w_out.component_mul(&di));
        for k in 0..2 {
            let block = &left * &props[k];
            a.view_mut((offset[i], offset[k]), (sizes[i], sizes[k])).copy_from(&block);
        }
        for c in 0..sizes[i] {
            a[(offset[i] + c, offset[i] + c)] += p.alpha[i];
        }
        let mismatch = interval_values(&data.targets[i]) - &u_flat;
        rhs.rows_mut(offset[i], sizes[i]).copy_from(&(&left * mismatch));
    }
    (a, rhs)
}

