//! Semilinear extension: `y_t - Δy - μ|x|⁻²y = F(y) + f1_O + v¹1_{O1} + v²1_{O2}`.
//!
//! `F` is treated explicitly in time. The followers' quasi-equilibrium is the fixed
//! point of `u ↦ y_u`, where `y_u` solves the optimality system linearised at `u`.
//! The leader problem is handled by fixed point on the deviation `z = y - ȳ` from a
//! free trajectory, freezing `G(z) = ∫₀¹ F'(ȳ + τz) dτ` and `F'(ȳ + z)` at each step.

use gauss_quad::GaussLegendre;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leader::{LeaderResult, LeaderSystem, Penalty};
use crate::nash::{costs_for_state, solve_optimality_system, Coefficients, CostReport, NashData, Pair};
use crate::pde::Field;
use crate::problem::Problem;

/// Reaction nonlinearity `F` with `F(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    Zero,
    /// `κ tanh(y)`.
    ScaledTanh { kappa: f64 },
    /// `κ sin(y)`.
    BoundedSine { kappa: f64 },
    /// `κ y`; `F` itself is unbounded.
    Linear { kappa: f64 },
}

impl Nonlinearity {
    pub fn from_name(name: &str, kappa: f64) -> Result<Self> {
        Ok(match name {
            "zero" => Nonlinearity::Zero,
            "scaled_tanh" | "tanh" => Nonlinearity::ScaledTanh { kappa },
            "bounded_sine" | "sine" => Nonlinearity::BoundedSine { kappa },
            "linear" => Nonlinearity::Linear { kappa },
            other => return Err(Error::InvalidArgument(format!("unknown nonlinearity {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Nonlinearity::Zero => "zero",
            Nonlinearity::ScaledTanh { .. } => "scaled_tanh",
            Nonlinearity::BoundedSine { .. } => "bounded_sine",
            Nonlinearity::Linear { .. } => "linear",
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Nonlinearity::Zero)
    }

    pub fn value(&self, y: f64) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::ScaledTanh { kappa } => kappa * y.tanh(),
            Nonlinearity::BoundedSine { kappa } => kappa * y.sin(),
            Nonlinearity::Linear { kappa } => kappa * y,
        }
    }

    pub fn derivative(&self, y: f64) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::ScaledTanh { kappa } => {
                let c = y.cosh();
                kappa / (c * c)
            }
            Nonlinearity::BoundedSine { kappa } => kappa * y.cos(),
            Nonlinearity::Linear { kappa } => kappa,
        }
    }

    pub fn second_derivative(&self, y: f64) -> f64 {
        match *self {
            Nonlinearity::Zero | Nonlinearity::Linear { .. } => 0.0,
            Nonlinearity::ScaledTanh { kappa } => {
                let c = y.cosh();
                -2.0 * kappa * y.tanh() / (c * c)
            }
            Nonlinearity::BoundedSine { kappa } => -kappa * y.sin(),
        }
    }

    /// `(sup|F|, sup|F'|, sup|F''|)`.
    pub fn bounds(&self) -> (f64, f64, f64) {
        match *self {
            Nonlinearity::Zero => (0.0, 0.0, 0.0),
            Nonlinearity::ScaledTanh { kappa } => (kappa.abs(), kappa.abs(), kappa.abs() * 4.0 / (3.0 * 3f64.sqrt())),
            Nonlinearity::BoundedSine { kappa } => (kappa.abs(), kappa.abs(), kappa.abs()),
            Nonlinearity::Linear { kappa } => (f64::INFINITY, kappa.abs(), 0.0),
        }
    }

    /// Sample `F`, `F'`, `F''` on `n` points of `[-range, range]` against the stated bounds.
    pub fn bounds_hold(&self, n: usize, range: f64) -> bool {
        let (b0, b1, b2) = self.bounds();
        let slack = 1.0 + 1e-12;
        (0..n).all(|k| {
            let y = -range + 2.0 * range * k as f64 / (n - 1) as f64;
            self.value(y).abs() <= b0 * slack && self.derivative(y).abs() <= b1 * slack && self.second_derivative(y).abs() <= b2 * slack
        })
    }
}

fn check_step(p: &Problem, nl: &Nonlinearity) -> Result<()> {
    let q = p.solver.dt() * nl.bounds().1;
    if q >= 1.0 {
        return Err(Error::StepTooLarge(q));
    }
    Ok(())
}

fn source_with(p: &Problem, data: &NashData, f: &Field, v: &Pair) -> Result<Field> {
    let r = &p.regions;
    let mut src = f.restricted(&r.control);
    src.axpy(1.0, &v[0].restricted(&r.followers[0]))?;
    src.axpy(1.0, &v[1].restricted(&r.followers[1]))?;
    if let Some(s) = &data.state_source {
        src.axpy(1.0, s)?;
    }
    Ok(src)
}

/// Free semilinear trajectory from `y0`.
pub fn solve_trajectory(p: &Problem, y0: &[f64], nl: &Nonlinearity) -> Result<Field> {
    check_step(p, nl)?;
    if nl.is_zero() {
        return p.solver.forward(y0, None, None);
    }
    p.solver.forward_with(y0, None, |_, y, out| {
        for (o, v) in out.iter_mut().zip(y) {
            *o = nl.value(*v);
        }
    })
}

/// Semilinear state for controls `(f, v)`; `data.state_source` is added to the source.
pub fn semilinear_state(p: &Problem, data: &NashData, nl: &Nonlinearity, f: &Field, v: &Pair) -> Result<Field> {
    check_step(p, nl)?;
    let src = source_with(p, data, f, v)?;
    p.solver.forward_with(&data.initial, None, |n, y, out| {
        for ((o, v), s) in out.iter_mut().zip(y).zip(src.level(n)) {
            *o = nl.value(*v) + s;
        }
    })
}

/// Follower adjoint linearised at the semilinear state `y`.
pub fn semilinear_adjoint(p: &Problem, data: &NashData, nl: &Nonlinearity, i: usize, y: &Field) -> Result<Field> {
    let g = y.combine(1.0, &data.targets[i], -1.0)?.restricted(&p.regions.targets[i]);
    let c = y.map(|x| nl.derivative(x));
    Ok(p.solver.backward(&vec![0.0; p.n_cells()], Some(&g), Some(&c))?.field)
}

/// `‖φ^i 1_{O_i} + α_i v^i‖ / (1 + ‖α_i v^i‖)` for the semilinear state.
pub fn semilinear_stationarity(p: &Problem, data: &NashData, nl: &Nonlinearity, i: usize, f: &Field, v: &Pair) -> Result<f64> {
    let y = semilinear_state(p, data, nl, f, v)?;
    let phi = semilinear_adjoint(p, data, nl, i, &y)?;
    let mask = &p.regions.followers[i];
    let av = v[i].restricted(mask).scaled(p.alpha[i]);
    let r = phi.restricted(mask).combine(1.0, &av, 1.0)?;
    Ok(p.solver.norm_q(&r, Some(mask))? / (1.0 + p.solver.norm_q(&av, Some(mask))?))
}

/// Follower costs of the semilinear state.
pub fn semilinear_costs(p: &Problem, data: &NashData, nl: &Nonlinearity, f: &Field, v: &Pair) -> Result<CostReport> {
    let y = semilinear_state(p, data, nl, f, v)?;
    costs_for_state(p, data, &y, f, v)
}

/// `G(z) = ∫₀¹ F'(ȳ + τz) dτ` by Gauss–Legendre quadrature; `F'(ȳ)` where `z = 0`.
pub fn g_coefficient(z: &Field, trajectory: &Field, nl: &Nonlinearity, nodes: usize) -> Result<Field> {
    if nodes < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 quadrature nodes, got {nodes}")));
    }
    z.same_shape(trajectory)?;
    let rule = GaussLegendre::new(nodes).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let pairs: Vec<(f64, f64)> = rule.as_node_weight_pairs().into_iter().map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w)).collect();
    let mut out = z.clone();
    for (o, (zv, yv)) in out.values_mut().iter_mut().zip(z.values().iter().zip(trajectory.values())) {
        *o = if *zv == 0.0 { nl.derivative(*yv) } else { pairs.iter().map(|(t, w)| w * nl.derivative(yv + t * zv)).sum() };
    }
    Ok(out)
}

/// A semilinear quasi-equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasiNash {
    pub state: Field,
    pub followers: Pair,
    pub adjoints: Pair,
    pub stationarity: [f64; 2],
    pub iterations: usize,
    /// `‖u_{k+1} - u_k‖_Q` per outer step.
    pub trace: Vec<f64>,
    /// Every frozen reaction coefficient stayed within `sup|F'|`.
    pub reaction_bounded: bool,
}

/// Outer fixed point `u ↦ y_u` for the followers' semilinear optimality system.
///
/// Stops when `‖u_{k+1} - u_k‖_Q ≤ tol·‖u_{k+1}‖_Q`; `start` defaults to the uncontrolled state.
pub fn solve_quasi_nash(
    p: &Problem,
    data: &NashData,
    nl: &Nonlinearity,
    f: &Field,
    tol: f64,
    max_iter: usize,
    start: Option<&Field>,
) -> Result<QuasiNash> {
    let zero: Pair = [p.zeros(), p.zeros()];
    let mut u = match start {
        Some(s) => s.clone(),
        None => semilinear_state(p, data, nl, f, &zero)?,
    };
    let inner_tol = (0.1 * tol).max(1e-14);
    let mut trace = Vec::new();
    let mut prev = f64::INFINITY;
    let mut growing = 0;
    let mut reaction_bounded = true;
    let bound = nl.bounds().1 * (1.0 + 1e-12);
    for it in 1..=max_iter {
        let coeffs = Coefficients { state: None, follower: Some(u.map(|x| nl.derivative(x))) };
        reaction_bounded &= coeffs.follower.as_ref().map_or(true, |c| c.max_abs() <= bound);
        let mut lin = data.clone();
        let mut src = u.map(|x| nl.value(x));
        if let Some(s) = &data.state_source {
            src.axpy(1.0, s)?;
        }
        lin.state_source = Some(src);
        let sol = solve_optimality_system(p, &coeffs, &lin, f, inner_tol, 4 * crate::nash::DEFAULT_MAX_ITER)?;
        let inc = p.solver.norm_q(&sol.state.combine(1.0, &u, -1.0)?, None)?;
        let size = p.solver.norm_q(&sol.state, None)?;
        trace.push(inc);
        u = sol.state;
        if inc <= tol * size || crate::nash::at_round_off(inc, prev, size) {
            let v = sol.followers;
            let state = semilinear_state(p, data, nl, f, &v)?;
            let adjoints = [semilinear_adjoint(p, data, nl, 0, &state)?, semilinear_adjoint(p, data, nl, 1, &state)?];
            let stationarity = [semilinear_stationarity(p, data, nl, 0, f, &v)?, semilinear_stationarity(p, data, nl, 1, f, &v)?];
            log::debug!("quasi-nash converged in {it} outer steps, increment {inc:e}");
            return Ok(QuasiNash { state, followers: v, adjoints, stationarity, iterations: it, trace, reaction_bounded });
        }
        if inc >= prev {
            growing += 1;
            if growing >= 3 {
                return Err(Error::OuterDivergence { increment: inc });
            }
        } else {
            growing = 0;
        }
        prev = inc;
    }
    Err(Error::MaxIterations { iterations: max_iter, residual: prev })
}

/// `Q`-distance between quasi-equilibria reached from the default start and from `alt`.
pub fn uniqueness_gap(p: &Problem, data: &NashData, nl: &Nonlinearity, f: &Field, tol: f64, alt: &Field) -> Result<f64> {
    let a = solve_quasi_nash(p, data, nl, f, tol, 200, None)?;
    let b = solve_quasi_nash(p, data, nl, f, tol, 200, Some(alt))?;
    let gap = p.solver.norm_q(&a.state.combine(1.0, &b.state, -1.0)?, None)?;
    if gap > 1e-6 {
        log::warn!("quasi-equilibrium is not unique: starts differ by {gap:e}");
    }
    Ok(gap)
}

/// One-sided perturbation test of a quasi-equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// `(follower, direction, ε, J_i(v̄ + εd) - J_i(v̄))`.
    pub entries: Vec<(usize, usize, f64, f64)>,
    pub base_costs: [f64; 2],
    pub min_difference: f64,
    /// `-1e-8·(1 + max J_i)`.
    pub threshold: f64,
    pub counterexample: bool,
    /// Fitted `d ln(ΔJ)/d ln ε` per `(follower, direction)`.
    pub slopes: Vec<f64>,
}

/// Perturb each follower separately along `n_dirs` random unit directions.
pub fn equilibrium_probe(
    p: &Problem,
    data: &NashData,
    nl: &Nonlinearity,
    f: &Field,
    eq: &QuasiNash,
    n_dirs: usize,
    eps_list: &[f64],
    rng: &mut impl Rng,
) -> Result<ProbeReport> {
    let base = semilinear_costs(p, data, nl, f, &eq.followers)?.followers;
    let threshold = -1e-8 * (1.0 + base[0].abs().max(base[1].abs()));
    let mut entries = Vec::new();
    let mut slopes = Vec::new();
    for i in 0..2 {
        for k in 0..n_dirs {
            let d = p.random_unit_field(Some(&p.regions.followers[i]), rng);
            let mut pts = Vec::new();
            for &e in eps_list {
                let mut v = eq.followers.clone();
                v[i].axpy(e, &d)?;
                let diff = semilinear_costs(p, data, nl, f, &v)?.followers[i] - base[i];
                entries.push((i, k, e, diff));
                if diff > 0.0 {
                    pts.push((e.ln(), diff.ln()));
                }
            }
            if pts.len() >= 2 {
                let n = pts.len() as f64;
                let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
                let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
                let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
                let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
                slopes.push(sxy / sxx);
            }
        }
    }
    let min_difference = entries.iter().map(|e| e.3).fold(f64::INFINITY, f64::min);
    Ok(ProbeReport { entries, base_costs: base, min_difference, threshold, counterexample: min_difference < threshold, slopes })
}

/// Output of the semilinear leader iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SemilinearLeader {
    pub leader: LeaderResult,
    /// `‖z_{k+1} - z_k‖_Q` per outer step.
    pub trace: Vec<f64>,
    /// `‖f_k‖` on `O × (0,T)` per outer step.
    pub control_norms: Vec<f64>,
    pub iterations: usize,
    /// `‖z(T)‖` of the last frozen-coefficient system.
    pub frozen_terminal_norm: f64,
    /// `‖y(T) - ȳ(T)‖` for the true semilinear quasi-equilibrium under the returned control.
    pub terminal_norm: f64,
    pub quasi_nash: QuasiNash,
    pub trajectory: Field,
}

/// Drive the semilinear state to within `ε` of the free trajectory from `trajectory_initial`.
#[allow(clippy::too_many_arguments)]
pub fn semilinear_leader(
    p: &Problem,
    data: &NashData,
    nl: &Nonlinearity,
    trajectory_initial: &[f64],
    eps: f64,
    penalty: Penalty,
    tol: f64,
    max_outer: usize,
) -> Result<SemilinearLeader> {
    let ybar = solve_trajectory(p, trajectory_initial, nl)?;
    let z0: Vec<f64> = data.initial.iter().zip(trajectory_initial).map(|(a, b)| a - b).collect();
    let zdata = NashData {
        initial: z0,
        targets: [data.targets[0].combine(1.0, &ybar, -1.0)?, data.targets[1].combine(1.0, &ybar, -1.0)?],
        state_source: None,
    };
    let mut z = p.zeros();
    let mut trace = Vec::new();
    let mut control_norms = Vec::new();
    let mut prev = f64::INFINITY;
    let mut growing = 0;
    let mut last = None;
    for it in 1..=max_outer {
        let coeffs = if nl.is_zero() {
            Coefficients::linear()
        } else {
            let shifted = ybar.combine(1.0, &z, 1.0)?;
            Coefficients { state: Some(g_coefficient(&z, &ybar, nl, 8)?), follower: Some(shifted.map(|x| nl.derivative(x))) }
        };
        let sys = LeaderSystem::new(p, zdata.clone()).with_coefficients(coeffs);
        let res = sys.minimize_leader(eps, penalty, 1e-10, 2000)?;
        let w = res.nash.state.clone();
        let inc = p.solver.norm_q(&w.combine(1.0, &z, -1.0)?, None)?;
        let size = p.solver.norm_q(&w, None)?;
        trace.push(inc);
        control_norms.push(p.solver.norm_q(&res.control, Some(&p.regions.control))?);
        z = w;
        last = Some(res);
        if nl.is_zero() || inc <= tol * size || crate::nash::at_round_off(inc, prev, size) {
            break;
        }
        if it == max_outer {
            return Err(Error::MaxIterations { iterations: it, residual: inc });
        }
        if inc >= prev {
            growing += 1;
            if growing >= 3 {
                return Err(Error::OuterDivergence { increment: inc });
            }
        } else {
            growing = 0;
        }
        prev = inc;
    }
    let leader = last.ok_or_else(|| Error::InvalidArgument("max_outer must be positive".into()))?;
    let frozen_terminal_norm = leader.terminal_norm;
    let quasi_nash = solve_quasi_nash(p, data, nl, &leader.control, 1e-12, 500, None)?;
    let gap: Vec<f64> = quasi_nash.state.terminal().iter().zip(ybar.terminal()).map(|(a, b)| a - b).collect();
    let terminal_norm = p.solver.norm_m(&gap);
    Ok(SemilinearLeader { iterations: trace.len(), leader, trace, control_norms, frozen_terminal_norm, terminal_norm, quasi_nash, trajectory: ybar })
}
