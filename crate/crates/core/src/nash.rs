//! Follower Nash equilibria for a fixed leader control.
//!
//! The followers' optimality system couples a forward state `z` with two backward
//! adjoints `φ^i`; the equilibrium controls are `v^i = -φ^i/α_i` on `O_i`. Two solution
//! paths are provided: conjugate gradients on the operator `A` of the product space
//! `H = L²(O_1×(0,T)) × L²(O_2×(0,T))`, and successive substitution on the state.

use crate::error::{Error, Result};
use crate::pde::Field;
use crate::problem::Problem;

/// Frozen reaction coefficients for linearised systems.
///
/// `state` multiplies the state and the leader adjoint `ψ`; `follower` multiplies the
/// follower adjoints `φ^i` and their duals `γ^i`. Both absent is the linear problem.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Coefficients {
    pub state: Option<Field>,
    pub follower: Option<Field>,
}

impl Coefficients {
    pub fn linear() -> Self {
        Coefficients::default()
    }

    pub fn is_linear(&self) -> bool {
        self.state.is_none() && self.follower.is_none()
    }
}

/// Initial datum, follower targets and an optional extra state source.
#[derive(Debug, Clone, PartialEq)]
pub struct NashData {
    pub initial: Vec<f64>,
    pub targets: [Field; 2],
    pub state_source: Option<Field>,
}

impl NashData {
    pub fn zero(p: &Problem) -> Self {
        NashData { initial: vec![0.0; p.n_cells()], targets: [p.zeros(), p.zeros()], state_source: None }
    }

    fn is_zero(&self, p: &Problem) -> bool {
        self.initial.iter().all(|&x| x == 0.0)
            && (0..2).all(|i| self.targets[i].restricted(&p.regions.targets[i]).is_zero())
            && self.state_source.as_ref().map_or(true, Field::is_zero)
    }
}

/// An equilibrium together with its state and adjoints.
#[derive(Debug, Clone, PartialEq)]
pub struct NashSolution {
    pub followers: [Field; 2],
    pub adjoints: [Field; 2],
    pub state: Field,
    pub stationarity: [f64; 2],
    pub iterations: usize,
    pub residual: f64,
    /// `(iteration, residual or increment)` pairs.
    pub trace: Vec<(usize, f64)>,
}

/// Follower and leader costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub followers: [f64; 2],
    pub tracking: [f64; 2],
    pub energy: [f64; 2],
    pub leader: f64,
}

/// Power-iteration estimate of `‖L_i‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorNorm {
    pub estimate: f64,
    pub gap: f64,
    pub iterations: usize,
    /// Norm estimates after each step.
    pub history: Vec<f64>,
}

/// Elements of `H`.
pub type Pair = [Field; 2];

fn check_index(i: usize) -> Result<()> {
    if i > 1 {
        return Err(Error::InvalidArgument(format!("follower index {i} is not 0 or 1")));
    }
    Ok(())
}

/// `L_i v`: the state driven from rest by `v·1_{O_i}`.
pub fn apply_l(p: &Problem, i: usize, v: &Field) -> Result<Field> {
    check_index(i)?;
    let src = v.restricted(&p.regions.followers[i]);
    p.solver.forward(&vec![0.0; p.n_cells()], Some(&src), None)
}

/// `L_i^* g`: the backward solution with source `g`, restricted to `O_i × (0,T)`.
pub fn apply_l_star(p: &Problem, i: usize, g: &Field) -> Result<Field> {
    check_index(i)?;
    let back = p.solver.backward(&vec![0.0; p.n_cells()], Some(g), None)?;
    Ok(back.field.restricted(&p.regions.followers[i]))
}

/// `⟨a, b⟩_H`.
pub fn inner_h(p: &Problem, a: &Pair, b: &Pair) -> Result<f64> {
    Ok(p.solver.inner_q(&a[0], &b[0], Some(&p.regions.followers[0]))?
        + p.solver.inner_q(&a[1], &b[1], Some(&p.regions.followers[1]))?)
}

pub fn norm_h(p: &Problem, a: &Pair) -> Result<f64> {
    Ok(inner_h(p, a, a)?.sqrt())
}

/// Power iteration on `L_i^* L_i`.
pub fn operator_norm_l(p: &Problem, i: usize, iters: usize) -> Result<OperatorNorm> {
    check_index(i)?;
    if iters < 20 {
        return Err(Error::InvalidArgument(format!("power iteration needs at least 20 steps, got {iters}")));
    }
    let mask = &p.regions.followers[i];
    let mut v = p.zeros().map(|_| 1.0);
    v.restrict(mask);
    let nv = p.solver.norm_q(&v, Some(mask))?;
    v.scale(1.0 / nv);
    let mut history = Vec::with_capacity(iters);
    let mut q_prev = 0.0;
    let mut gap = f64::INFINITY;
    for _ in 0..iters {
        let lv = apply_l(p, i, &v)?;
        let q = p.solver.inner_q(&lv, &lv, None)?;
        history.push(q.sqrt());
        gap = if q > 0.0 { (q - q_prev).abs() / q } else { 0.0 };
        q_prev = q;
        let mut w = apply_l_star(p, i, &lv)?;
        let nw = p.solver.norm_q(&w, Some(mask))?;
        if nw == 0.0 {
            break;
        }
        w.scale(1.0 / nw);
        v = w;
    }
    let estimate = q_prev.sqrt();
    if gap > 1e-6 {
        return Err(Error::NonConvergence { gap, iterations: iters });
    }
    Ok(OperatorNorm { estimate, gap, iterations: history.len(), history })
}

/// `δ = min_i (α_i - ¼‖L_i‖²)`; fails when not positive.
pub fn check_coercivity(alpha: [f64; 2], norms: [f64; 2]) -> Result<f64> {
    let delta = (0..2).map(|i| alpha[i] - 0.25 * norms[i] * norms[i]).fold(f64::INFINITY, f64::min);
    if !(delta > 0.0) {
        return Err(Error::CoercivityFailure { delta });
    }
    Ok(delta)
}

/// Estimate both operator norms and return `δ` for the problem's weights.
pub fn coercivity_constant(p: &Problem, iters: usize) -> Result<f64> {
    let norms = [operator_norm_l(p, 0, iters)?.estimate, operator_norm_l(p, 1, iters)?.estimate];
    check_coercivity(p.alpha, norms)
}

fn controls_source(p: &Problem, v: &Pair) -> Field {
    let mut src = v[0].restricted(&p.regions.followers[0]);
    src.axpy(1.0, &v[1].restricted(&p.regions.followers[1])).expect("same problem");
    src
}

/// `A v = (L_i^*((L_1 v^1 + L_2 v^2) 1_{O_{i,d}}) + α_i v^i)_i`.
pub fn apply_a(p: &Problem, v: &Pair) -> Result<Pair> {
    let zeros = vec![0.0; p.n_cells()];
    let w = p.solver.forward(&zeros, Some(&controls_source(p, v)), None)?;
    let t = &p.regions.targets;
    let first = p.solver.backward(&zeros, Some(&w.restricted(&t[0])), None)?.field;
    let second = if p.regions.shared_targets() {
        first.clone()
    } else {
        p.solver.backward(&zeros, Some(&w.restricted(&t[1])), None)?.field
    };
    let mut out = [first.restricted(&p.regions.followers[0]), second.restricted(&p.regions.followers[1])];
    for i in 0..2 {
        out[i].axpy(p.alpha[i], &v[i].restricted(&p.regions.followers[i]))?;
    }
    Ok(out)
}

/// Adjoint of [`apply_a`] in `H`.
pub fn apply_a_adjoint(p: &Problem, v: &Pair) -> Result<Pair> {
    let zeros = vec![0.0; p.n_cells()];
    let mut g = p.zeros();
    for i in 0..2 {
        let w = apply_l(p, i, &v[i])?;
        g.axpy(1.0, &w.restricted(&p.regions.targets[i]))?;
    }
    let back = p.solver.backward(&zeros, Some(&g), None)?.field;
    let mut out = [back.restricted(&p.regions.followers[0]), back.restricted(&p.regions.followers[1])];
    for i in 0..2 {
        out[i].axpy(p.alpha[i], &v[i].restricted(&p.regions.followers[i]))?;
    }
    Ok(out)
}

/// `(A v, v)_H / ‖v‖²_H`.
pub fn rayleigh_quotient(p: &Problem, v: &Pair) -> Result<f64> {
    let av = apply_a(p, v)?;
    Ok(inner_h(p, &av, v)? / inner_h(p, v, v)?)
}

fn leader_source(p: &Problem, data: &NashData, f: &Field) -> Result<Field> {
    let mut src = f.restricted(&p.regions.control);
    if let Some(s) = &data.state_source {
        src.axpy(1.0, s)?;
    }
    Ok(src)
}

/// Right-hand side `(L_i^*((z_{i,d} - u) 1_{O_{i,d}}))_i` with `u` the state without followers.
pub fn nash_rhs(p: &Problem, data: &NashData, f: &Field) -> Result<Pair> {
    let u = p.solver.forward(&data.initial, Some(&leader_source(p, data, f)?), None)?;
    let mut out = [p.zeros(), p.zeros()];
    for i in 0..2 {
        let g = data.targets[i].combine(1.0, &u, -1.0)?.restricted(&p.regions.targets[i]);
        out[i] = apply_l_star(p, i, &g)?;
    }
    Ok(out)
}

/// State for given leader and follower controls.
pub fn state(p: &Problem, coeffs: &Coefficients, data: &NashData, f: &Field, v: &Pair) -> Result<Field> {
    let mut src = leader_source(p, data, f)?;
    src.axpy(1.0, &controls_source(p, v))?;
    p.solver.forward(&data.initial, Some(&src), coeffs.state.as_ref())
}

/// Follower adjoint `φ^i` for the state `z`.
pub fn follower_adjoint(p: &Problem, coeffs: &Coefficients, data: &NashData, i: usize, z: &Field) -> Result<Field> {
    check_index(i)?;
    let g = z.combine(1.0, &data.targets[i], -1.0)?.restricted(&p.regions.targets[i]);
    Ok(p.solver.backward(&vec![0.0; p.n_cells()], Some(&g), coeffs.follower.as_ref())?.field)
}

fn stationarity_from(p: &Problem, i: usize, phi: &Field, v: &Field) -> Result<f64> {
    let mask = &p.regions.followers[i];
    let av = v.restricted(mask).scaled(p.alpha[i]);
    let r = phi.restricted(mask).combine(1.0, &av, 1.0)?;
    Ok(p.solver.norm_q(&r, Some(mask))? / (1.0 + p.solver.norm_q(&av, Some(mask))?))
}

/// `‖φ^i 1_{O_i} + α_i v^i‖ / (1 + ‖α_i v^i‖)` at the given controls.
pub fn stationarity_residual(
    p: &Problem,
    coeffs: &Coefficients,
    data: &NashData,
    i: usize,
    f: &Field,
    v: &Pair,
) -> Result<f64> {
    let z = state(p, coeffs, data, f, v)?;
    let phi = follower_adjoint(p, coeffs, data, i, &z)?;
    stationarity_from(p, i, &phi, &v[i])
}

/// Costs `J_1`, `J_2` and the leader cost at the given controls.
pub fn evaluate_costs(p: &Problem, coeffs: &Coefficients, data: &NashData, f: &Field, v: &Pair) -> Result<CostReport> {
    let z = state(p, coeffs, data, f, v)?;
    costs_for_state(p, data, &z, f, v)
}

/// Costs when the state is already known.
pub fn costs_for_state(p: &Problem, data: &NashData, z: &Field, f: &Field, v: &Pair) -> Result<CostReport> {
    let mut tracking = [0.0; 2];
    let mut energy = [0.0; 2];
    let mut followers = [0.0; 2];
    for i in 0..2 {
        let d = z.combine(1.0, &data.targets[i], -1.0)?;
        tracking[i] = p.solver.inner_q(&d, &d, Some(&p.regions.targets[i]))?;
        energy[i] = p.solver.inner_q(&v[i], &v[i], Some(&p.regions.followers[i]))?;
        followers[i] = 0.5 * tracking[i] + 0.5 * p.alpha[i] * energy[i];
    }
    let leader = 0.5 * p.solver.inner_q(f, f, Some(&p.regions.control))?;
    Ok(CostReport { followers, tracking, energy, leader })
}

fn zero_solution(p: &Problem) -> NashSolution {
    NashSolution {
        followers: [p.zeros(), p.zeros()],
        adjoints: [p.zeros(), p.zeros()],
        state: p.zeros(),
        stationarity: [0.0, 0.0],
        iterations: 0,
        residual: 0.0,
        trace: Vec::new(),
    }
}

fn finish(p: &Problem, coeffs: &Coefficients, data: &NashData, f: &Field, v: Pair, iterations: usize, residual: f64, trace: Vec<(usize, f64)>) -> Result<NashSolution> {
    let z = state(p, coeffs, data, f, &v)?;
    let adjoints = [follower_adjoint(p, coeffs, data, 0, &z)?, follower_adjoint(p, coeffs, data, 1, &z)?];
    let stationarity = [stationarity_from(p, 0, &adjoints[0], &v[0])?, stationarity_from(p, 1, &adjoints[1], &v[1])?];
    Ok(NashSolution { followers: v, adjoints, state: z, stationarity, iterations, residual, trace })
}

/// Default maximum iteration count of the Nash solvers.
pub const DEFAULT_MAX_ITER: usize = 500;

/// Conjugate gradients on `A v = rhs` (see [`solve_nash_cg_with`]).
pub fn solve_nash_cg(p: &Problem, data: &NashData, f: &Field, tol: f64) -> Result<NashSolution> {
    solve_nash_cg_with(p, data, f, tol, DEFAULT_MAX_ITER, None)
}

/// Conjugate gradients on `A v = rhs` from an optional starting point.
///
/// `A` is self-adjoint when both followers track the same region; otherwise the
/// normal equations `A^*A v = A^* rhs` are used.
pub fn solve_nash_cg_with(
    p: &Problem,
    data: &NashData,
    f: &Field,
    tol: f64,
    max_iter: usize,
    start: Option<&Pair>,
) -> Result<NashSolution> {
    let linear = Coefficients::linear();
    if start.is_none() && f.restricted(&p.regions.control).is_zero() && data.is_zero(p) {
        return Ok(zero_solution(p));
    }
    let rhs = nash_rhs(p, data, f)?;
    let rhs_norm = norm_h(p, &rhs)?;
    let mut x: Pair = match start {
        Some(s) => [s[0].restricted(&p.regions.followers[0]), s[1].restricted(&p.regions.followers[1])],
        None => [p.zeros(), p.zeros()],
    };
    if rhs_norm == 0.0 && start.is_none() {
        return finish(p, &linear, data, f, x, 0, 0.0, Vec::new());
    }
    let scale = if rhs_norm > 0.0 { rhs_norm } else { 1.0 };
    let ax = apply_a(p, &x)?;
    let mut r = [rhs[0].combine(1.0, &ax[0], -1.0)?, rhs[1].combine(1.0, &ax[1], -1.0)?];
    let mut trace = Vec::new();
    let mut res = norm_h(p, &r)? / scale;
    trace.push((0, res));
    let symmetric = p.regions.shared_targets();
    let mut it = 0;
    if res > tol {
        if symmetric {
            let mut d = r.clone();
            let mut rr = inner_h(p, &r, &r)?;
            while it < max_iter {
                it += 1;
                let ad = apply_a(p, &d)?;
                let step = rr / inner_h(p, &d, &ad)?;
                for i in 0..2 {
                    x[i].axpy(step, &d[i])?;
                    r[i].axpy(-step, &ad[i])?;
                }
                let rr_new = inner_h(p, &r, &r)?;
                res = rr_new.sqrt() / scale;
                trace.push((it, res));
                if res <= tol {
                    break;
                }
                let beta = rr_new / rr;
                rr = rr_new;
                for i in 0..2 {
                    d[i] = r[i].combine(1.0, &d[i], beta)?;
                }
            }
        } else {
            let mut s = apply_a_adjoint(p, &r)?;
            let mut d = s.clone();
            let mut ss = inner_h(p, &s, &s)?;
            while it < max_iter {
                it += 1;
                let q = apply_a(p, &d)?;
                let step = ss / inner_h(p, &q, &q)?;
                for i in 0..2 {
                    x[i].axpy(step, &d[i])?;
                    r[i].axpy(-step, &q[i])?;
                }
                res = norm_h(p, &r)? / scale;
                trace.push((it, res));
                if res <= tol {
                    break;
                }
                s = apply_a_adjoint(p, &r)?;
                let ss_new = inner_h(p, &s, &s)?;
                let beta = ss_new / ss;
                ss = ss_new;
                for i in 0..2 {
                    d[i] = s[i].combine(1.0, &d[i], beta)?;
                }
            }
        }
    }
    let ax = apply_a(p, &x)?;
    let true_res = norm_h(p, &[rhs[0].combine(1.0, &ax[0], -1.0)?, rhs[1].combine(1.0, &ax[1], -1.0)?])? / scale;
    if res > tol {
        return Err(Error::MaxIterations { iterations: it, residual: true_res });
    }
    log::debug!("nash cg converged in {it} iterations, residual {true_res:e}");
    finish(p, &linear, data, f, x, it, true_res, trace)
}

/// One application of the map `S`: followers respond to `w`, then the state is recomputed.
pub fn contraction_map(p: &Problem, coeffs: &Coefficients, data: &NashData, f: &Field, w: &Field) -> Result<Field> {
    let v = responses(p, coeffs, data, w)?;
    state(p, coeffs, data, f, &v)
}

fn responses(p: &Problem, coeffs: &Coefficients, data: &NashData, w: &Field) -> Result<Pair> {
    let mut v = [follower_adjoint(p, coeffs, data, 0, w)?, follower_adjoint(p, coeffs, data, 1, w)?];
    for i in 0..2 {
        v[i].restrict(&p.regions.followers[i]);
        v[i].scale(-1.0 / p.alpha[i]);
    }
    Ok(v)
}

/// `‖S w_1 - S w_2‖_Q / ‖w_1 - w_2‖_Q`.
pub fn contraction_ratio(p: &Problem, coeffs: &Coefficients, data: &NashData, f: &Field, w1: &Field, w2: &Field) -> Result<f64> {
    let s1 = contraction_map(p, coeffs, data, f, w1)?;
    let s2 = contraction_map(p, coeffs, data, f, w2)?;
    let num = p.solver.norm_q(&s1.combine(1.0, &s2, -1.0)?, None)?;
    Ok(num / p.solver.norm_q(&w1.combine(1.0, w2, -1.0)?, None)?)
}

/// Increments that are tiny, or small and no longer shrinking, are rounding noise.
pub(crate) fn at_round_off(inc: f64, prev: f64, size: f64) -> bool {
    inc <= 1e3 * f64::EPSILON * size || (inc <= 1e5 * f64::EPSILON * size && inc >= prev)
}

/// Successive substitution `w ← S(w)` on the linear optimality system.
pub fn solve_nash_contraction(p: &Problem, data: &NashData, f: &Field, tol: f64, max_iter: usize) -> Result<NashSolution> {
    solve_optimality_system(p, &Coefficients::linear(), data, f, tol, max_iter)
}

/// Successive substitution on the optimality system with frozen coefficients.
///
/// Stops when `‖w_{k+1} - w_k‖_Q ≤ tol·‖w_{k+1}‖_Q`.
pub fn solve_optimality_system(
    p: &Problem,
    coeffs: &Coefficients,
    data: &NashData,
    f: &Field,
    tol: f64,
    max_iter: usize,
) -> Result<NashSolution> {
    if coeffs.is_linear() && f.restricted(&p.regions.control).is_zero() && data.is_zero(p) {
        let mut sol = zero_solution(p);
        sol.iterations = 1;
        sol.trace.push((1, 0.0));
        return Ok(sol);
    }
    let mut w = p.solver.forward(&data.initial, Some(&leader_source(p, data, f)?), coeffs.state.as_ref())?;
    let mut trace = Vec::new();
    let mut prev = f64::INFINITY;
    let mut growing = 0;
    for it in 1..=max_iter {
        let z = contraction_map(p, coeffs, data, f, &w)?;
        let inc = p.solver.norm_q(&z.combine(1.0, &w, -1.0)?, None)?;
        let size = p.solver.norm_q(&z, None)?;
        trace.push((it, inc));
        w = z;
        if inc <= tol * size || at_round_off(inc, prev, size) {
            let v = responses(p, coeffs, data, &w)?;
            return finish(p, coeffs, data, f, v, it, if size > 0.0 { inc / size } else { 0.0 }, trace);
        }
        if inc >= prev {
            growing += 1;
            if growing >= 3 {
                return Err(Error::ContractionFailure { ratio: inc / prev });
            }
        } else {
            growing = 0;
        }
        prev = inc;
    }
    let last = trace.last().map_or(f64::NAN, |t| t.1);
    Err(Error::MaxIterations { iterations: max_iter, residual: last })
}
