//! Leader control by penalised duality.
//!
//! For terminal adjoint data `ψ^T` the coupled system (ψ backward, γ^i forward) is
//! solved, and the functional
//! `F_ε(ψ^T) = ½∬_O|ψ|² + εP(ψ^T) + (z⁰, ψ(0)) - Σ∬ z_{i,d} γ^i`
//! is minimised. Its smooth gradient is the terminal state `z(T)` of the followers'
//! optimality system driven by `f = ψ 1_O`, so the minimiser yields the leader control.

use rand::Rng;

use crate::carleman::CarlemanWeightSet;
use crate::error::{Error, Result};
use crate::geometry::CaseFlag;
use crate::nash::{solve_optimality_system, Coefficients, NashData, NashSolution};
use crate::pde::Field;
use crate::problem::Problem;

/// Form of the `ε`-term of `F_ε`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Penalty {
    /// `ε‖ψ^T‖`; guarantees `‖z(T)‖ ≤ ε` at the minimiser.
    ExactNorm,
    /// `ε‖ψ^T‖²/2`; smooth everywhere.
    Quadratic,
}

impl Penalty {
    pub fn value(self, norm: f64) -> f64 {
        match self {
            Penalty::ExactNorm => norm,
            Penalty::Quadratic => 0.5 * norm * norm,
        }
    }
}

/// Solution of the coupled adjoint system for one terminal datum.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTriple {
    pub psi: Field,
    /// Value of `ψ` dual to the initial state.
    pub psi_initial: Vec<f64>,
    pub gammas: [Field; 2],
    pub terminal: Vec<f64>,
    pub sweeps: usize,
}

/// Which optimality branch produced the minimiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// The data already satisfy `‖z(T)‖ ≤ ε` without control; the minimiser is 0.
    Zero,
    /// Nonzero minimiser with `z(T) = -εψ^T/‖ψ^T‖` (or `-εψ^T` for the quadratic penalty).
    Interior,
}

/// Output of the leader minimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderResult {
    /// `f̂ = ψ_ε 1_O`.
    pub control: Field,
    pub epsilon: f64,
    pub penalty: Penalty,
    pub terminal_norm: f64,
    pub leader_cost: f64,
    pub minimizer: Vec<f64>,
    pub branch: Branch,
    pub iterations: usize,
    /// `(iteration, gradient norm)` for CG, `(evaluation, τ‖ψ(τ)‖/ε - 1)` for the secular solve.
    pub trace: Vec<(usize, f64)>,
    pub nash: NashSolution,
}

/// Empirical observability ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilitySamples {
    pub ratios: Vec<f64>,
    pub max: f64,
    /// Set when some sample vanished on the control region.
    pub flagged: bool,
}

/// The linear (or frozen-coefficient) leader problem with its data.
#[derive(Debug, Clone)]
pub struct LeaderSystem<'a> {
    pub problem: &'a Problem,
    pub coeffs: Coefficients,
    pub data: NashData,
    /// Relative increment at which the inner fixed points stop.
    pub inner_tol: f64,
    pub max_inner: usize,
}

impl<'a> LeaderSystem<'a> {
    pub fn new(problem: &'a Problem, data: NashData) -> Self {
        LeaderSystem { problem, coeffs: Coefficients::linear(), data, inner_tol: 1e-14, max_inner: 2000 }
    }

    pub fn with_coefficients(mut self, coeffs: Coefficients) -> Self {
        self.coeffs = coeffs;
        self
    }

    fn homogeneous(&self) -> LeaderSystem<'a> {
        LeaderSystem { data: NashData::zero(self.problem), ..self.clone() }
    }

    fn m_inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.problem.solver.inner_m(a, b)
    }

    fn m_norm(&self, a: &[f64]) -> f64 {
        self.problem.solver.norm_m(a)
    }

    /// Block fixed point on the coupled adjoint system.
    pub fn solve_adjoint_coupled(&self, terminal: &[f64]) -> Result<AdjointTriple> {
        let p = self.problem;
        let zeros = vec![0.0; p.n_cells()];
        if terminal.iter().all(|&x| x == 0.0) {
            return Ok(AdjointTriple {
                psi: p.zeros(),
                psi_initial: zeros,
                gammas: [p.zeros(), p.zeros()],
                terminal: terminal.to_vec(),
                sweeps: 0,
            });
        }
        let mut gammas = [p.zeros(), p.zeros()];
        let mut prev = f64::INFINITY;
        let mut growing = 0;
        for sweep in 1..=self.max_inner {
            let back = self.psi_from(terminal, &gammas)?;
            let mut next = [p.zeros(), p.zeros()];
            let mut inc = 0.0;
            let mut size = 0.0;
            for i in 0..2 {
                let src = back.field.restricted(&p.regions.followers[i]).scaled(-1.0 / p.alpha[i]);
                next[i] = p.solver.forward(&zeros, Some(&src), self.coeffs.follower.as_ref())?;
                let d = next[i].combine(1.0, &gammas[i], -1.0)?;
                inc += p.solver.inner_q(&d, &d, None)?;
                size += p.solver.inner_q(&next[i], &next[i], None)?;
            }
            let (inc, size) = (inc.sqrt(), size.sqrt());
            gammas = next;
            if inc <= self.inner_tol * size || crate::nash::at_round_off(inc, prev, size) {
                let back = self.psi_from(terminal, &gammas)?;
                return Ok(AdjointTriple {
                    psi: back.field,
                    psi_initial: back.initial,
                    gammas,
                    terminal: terminal.to_vec(),
                    sweeps: sweep,
                });
            }
            if inc > prev {
                growing += 1;
                if growing >= 3 {
                    return Err(Error::CouplingDivergence { increment: inc });
                }
            } else {
                growing = 0;
            }
            prev = inc;
        }
        Err(Error::MaxIterations { iterations: self.max_inner, residual: prev })
    }

    fn psi_from(&self, terminal: &[f64], gammas: &[Field; 2]) -> Result<crate::pde::BackwardSolution> {
        let p = self.problem;
        let mut src = gammas[0].restricted(&p.regions.targets[0]);
        src.axpy(1.0, &gammas[1].restricted(&p.regions.targets[1]))?;
        p.solver.backward(terminal, Some(&src), self.coeffs.state.as_ref())
    }

    /// Followers' equilibrium for the leader control `f`.
    pub fn nash(&self, f: &Field) -> Result<NashSolution> {
        solve_optimality_system(self.problem, &self.coeffs, &self.data, f, self.inner_tol, self.max_inner)
    }

    /// Value of `F_ε`.
    pub fn eval_f_eps(&self, terminal: &[f64], eps: f64, penalty: Penalty) -> Result<f64> {
        let p = self.problem;
        let t = self.solve_adjoint_coupled(terminal)?;
        let mut value = 0.5 * p.solver.inner_q(&t.psi, &t.psi, Some(&p.regions.control))?;
        value += eps * penalty.value(self.m_norm(terminal));
        value += self.m_inner(&self.data.initial, &t.psi_initial);
        for i in 0..2 {
            value -= p.solver.inner_q(&self.data.targets[i], &t.gammas[i], Some(&p.regions.targets[i]))?;
        }
        if let Some(s) = &self.data.state_source {
            value -= p.solver.inner_q(s, &t.psi, None)?;
        }
        Ok(value)
    }

    /// Gradient of `F_ε` in the `L²(Ω)` product: `z(T) + ε∂P`.
    pub fn grad_f_eps(&self, terminal: &[f64], eps: f64, penalty: Penalty) -> Result<Vec<f64>> {
        let norm = self.m_norm(terminal);
        if penalty == Penalty::ExactNorm && norm == 0.0 {
            return Err(Error::ZeroPointNondifferentiable);
        }
        let mut g = self.smooth_gradient(terminal)?;
        let c = match penalty {
            Penalty::ExactNorm => eps / norm,
            Penalty::Quadratic => eps,
        };
        for (gj, x) in g.iter_mut().zip(terminal) {
            *gj += c * x;
        }
        Ok(g)
    }

    /// `z(T)` for `f = ψ 1_O`.
    pub fn smooth_gradient(&self, terminal: &[f64]) -> Result<Vec<f64>> {
        let t = self.solve_adjoint_coupled(terminal)?;
        let f = t.psi.restricted(&self.problem.regions.control);
        Ok(self.nash(&f)?.state.terminal().to_vec())
    }

    /// Relative residual of the duality identity for `(f, ψ^T)`.
    pub fn duality_residual(&self, f: &Field, terminal: &[f64]) -> Result<f64> {
        let p = self.problem;
        let sol = self.nash(f)?;
        let t = self.solve_adjoint_coupled(terminal)?;
        let lhs = p.solver.inner_q(f, &t.psi, Some(&p.regions.control))?;
        let mut rhs = self.m_inner(sol.state.terminal(), terminal) - self.m_inner(&self.data.initial, &t.psi_initial);
        for i in 0..2 {
            rhs += p.solver.inner_q(&self.data.targets[i], &t.gammas[i], Some(&p.regions.targets[i]))?;
        }
        if let Some(s) = &self.data.state_source {
            rhs -= p.solver.inner_q(s, &t.psi, None)?;
        }
        Ok((lhs - rhs).abs() / (1.0 + rhs.abs()))
    }

    /// Minimise `F_ε` and build the leader control.
    ///
    /// `tol` bounds the final gradient relative to the free terminal state for the
    /// quadratic penalty; the exact-norm penalty places `‖z(T)‖` in `[ε(1 - 1.5e-4), ε(1 - 5e-5)]`.
    pub fn minimize_leader(&self, eps: f64, penalty: Penalty, tol: f64, max_iter: usize) -> Result<LeaderResult> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
        }
        let p = self.problem;
        let free = self.nash(&p.zeros())?;
        let b = free.state.terminal().to_vec();
        let b_norm = self.m_norm(&b);
        let gram = self.homogeneous();
        let (x, branch, iterations, trace) = match penalty {
            Penalty::Quadratic => {
                if b_norm == 0.0 {
                    (vec![0.0; p.n_cells()], Branch::Zero, 0, Vec::new())
                } else {
                    let mut x = vec![0.0; p.n_cells()];
                    let (it, trace) = gram.shifted_cg(eps, &b, &mut x, tol, max_iter, false)?;
                    (x, Branch::Interior, it, trace)
                }
            }
            Penalty::ExactNorm => {
                if b_norm <= eps {
                    (vec![0.0; p.n_cells()], Branch::Zero, 0, Vec::new())
                } else {
                    let (x, it, trace) = gram.secular_solve(eps, &b, max_iter)?;
                    if self.m_norm(&x) <= 1e-10 {
                        (vec![0.0; p.n_cells()], Branch::Zero, it, trace)
                    } else {
                        (x, Branch::Interior, it, trace)
                    }
                }
            }
        };
        let (control, nash) = if branch == Branch::Zero {
            (p.zeros(), free)
        } else {
            let t = self.solve_adjoint_coupled(&x)?;
            let f = t.psi.restricted(&p.regions.control);
            let sol = self.nash(&f)?;
            (f, sol)
        };
        let terminal_norm = self.m_norm(nash.state.terminal());
        let leader_cost = 0.5 * p.solver.inner_q(&control, &control, Some(&p.regions.control))?;
        log::info!("leader eps={eps:e} penalty={penalty:?} branch={branch:?} |z(T)|={terminal_norm:e} J={leader_cost:e}");
        Ok(LeaderResult { control, epsilon: eps, penalty, terminal_norm, leader_cost, minimizer: x, branch, iterations, trace, nash })
    }

    /// Data-free gradient map `q ↦ z_q(T)`; self-adjoint and nonnegative in `L²(Ω)`.
    pub fn gramian_apply(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.smooth_gradient(q)
    }

    /// CG on `(G + τ) x = -b` from the given start; returns iterations and the trace.
    ///
    /// With `accept_stall` a stagnated iterate is returned instead of an error.
    fn shifted_cg(&self, tau: f64, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize, accept_stall: bool) -> Result<(usize, Vec<(usize, f64)>)> {
        let b_norm = self.m_norm(b);
        let apply = |v: &[f64]| -> Result<Vec<f64>> {
            let mut g = self.gramian_apply(v)?;
            for (gj, vj) in g.iter_mut().zip(v) {
                *gj += tau * vj;
            }
            Ok(g)
        };
        let ax = apply(x)?;
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bj, aj)| -bj - aj).collect();
        let mut rr = self.m_inner(&r, &r);
        let mut trace = vec![(0, rr.sqrt())];
        if rr.sqrt() <= tol * b_norm {
            return Ok((0, trace));
        }
        let mut d = r.clone();
        let mut best = rr.sqrt();
        let mut stalled = 0;
        let mut restarts = 0;
        for it in 1..=max_iter {
            let ad = apply(&d)?;
            let dad = self.m_inner(&d, &ad);
            if !(dad > 0.0) {
                return Err(Error::ObservabilityTooWeak { gradient: rr.sqrt() });
            }
            let step = rr / dad;
            for k in 0..x.len() {
                x[k] += step * d[k];
                r[k] -= step * ad[k];
            }
            let mut rr_new = self.m_inner(&r, &r);
            let res = rr_new.sqrt();
            trace.push((it, res));
            if res <= tol * b_norm {
                return Ok((it, trace));
            }
            if res < 0.999 * best {
                best = res;
                stalled = 0;
            } else {
                stalled += 1;
            }
            if stalled >= 30 {
                if restarts < 5 {
                    // conjugacy lost to rounding: restart from the true residual
                    restarts += 1;
                    stalled = 0;
                    let ax = apply(x)?;
                    for k in 0..r.len() {
                        r[k] = -b[k] - ax[k];
                    }
                    rr = self.m_inner(&r, &r);
                    best = rr.sqrt();
                    d.copy_from_slice(&r);
                    continue;
                }
                if accept_stall || res <= 1e-8 * b_norm {
                    return Ok((it, trace));
                }
                // the decrease of the quadratic along this step is ½ step·rr
                if 0.5 * step * rr < 1e-14 {
                    return Err(Error::ObservabilityTooWeak { gradient: res });
                }
            }
            let beta = rr_new / rr;
            std::mem::swap(&mut rr, &mut rr_new);
            for k in 0..d.len() {
                d[k] = r[k] + beta * d[k];
            }
        }
        Err(Error::MaxIterations { iterations: max_iter, residual: rr.sqrt() / b_norm })
    }

    /// Find `τ` with `‖b + G x(τ)‖ ≈ ε`, where `(G + τ) x(τ) = -b`.
    ///
    /// The terminal norm is evaluated from the computed `x`, so feasibility does not
    /// depend on how accurately the inner CG solves the shifted system.
    fn secular_solve(&self, eps: f64, b: &[f64], max_iter: usize) -> Result<(Vec<f64>, usize, Vec<(usize, f64)>)> {
        let n = b.len();
        let target = eps * (1.0 - 1e-4);
        let window = 5e-5 * eps;
        let inner_tol = (5e-7 * eps / self.m_norm(b)).max(1e-14);
        let mut x = vec![0.0; n];
        let mut trace: Vec<(usize, f64)> = Vec::new();
        let eval = |tau: f64, x: &mut Vec<f64>, trace: &mut Vec<(usize, f64)>| -> Result<f64> {
            self.shifted_cg(tau, b, x, inner_tol, max_iter, true)?;
            let gx = self.gramian_apply(x)?;
            let z: Vec<f64> = gx.iter().zip(b).map(|(g, bj)| g + bj).collect();
            let val = self.m_norm(&z) - target;
            trace.push((trace.len() + 1, val / eps));
            Ok(val)
        };
        let gb = self.gramian_apply(b)?;
        let scale = (self.m_norm(&gb) / self.m_norm(b)).max(1e-300);
        let mut hi = scale;
        let mut f_hi = eval(hi, &mut x, &mut trace)?;
        while f_hi < 0.0 {
            hi *= 10.0;
            f_hi = eval(hi, &mut x, &mut trace)?;
        }
        let x_hi = x.clone();
        let mut lo = hi;
        let mut f_lo = f_hi;
        while f_lo > 0.0 {
            if lo < 1e-30 * scale {
                return Err(Error::ObservabilityTooWeak { gradient: f_lo + target });
            }
            hi = lo;
            f_hi = f_lo;
            lo /= 10.0;
            f_lo = eval(lo, &mut x, &mut trace)?;
            if f_lo.abs() <= window {
                return Ok((x, trace.len(), trace));
            }
        }
        if f_hi.abs() <= window {
            return Ok((x_hi, trace.len(), trace));
        }
        let (mut u_lo, mut u_hi) = (lo.ln(), hi.ln());
        let mut side = 0i8;
        for _ in 0..200 {
            let u = (u_lo * f_hi - u_hi * f_lo) / (f_hi - f_lo);
            let val = eval(u.exp(), &mut x, &mut trace)?;
            if val.abs() <= window {
                return Ok((x, trace.len(), trace));
            }
            if val < 0.0 {
                u_lo = u;
                f_lo = val;
                if side == -1 {
                    f_hi *= 0.5;
                }
                side = -1;
            } else {
                u_hi = u;
                f_hi = val;
                if side == 1 {
                    f_lo *= 0.5;
                }
                side = 1;
            }
        }
        Err(Error::MaxIterations { iterations: trace.len(), residual: trace.last().map_or(f64::NAN, |t| t.1) })
    }

    /// Observability ratios for random unit terminal data.
    ///
    /// Each sample is `(‖ψ(0)‖² + weighted γ-term) / ∬_O|ψ|²` with the γ-term
    /// `∬_{O_d} ρ⁻²|γ¹+γ²|²` in the shared case and `Σ_i ∬_{O_{i,d}} ρ⁻²|γ^i|²` otherwise.
    pub fn observability_ratio(&self, weights: &CarlemanWeightSet, n_samples: usize, rng: &mut impl Rng) -> Result<ObservabilitySamples> {
        let mut ratios = Vec::with_capacity(n_samples);
        let mut flagged = false;
        for _ in 0..n_samples {
            let psi_t = self.problem.random_unit_vector(rng);
            let r = self.observability_sample(weights, &psi_t)?;
            flagged |= r.is_infinite();
            ratios.push(r);
        }
        let max = ratios.iter().cloned().fold(0.0, f64::max);
        Ok(ObservabilitySamples { ratios, max, flagged })
    }

    /// One observability ratio for the terminal datum `psi_t`.
    pub fn observability_sample(&self, weights: &CarlemanWeightSet, psi_t: &[f64]) -> Result<f64> {
        let p = self.problem;
        let t = self.solve_adjoint_coupled(psi_t)?;
        let denom = p.solver.inner_q(&t.psi, &t.psi, Some(&p.regions.control))?;
        let mut num = self.m_inner(&t.psi_initial, &t.psi_initial);
        let mass = p.solver.mass();
        let dt = p.solver.dt();
        let weighted = |g: &Field, mask: &[bool]| -> f64 {
            let mut s = 0.0;
            for n in 0..p.solver.n_steps() {
                let lvl = g.level(n);
                for j in 0..lvl.len() {
                    if mask[j] && lvl[j] != 0.0 {
                        s += dt * mass[j] * weights.log_rho_inv2(j, n).exp() * lvl[j] * lvl[j];
                    }
                }
            }
            s
        };
        match p.regions.case {
            CaseFlag::Shared => {
                let sum = t.gammas[0].combine(1.0, &t.gammas[1], 1.0)?;
                num += weighted(&sum, &p.regions.targets[0]);
            }
            CaseFlag::Distinct => {
                for i in 0..2 {
                    num += weighted(&t.gammas[i], &p.regions.targets[i]);
                }
            }
        }
        Ok(if denom > 0.0 { num / denom } else { f64::INFINITY })
    }
}
