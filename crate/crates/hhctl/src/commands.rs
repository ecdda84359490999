//! Subcommand bodies. Each writes its tables into the run directory and records the
//! invariants it checked; solver errors inside a loop become failed checks so the
//! remaining work still runs.

use std::collections::BTreeMap;

use anyhow::Result;
use hardy_control::carleman::{build_psi, build_weights, carleman_ratio, default_variant, target_admissibility, CarlemanWeightSet};
use hardy_control::geometry::hardy_constant;
use hardy_control::nash::*;
use hardy_control::semilinear::*;
use hardy_control::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::output::{num, RunDir};
use crate::{RunContext, SweepAxes};

/// Relative `Q`-distance; zero when both fields vanish.
fn field_rel(p: &Problem, a: &Field, b: &Field) -> Result<f64> {
    let diff = p.solver.norm_q(&a.combine(1.0, b, -1.0)?, None)?;
    let scale = p.solver.norm_q(b, None)?;
    Ok(if diff == 0.0 { 0.0 } else { diff / scale.max(f64::MIN_POSITIVE) })
}

fn penalty_name(p: Penalty) -> &'static str {
    match p {
        Penalty::ExactNorm => "exact_norm",
        Penalty::Quadratic => "quadratic",
    }
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Zero => "zero",
        Branch::Interior => "interior",
    }
}

fn weights(s: &Scenario, p: &Problem) -> Result<CarlemanWeightSet> {
    let psi = build_psi(p.grid(), &default_variant(p.grid(), &s.regions)?)?;
    Ok(build_weights(p.grid(), psi, s.carleman.s, s.carleman.lambda, p.solver.t_final(), p.solver.n_steps())?)
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

/// Largest entry, or `+∞` as soon as any entry is NaN.
fn worst(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |a: f64, b| if b.is_nan() { f64::INFINITY } else { a.max(b) })
}

fn descending(eps: &[f64]) -> Vec<f64> {
    let mut e = eps.to_vec();
    e.sort_by(|a, b| b.total_cmp(a));
    e.dedup();
    e
}

fn is_nonincreasing(v: &[f64], slack: f64) -> bool {
    v.windows(2).all(|w| w[1] <= w[0] * (1.0 + slack))
}

fn is_nondecreasing(v: &[f64], slack: f64) -> bool {
    v.windows(2).all(|w| w[1] >= w[0] * (1.0 - slack))
}

pub fn nash(ctx: &RunContext, out: &mut RunDir) -> Result<()> {
    let s = &ctx.scenario;
    let p = out.timed("build_problem", || s.build_problem())?;
    let data = s.nash_data(&p)?;
    let f = p.zeros();
    let tol = s.tolerances.nash;
    let lin = Coefficients::linear();

    match out.timed("coercivity", || coercivity_constant(&p, 200)) {
        Ok(delta) => out.check("coercivity", true, format!("delta {}", num(delta))),
        Err(e) => out.check("coercivity", false, e.to_string()),
    };
    let cg = out.timed("nash_cg", || solve_nash_cg(&p, &data, &f, tol))?;
    let fp = out.timed("nash_contraction", || solve_nash_contraction(&p, &data, &f, tol, 10_000))?;

    let mut summary = Vec::new();
    let mut trace = Vec::new();
    for (name, sol) in [("cg", &cg), ("contraction", &fp)] {
        let costs = evaluate_costs(&p, &lin, &data, &f, &sol.followers)?;
        let stat = [stationarity_residual(&p, &lin, &data, 0, &f, &sol.followers)?, stationarity_residual(&p, &lin, &data, 1, &f, &sol.followers)?];
        let norms = [p.solver.norm_q(&sol.followers[0], None)?, p.solver.norm_q(&sol.followers[1], None)?];
        summary.push(vec![
            name.to_string(),
            sol.iterations.to_string(),
            num(sol.residual),
            num(stat[0]),
            num(stat[1]),
            num(costs.followers[0]),
            num(costs.followers[1]),
            num(norms[0]),
            num(norms[1]),
            num(p.solver.norm_m(sol.state.terminal())),
        ]);
        trace.extend(sol.trace.iter().map(|(k, r)| vec![name.to_string(), k.to_string(), num(*r)]));
        let limit = s.tolerances.stationarity;
        out.check(&format!("{name}_stationarity"), stat[0] <= limit && stat[1] <= limit, format!("{} and {} against {}", num(stat[0]), num(stat[1]), num(limit)));
    }
    let agreement = max_of([field_rel(&p, &cg.followers[0], &fp.followers[0])?, field_rel(&p, &cg.followers[1], &fp.followers[1])?]);
    out.check("cg_contraction_agreement", agreement <= 1e-6, format!("relative difference {}", num(agreement)));

    out.write_csv(
        "nash_summary.csv",
        &["algorithm", "iterations", "residual", "stationarity_1", "stationarity_2", "cost_1", "cost_2", "control_norm_1", "control_norm_2", "terminal_state_norm"],
        summary,
    )?;
    out.write_csv("nash_trace.csv", &["algorithm", "iteration", "value"], trace)?;
    out.write_field("follower_1.bin", &cg.followers[0])?;
    out.write_field("follower_2.bin", &cg.followers[1])?;
    out.write_field("state.bin", &cg.state)?;
    Ok(())
}

pub fn leader(ctx: &RunContext, out: &mut RunDir) -> Result<()> {
    let s = &ctx.scenario;
    let p = out.timed("build_problem", || s.build_problem())?;
    let sys = LeaderSystem::new(&p, s.nash_data(&p)?);
    let penalty: Penalty = s.leader.penalty.into();
    let mut rows = Vec::new();
    let mut trace = Vec::new();
    let (mut norms, mut costs) = (Vec::new(), Vec::new());
    for (k, eps) in descending(&ctx.epsilons).into_iter().enumerate() {
        let res = match out.timed(&format!("leader_eps_{k}"), || sys.minimize_leader(eps, penalty, s.leader.tol, s.leader.max_iter)) {
            Ok(r) => r,
            Err(e) => {
                out.check(&format!("leader_eps_{}", num(eps)), false, e.to_string());
                continue;
            }
        };
        if penalty == Penalty::ExactNorm {
            let bound = eps * (1.0 + 1e-6);
            out.check(&format!("terminal_bound_eps_{}", num(eps)), res.terminal_norm <= bound, format!("|z(T)| {} against {}", num(res.terminal_norm), num(bound)));
        }
        rows.push(vec![num(eps), penalty_name(penalty).into(), branch_name(res.branch).into(), num(res.terminal_norm), num(res.leader_cost), res.iterations.to_string()]);
        trace.extend(res.trace.iter().map(|(i, v)| vec![num(eps), i.to_string(), num(*v)]));
        out.write_field(&format!("control_{k}.bin"), &res.control)?;
        norms.push(res.terminal_norm);
        costs.push(res.leader_cost);
    }
    if norms.len() >= 2 {
        out.check("terminal_norm_nonincreasing", is_nonincreasing(&norms, 1e-9), format!("{norms:?}"));
        out.check("leader_cost_nondecreasing", is_nondecreasing(&costs, 1e-9), format!("{costs:?}"));
    }
    out.write_csv("eps_sweep.csv", &["epsilon", "penalty", "branch", "terminal_norm", "leader_cost", "iterations"], rows)?;
    out.write_csv("leader_trace.csv", &["epsilon", "iteration", "value"], trace)?;
    Ok(())
}

pub fn observability(ctx: &RunContext, out: &mut RunDir) -> Result<()> {
    let s = &ctx.scenario;
    let p = out.timed("build_problem", || s.build_problem())?;
    let w = out.timed("weights", || weights(s, &p))?;
    let sys = LeaderSystem::new(&p, NashData::zero(&p));
    let mut rng = ctx.rng();
    let obs = out.timed("observability", || sys.observability_ratio(&w, s.carleman.n_samples, &mut rng))?;
    let mean = obs.ratios.iter().sum::<f64>() / obs.ratios.len().max(1) as f64;
    out.check("observability_finite", obs.max.is_finite(), format!("max ratio {}", num(obs.max)));
    out.check("observation_nondegenerate", !obs.flagged, if obs.flagged { "a sample vanished on the control region" } else { "every sample is seen on the control region" });
    out.write_csv("observability.csv", &["sample", "ratio"], obs.ratios.iter().enumerate().map(|(k, r)| vec![k.to_string(), num(*r)]))?;
    out.write_csv(
        "observability_summary.csv",
        &["case", "samples", "max", "mean", "flagged"],
        [vec![format!("{:?}", p.regions.case).to_lowercase(), obs.ratios.len().to_string(), num(obs.max), num(mean), obs.flagged.to_string()]],
    )?;
    Ok(())
}

pub fn carleman(ctx: &RunContext, out: &mut RunDir) -> Result<()> {
    let s = &ctx.scenario;
    let p = out.timed("build_problem", || s.build_problem())?;
    let grid = p.grid();
    let psi = out.timed("weight_function", || -> Result<_> { Ok(build_psi(grid, &default_variant(grid, &s.regions)?)?) })?;
    let parts = psi.values.len();
    let mut header = vec!["cell".to_string(), "radius".to_string()];
    for k in 1..=parts {
        header.push(format!("psi_{k}"));
        header.push(format!("gradient_{k}"));
    }
    let rows = (0..grid.n_cells()).map(|j| {
        let mut row = vec![j.to_string(), num(grid.radius(j))];
        for k in 0..parts {
            row.push(num(psi.values[k][j]));
            row.push(num(psi.gradient_norms[k][j]));
        }
        row
    });
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.write_csv("psi.csv", &header, rows.collect::<Vec<_>>())?;

    let w = build_weights(grid, psi, s.carleman.s, s.carleman.lambda, p.solver.t_final(), p.solver.n_steps())?;
    let mut rng = ctx.rng();
    let c = out.timed("carleman_ratio", || carleman_ratio(&p, &w, s.carleman.n_samples, &mut rng))?;
    out.check("carleman_ratio_finite", c.max.is_finite() && c.max > 0.0, format!("max ratio {}", num(c.max)));
    let crit = hardy_constant(grid.dimension());
    if (s.mu() - crit).abs() <= 1e-12 * crit.max(1.0) {
        let gone = c.samples.iter().all(|x| x.log_terms[3] == f64::NEG_INFINITY);
        out.check("critical_term_vanishes", gone, "potential term at the critical constant");
    }
    out.write_csv(
        "carleman.csv",
        &["sample", "log_lhs", "log_rhs", "log_term_1", "log_term_2", "log_term_3", "log_term_4", "log_term_5", "ratio"],
        c.samples.iter().enumerate().map(|(k, x)| {
            let mut row = vec![k.to_string(), num(x.log_lhs), num(x.log_rhs)];
            row.extend(x.log_terms.iter().map(|t| num(*t)));
            row.push(num(x.ratio));
            row
        }),
    )?;

    let data = s.nash_data(&p)?;
    let trajectory = p.solver.forward(&s.trajectory_initial(&p)?, None, None)?;
    let mut adm = Vec::new();
    for i in 0..2 {
        let a = target_admissibility(&p, &w, &trajectory, &data.targets[i], &p.regions.targets[i])?;
        if a.warn {
            log::warn!("target {} grows fast near the final time under the Carleman weight", i + 1);
        }
        adm.push(vec![(i + 1).to_string(), num(a.log_value), a.warn.to_string()]);
    }
    out.write_csv("admissibility.csv", &["follower", "log_weighted_distance", "warn"], adm)?;
    Ok(())
}

pub fn semilinear(ctx: &RunContext, out: &mut RunDir) -> Result<()> {
    let s = &ctx.scenario;
    let p = out.timed("build_problem", || s.build_problem())?;
    let data = s.nash_data(&p)?;
    let nl = s.semilinear.nonlinearity;
    let tol = s.semilinear.tol;
    let mut rng = ctx.rng();
    out.check("nonlinearity_bounds", nl.bounds_hold(10_000, 10.0), format!("{} sampled on [-10, 10]", nl.name()));

    let f = p.zeros();
    let qn = out.timed("quasi_nash", || solve_quasi_nash(&p, &data, &nl, &f, tol, s.semilinear.max_outer, None))?;
    let limit = s.tolerances.stationarity;
    out.check(
        "quasi_nash_stationarity",
        qn.stationarity.iter().all(|x| *x <= limit),
        format!("{} and {} against {}", num(qn.stationarity[0]), num(qn.stationarity[1]), num(limit)),
    );
    out.check("reaction_bounded", qn.reaction_bounded, "frozen reaction coefficients within sup|F'|");
    out.write_csv("quasi_nash_trace.csv", &["iteration", "increment"], qn.trace.iter().enumerate().map(|(k, x)| vec![(k + 1).to_string(), num(*x)]))?;
    out.write_field("quasi_nash_state.bin", &qn.state)?;

    let alt = p.random_field(None, &mut rng);
    let gap = out.timed("uniqueness", || uniqueness_gap(&p, &data, &nl, &f, tol, &alt))?;

    let probe = out.timed("equilibrium_probe", || equilibrium_probe(&p, &data, &nl, &f, &qn, 5, &[1e-1, 1e-2, 1e-3], &mut rng))?;
    out.check("equilibrium_probe", !probe.counterexample, format!("smallest cost change {} against {}", num(probe.min_difference), num(probe.threshold)));
    out.write_csv(
        "probe.csv",
        &["follower", "direction", "epsilon", "cost_change"],
        probe.entries.iter().map(|(i, k, e, d)| vec![(i + 1).to_string(), k.to_string(), num(*e), num(*d)]),
    )?;
    out.write_csv("probe_slopes.csv", &["index", "slope"], probe.slopes.iter().enumerate().map(|(k, x)| vec![k.to_string(), num(*x)]))?;

    let penalty: Penalty = s.leader.penalty.into();
    let traj0 = s.trajectory_initial(&p)?;
    let mut rows = Vec::new();
    let mut trace = Vec::new();
    for (k, eps) in descending(&ctx.epsilons).into_iter().enumerate() {
        let res = match out.timed(&format!("semilinear_leader_{k}"), || semilinear_leader(&p, &data, &nl, &traj0, eps, penalty, tol, s.semilinear.max_outer)) {
            Ok(r) => r,
            Err(e) => {
                out.check(&format!("semilinear_leader_eps_{}", num(eps)), false, e.to_string());
                continue;
            }
        };
        if penalty == Penalty::ExactNorm {
            out.check(
                &format!("semilinear_terminal_eps_{}", num(eps)),
                res.terminal_norm <= 2.0 * eps,
                format!("|y(T) - trajectory(T)| {} against {}", num(res.terminal_norm), num(2.0 * eps)),
            );
        }
        rows.push(vec![
            num(eps),
            res.iterations.to_string(),
            num(res.frozen_terminal_norm),
            num(res.terminal_norm),
            num(max_of(res.control_norms.iter().cloned())),
            num(res.leader.leader_cost),
        ]);
        trace.extend(res.trace.iter().zip(&res.control_norms).enumerate().map(|(i, (d, c))| vec![num(eps), (i + 1).to_string(), num(*d), num(*c)]));
        out.write_field(&format!("semilinear_control_{k}.bin"), &res.leader.control)?;
    }
    out.write_csv("semilinear_leader.csv", &["epsilon", "outer_iterations", "frozen_terminal_norm", "terminal_norm", "max_control_norm", "leader_cost"], rows)?;
    out.write_csv("semilinear_trace.csv", &["epsilon", "step", "increment", "control_norm"], trace)?;
    out.write_csv(
        "semilinear_summary.csv",
        &["nonlinearity", "quasi_nash_iterations", "uniqueness_gap", "unique_at_this_alpha"],
        [vec![nl.name().to_string(), qn.iterations.to_string(), num(gap), (gap <= 1e-6).to_string()]],
    )?;
    Ok(())
}

/// Every structural invariant on the scenario's own grid.
pub fn verify(ctx: &RunContext, out: &mut RunDir) -> Result<()> {
    let s = &ctx.scenario;
    let tol = &s.tolerances;
    let p = out.timed("build_problem", || s.build_problem())?;
    let data = s.nash_data(&p)?;
    let mut rng = ctx.rng();
    let solver = &p.solver;
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut record = |out: &mut RunDir, name: &str, value: f64, limit: f64, ok: bool, detail: String| {
        rows.push(vec![name.to_string(), num(value), num(limit), ok.to_string()]);
        out.check(name, ok, detail);
    };

    let lmin = out.timed("positivity", || solver.operator().positivity_diagnostic())?;
    record(out, "operator_nonnegative", lmin, -1e-8, lmin >= -1e-8, format!("smallest eigenvalue {}", num(lmin)));

    let mut adj = 0.0f64;
    let mut energy_growth = 0.0f64;
    for _ in 0..5 {
        let (y0, pt) = (p.random_unit_vector(&mut rng), p.random_unit_vector(&mut rng));
        let (g, h) = (p.random_field(None, &mut rng), p.random_field(None, &mut rng));
        let y = solver.forward(&y0, Some(&g), None)?;
        let b = solver.backward(&pt, Some(&h), None)?;
        let lhs = solver.inner_q(&y, &h, None)? + solver.inner_m(y.terminal(), &pt);
        let rhs = solver.inner_m(&y0, &b.initial) + solver.inner_q(&g, &b.field, None)?;
        adj = adj.max((lhs - rhs).abs() / (1.0 + lhs.abs().max(rhs.abs())));
        let free = solver.forward(&y0, None, None)?;
        for k in 0..solver.n_steps() {
            let (a, c) = (solver.norm_m(free.level(k)), solver.norm_m(free.level(k + 1)));
            energy_growth = energy_growth.max((c - a) / a.max(f64::MIN_POSITIVE));
        }
    }
    record(out, "adjoint_consistency", adj, tol.adjoint, adj <= tol.adjoint, format!("worst pairing mismatch {}", num(adj)));
    record(out, "energy_decay", energy_growth, tol.energy, energy_growth <= tol.energy, format!("largest relative growth {}", num(energy_growth)));

    let sys = LeaderSystem::new(&p, data.clone());
    let mut dual = 0.0f64;
    for _ in 0..20 {
        let f = p.random_field(Some(&p.regions.control), &mut rng);
        let q = p.random_unit_vector(&mut rng);
        dual = dual.max(sys.duality_residual(&f, &q)?);
    }
    record(out, "duality", dual, tol.duality, dual <= tol.duality, format!("worst residual {}", num(dual)));

    match out.timed("coercivity", || coercivity_constant(&p, 200)) {
        Ok(delta) => {
            let mut q_min = f64::INFINITY;
            for _ in 0..20 {
                let v = [p.random_field(Some(&p.regions.followers[0]), &mut rng), p.random_field(Some(&p.regions.followers[1]), &mut rng)];
                q_min = q_min.min(rayleigh_quotient(&p, &v)?);
            }
            let ratio = q_min / delta;
            record(out, "coercivity", ratio, 0.99, ratio >= 0.99, format!("Rayleigh quotient {} against delta {}", num(q_min), num(delta)));
        }
        Err(e) => record(out, "coercivity", f64::NAN, 0.99, false, e.to_string()),
    }

    let f = p.random_field(Some(&p.regions.control), &mut rng);
    let lin = Coefficients::linear();
    let cg = out.timed("nash_cg", || solve_nash_cg(&p, &data, &f, tol.nash))?;
    let fp = out.timed("nash_contraction", || solve_nash_contraction(&p, &data, &f, tol.nash, 10_000))?;
    let agree = max_of([field_rel(&p, &cg.followers[0], &fp.followers[0])?, field_rel(&p, &cg.followers[1], &fp.followers[1])?]);
    record(out, "nash_agreement", agree, 1e-6, agree <= 1e-6, format!("relative difference {}", num(agree)));
    let mut stat = 0.0f64;
    for sol in [&cg, &fp] {
        for i in 0..2 {
            stat = stat.max(stationarity_residual(&p, &lin, &data, i, &f, &sol.followers)?);
        }
    }
    record(out, "nash_stationarity", stat, tol.stationarity, stat <= tol.stationarity, format!("worst residual {}", num(stat)));
    let mut contraction = 0.0f64;
    for _ in 0..3 {
        let (w1, w2) = (p.random_field(None, &mut rng), p.random_field(None, &mut rng));
        contraction = contraction.max(contraction_ratio(&p, &lin, &data, &f, &w1, &w2)?);
    }
    record(out, "contraction", contraction, 1.0, contraction < 1.0, format!("largest measured factor {}", num(contraction)));

    let eps = descending(&ctx.epsilons)[0];
    let mut fd = 0.0f64;
    for penalty in [Penalty::Quadratic, Penalty::ExactNorm] {
        let q = p.random_unit_vector(&mut rng);
        let g = sys.grad_f_eps(&q, eps, penalty)?;
        for _ in 0..5 {
            let d = p.random_unit_vector(&mut rng);
            let h = 1e-4;
            let at = |t: f64| -> Vec<f64> { q.iter().zip(&d).map(|(a, b)| a + t * b).collect() };
            let diff = (sys.eval_f_eps(&at(h), eps, penalty)? - sys.eval_f_eps(&at(-h), eps, penalty)?) / (2.0 * h);
            let pred = solver.inner_m(&g, &d);
            fd = fd.max((diff - pred).abs() / (1.0 + pred.abs()));
        }
    }
    record(out, "leader_gradient", fd, 1e-5, fd <= 1e-5, format!("worst finite-difference mismatch {}", num(fd)));

    let penalty: Penalty = s.leader.penalty.into();
    match out.timed("leader", || sys.minimize_leader(eps, penalty, s.leader.tol, s.leader.max_iter)) {
        Ok(res) => {
            let limit = if penalty == Penalty::ExactNorm { eps * (1.0 + 1e-6) } else { f64::INFINITY };
            record(out, "leader_terminal_bound", res.terminal_norm, limit, res.terminal_norm <= limit, format!("|z(T)| {} at eps {}", num(res.terminal_norm), num(eps)));
        }
        Err(e) => record(out, "leader_terminal_bound", f64::NAN, eps, false, e.to_string()),
    }

    let built = out.timed("weights", || -> Result<Option<CarlemanWeightSet>> {
        match default_variant(p.grid(), &s.regions).and_then(|v| build_psi(p.grid(), &v)) {
            Ok(psi) => Ok(Some(build_weights(p.grid(), psi, s.carleman.s, s.carleman.lambda, p.solver.t_final(), p.solver.n_steps())?)),
            Err(Error::WeightGeometry(msg)) => {
                log::info!("weight-based checks skipped: {msg}");
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    });
    if let Some(w) = built? {
        let obs = out.timed("observability", || sys.observability_ratio(&w, s.carleman.n_samples, &mut rng))?;
        record(out, "observability", obs.max, f64::INFINITY, obs.max.is_finite() && !obs.flagged, format!("max ratio {}", num(obs.max)));
        let car = out.timed("carleman", || carleman_ratio(&p, &w, s.carleman.n_samples, &mut rng))?;
        record(out, "carleman", car.max, f64::INFINITY, car.max.is_finite() && car.max > 0.0, format!("max ratio {}", num(car.max)));
    }

    let zero = Nonlinearity::Zero;
    let qz = out.timed("quasi_nash_zero", || solve_quasi_nash(&p, &data, &zero, &f, 1e-12, 50, None))?;
    let red = field_rel(&p, &qz.state, &cg.state)?;
    record(out, "semilinear_reduction", red, 1e-8, red <= 1e-8, format!("zero reaction against linear {}", num(red)));
    let nl = s.semilinear.nonlinearity;
    let bounds = nl.bounds_hold(10_000, 10.0);
    record(out, "nonlinearity_bounds", f64::from(u8::from(bounds)), 1.0, bounds, nl.name().to_string());
    if !nl.is_zero() {
        match out.timed("quasi_nash", || solve_quasi_nash(&p, &data, &nl, &f, s.semilinear.tol, s.semilinear.max_outer, None)) {
            Ok(q) => {
                let probe = equilibrium_probe(&p, &data, &nl, &f, &q, 2, &[1e-1, 1e-2, 1e-3], &mut rng)?;
                record(out, "equilibrium_probe", probe.min_difference, probe.threshold, !probe.counterexample, format!("smallest cost change {}", num(probe.min_difference)));
            }
            Err(e) => record(out, "equilibrium_probe", f64::NAN, 0.0, false, e.to_string()),
        }
    }
    out.write_csv("verify.csv", &["invariant", "value", "limit", "passed"], rows)?;
    Ok(())
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq)]
struct Point {
    index: usize,
    alpha: [f64; 2],
    mu: f64,
    cells: usize,
    eps: f64,
}

const SWEEP_HEADER: [&str; 14] = [
    "point",
    "mu",
    "alpha_1",
    "alpha_2",
    "cells",
    "epsilon",
    "contraction_factor",
    "norm_l1",
    "norm_l2",
    "coercivity",
    "nash_iterations",
    "terminal_norm",
    "leader_cost",
    "leader_iterations",
];

pub fn sweep(ctx: &RunContext, axes: &SweepAxes, out: &mut RunDir) -> Result<()> {
    let s = &ctx.scenario;
    let alphas: Vec<[f64; 2]> = if axes.alpha.is_empty() { vec![s.physics.alpha] } else { axes.alpha.iter().map(|a| [*a, *a]).collect() };
    let mus = if axes.mu.is_empty() { vec![s.mu()] } else { axes.mu.clone() };
    let cells = if axes.cells.is_empty() { vec![s.grid.cells_per_axis] } else { axes.cells.clone() };
    let mut points = Vec::new();
    for &mu in &mus {
        for &c in &cells {
            for &eps in &ctx.epsilons {
                for &alpha in &alphas {
                    points.push(Point { index: points.len(), alpha, mu, cells: c, eps });
                }
            }
        }
    }
    log::info!("sweep over {} points on {} workers", points.len(), ctx.workers);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(ctx.workers).build()?;
    let root = out.root().to_path_buf();
    let results: Vec<Result<(RunDir, Vec<String>)>> = pool.install(|| {
        points
            .par_iter()
            .map(|pt| {
                let mut dir = RunDir::create(&root.join(format!("point_{:04}", pt.index)))?;
                let row = run_point(ctx, pt, &mut dir);
                Ok((dir, row))
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut groups: BTreeMap<(u64, usize, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for (pt, res) in points.iter().zip(results) {
        let (dir, row) = res?;
        let factor: f64 = row[6].parse().unwrap_or(f64::NAN);
        groups.entry((pt.mu.to_bits(), pt.cells, pt.eps.to_bits())).or_default().push((pt.alpha[0] + pt.alpha[1], factor));
        out.absorb(&format!("point_{:04}", pt.index), dir);
        rows.push(row);
    }
    for ((mu, c, eps), mut series) in groups {
        if series.len() < 2 {
            continue;
        }
        series.sort_by(|a, b| a.0.total_cmp(&b.0));
        let factors: Vec<f64> = series.iter().map(|x| x.1).collect();
        let ok = factors.windows(2).all(|w| w[1] < w[0]);
        let name = format!("contraction_decreasing_in_alpha_mu_{}_cells_{c}_eps_{}", num(f64::from_bits(mu)), num(f64::from_bits(eps)));
        out.check(&name, ok, format!("{factors:?}"));
    }
    out.write_csv("sweep.csv", &SWEEP_HEADER, rows)?;
    Ok(())
}

/// Solve one sweep point; failures are recorded in `dir` and leave empty columns.
fn run_point(ctx: &RunContext, pt: &Point, dir: &mut RunDir) -> Vec<String> {
    let mut row = vec![pt.index.to_string(), num(pt.mu), num(pt.alpha[0]), num(pt.alpha[1]), pt.cells.to_string(), num(pt.eps)];
    row.resize(SWEEP_HEADER.len(), String::new());
    if let Err(e) = point_body(ctx, pt, dir, &mut row) {
        dir.check("point", false, format!("{e:#}"));
    }
    row
}

fn point_body(ctx: &RunContext, pt: &Point, dir: &mut RunDir, row: &mut [String]) -> Result<()> {
    let mut s = ctx.scenario.clone();
    s.physics.alpha = pt.alpha;
    s.physics.mu = Some(pt.mu);
    s.physics.mu_fraction = None;
    s.grid.cells_per_axis = pt.cells;
    s.leader.epsilons = vec![pt.eps];
    let violations = s.violations();
    if !violations.is_empty() {
        anyhow::bail!("invalid point: {}", violations.join("; "));
    }
    dir.write_text("scenario.toml", "toml", &toml::to_string(&s)?)?;
    let p = dir.timed("build_problem", || s.build_problem())?;
    let data = s.nash_data(&p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let lin = Coefficients::linear();
    let zero = p.zeros();

    let mut factor = 0.0f64;
    for _ in 0..3 {
        let (w1, w2) = (p.random_field(None, &mut rng), p.random_field(None, &mut rng));
        factor = worst([factor, contraction_ratio(&p, &lin, &data, &zero, &w1, &w2)?]);
    }
    row[6] = num(factor);
    let norms = [operator_norm_l(&p, 0, 200)?.estimate, operator_norm_l(&p, 1, 200)?.estimate];
    let delta = (0..2).map(|i| pt.alpha[i] - 0.25 * norms[i] * norms[i]).fold(f64::INFINITY, f64::min);
    row[7] = num(norms[0]);
    row[8] = num(norms[1]);
    row[9] = num(delta);

    if delta <= 0.0 {
        log::info!("point {}: weights below the coercivity threshold, leader solve skipped", pt.index);
    } else {
        let nash = dir.timed("nash_cg", || solve_nash_cg(&p, &data, &zero, s.tolerances.nash))?;
        row[10] = nash.iterations.to_string();
        let penalty: Penalty = s.leader.penalty.into();
        let res = dir.timed("leader", || LeaderSystem::new(&p, data.clone()).minimize_leader(pt.eps, penalty, s.leader.tol, s.leader.max_iter))?;
        if penalty == Penalty::ExactNorm {
            let bound = pt.eps * (1.0 + 1e-6);
            dir.check("terminal_bound", res.terminal_norm <= bound, format!("|z(T)| {} against {}", num(res.terminal_norm), num(bound)));
        }
        row[11] = num(res.terminal_norm);
        row[12] = num(res.leader_cost);
        row[13] = res.iterations.to_string();
        dir.write_field("control.bin", &res.control)?;
    }
    dir.write_csv("point.csv", &SWEEP_HEADER, [row.to_vec()])?;
    Ok(())
}
