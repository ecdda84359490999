//! Browser bindings for three experiments on the bundled radial scenario: free heat
//! decay, the followers' Nash game, and the leader's approximate null control.
//!
//! Each experiment is a plain function returning a serialisable report; the
//! `wasm_bindgen` exports wrap them and hand JSON to the page.

use std::path::Path;

use hardy_control::nash::{contraction_ratio, operator_norm_l, solve_nash_cg, solve_nash_contraction};
use hardy_control::{Coefficients, Field, LeaderSystem, Penalty, Problem, Scenario};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const BASE: &str = include_str!("../../core/scenarios/linear_shared.toml");

fn scenario(mu: f64, alpha: f64) -> Result<Scenario, String> {
    let mut s = Scenario::from_toml(BASE, Path::new(".")).map_err(|e| e.to_string())?;
    s.physics.mu = Some(mu);
    s.physics.alpha = [alpha, alpha];
    let v = s.violations();
    if !v.is_empty() {
        return Err(v.join("; "));
    }
    Ok(s)
}

fn radii(p: &Problem) -> Vec<f64> {
    p.grid().radii().to_vec()
}

/// Snapshots of the uncontrolled state.
#[derive(Debug, Clone, Serialize)]
pub struct HeatReport {
    pub radii: Vec<f64>,
    pub times: Vec<f64>,
    pub profiles: Vec<Vec<f64>>,
    /// `L²` norm at each snapshot.
    pub norms: Vec<f64>,
    pub smallest_eigenvalue: f64,
}

pub fn heat_profiles(mu: f64, snapshots: usize) -> Result<HeatReport, String> {
    let s = scenario(mu, 1e3)?;
    let p = s.build_problem().map_err(|e| e.to_string())?;
    let y0 = s.nash_data(&p).map_err(|e| e.to_string())?.initial;
    let y = p.solver.forward(&y0, None, None).map_err(|e| e.to_string())?;
    let nt = p.solver.n_steps();
    let count = snapshots.clamp(2, nt + 1);
    let levels: Vec<usize> = (0..count).map(|k| k * nt / (count - 1)).collect();
    Ok(HeatReport {
        radii: radii(&p),
        times: levels.iter().map(|&n| y.time(n)).collect(),
        profiles: levels.iter().map(|&n| y.level(n).to_vec()).collect(),
        norms: levels.iter().map(|&n| p.solver.norm_m(y.level(n))).collect(),
        smallest_eigenvalue: p.solver.operator().smallest_eigenvalue(1e-10, 5_000).map_err(|e| e.to_string())?,
    })
}

/// The followers' equilibrium for a given weight.
#[derive(Debug, Clone, Serialize)]
pub struct NashReport {
    pub alpha: f64,
    /// `α - ¼ max_i ‖L_i‖²`; the game is well posed when positive.
    pub coercivity: f64,
    pub contraction_factor: f64,
    pub cg_iterations: usize,
    /// `None` when the fixed point does not settle.
    pub fixed_point_iterations: Option<usize>,
    pub agreement: Option<f64>,
    pub radii: Vec<f64>,
    /// Time averages of each follower control.
    pub followers: [Vec<f64>; 2],
}

fn time_average(f: &Field) -> Vec<f64> {
    let nt = f.n_steps();
    (0..f.n_cells()).map(|j| (0..nt).map(|n| f.level(n)[j]).sum::<f64>() / nt as f64).collect()
}

pub fn nash_game(alpha: f64, mu: f64) -> Result<NashReport, String> {
    let s = scenario(mu, alpha)?;
    let p = s.build_problem().map_err(|e| e.to_string())?;
    let data = s.nash_data(&p).map_err(|e| e.to_string())?;
    let e = |e: hardy_control::Error| e.to_string();
    let norms = [operator_norm_l(&p, 0, 100).map_err(e)?.estimate, operator_norm_l(&p, 1, 100).map_err(e)?.estimate];
    let coercivity = alpha - 0.25 * norms[0].max(norms[1]).powi(2);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let zero = p.zeros();
    let (w1, w2) = (p.random_field(None, &mut rng), p.random_field(None, &mut rng));
    let contraction_factor = contraction_ratio(&p, &Coefficients::linear(), &data, &zero, &w1, &w2).map_err(e)?;
    let cg = solve_nash_cg(&p, &data, &zero, 1e-10).map_err(e)?;
    let (fixed_point_iterations, agreement) = match solve_nash_contraction(&p, &data, &zero, 1e-10, 2_000) {
        Ok(fp) => {
            let diff = p.solver.norm_q(&fp.state.combine(1.0, &cg.state, -1.0).map_err(e)?, None).map_err(e)?;
            let scale = p.solver.norm_q(&cg.state, None).map_err(e)?;
            (Some(fp.iterations), Some(if diff == 0.0 { 0.0 } else { diff / scale }))
        }
        Err(_) => (None, None),
    };
    Ok(NashReport {
        alpha,
        coercivity,
        contraction_factor,
        cg_iterations: cg.iterations,
        fixed_point_iterations,
        agreement,
        radii: radii(&p),
        followers: [time_average(&cg.followers[0]), time_average(&cg.followers[1])],
    })
}

/// Final states with and without the leader, and the leader's control.
#[derive(Debug, Clone, Serialize)]
pub struct LeaderReport {
    pub epsilon: f64,
    pub penalty: String,
    pub terminal_norm: f64,
    pub uncontrolled_norm: f64,
    pub leader_cost: f64,
    pub iterations: usize,
    pub radii: Vec<f64>,
    pub uncontrolled: Vec<f64>,
    pub controlled: Vec<f64>,
    /// Control at the middle of the time interval.
    pub control: Vec<f64>,
}

pub fn leader_control(eps: f64, mu: f64, exact_norm: bool) -> Result<LeaderReport, String> {
    let s = scenario(mu, 1e3)?;
    let p = s.build_problem().map_err(|e| e.to_string())?;
    let sys = LeaderSystem::new(&p, s.nash_data(&p).map_err(|e| e.to_string())?);
    let free = sys.nash(&p.zeros()).map_err(|e| e.to_string())?;
    let penalty = if exact_norm { Penalty::ExactNorm } else { Penalty::Quadratic };
    let res = sys.minimize_leader(eps, penalty, 1e-10, 2_000).map_err(|e| e.to_string())?;
    Ok(LeaderReport {
        epsilon: eps,
        penalty: if exact_norm { "exact_norm" } else { "quadratic" }.into(),
        terminal_norm: res.terminal_norm,
        uncontrolled_norm: p.solver.norm_m(free.state.terminal()),
        leader_cost: res.leader_cost,
        iterations: res.iterations,
        radii: radii(&p),
        uncontrolled: free.state.terminal().to_vec(),
        controlled: res.nash.state.terminal().to_vec(),
        control: res.control.level(p.solver.n_steps() / 2).to_vec(),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let report = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&report).map_err(|e| JsError::new(&e.to_string()))
}

/// JSON [`HeatReport`].
#[wasm_bindgen]
pub fn heat(mu: f64, snapshots: usize) -> Result<String, JsError> {
    to_js(heat_profiles(mu, snapshots))
}

/// JSON [`NashReport`].
#[wasm_bindgen]
pub fn nash(alpha: f64, mu: f64) -> Result<String, JsError> {
    to_js(nash_game(alpha, mu))
}

/// JSON [`LeaderReport`].
#[wasm_bindgen]
pub fn leader(eps: f64, mu: f64, exact_norm: bool) -> Result<String, JsError> {
    to_js(leader_control(eps, mu, exact_norm))
}
