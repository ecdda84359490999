//! Carleman weight functions and the weighted inequalities built from them.
//!
//! `Ψ` is an explicit radial profile: `ln r` inside the unit ball, rising to a single
//! maximum inside the observation set and falling to zero on the boundary. From it
//! `θ(t) = t⁻³(T-t)⁻³`, `σ = sθ(e^{2λ sup Ψ} - ½|x|² - e^{λΨ})`, `Φ = e^{λΨ}` and
//! `ρ = e^σ θ^{-1/2}` are evaluated at time-interval midpoints. Everything that could
//! overflow is handled through logarithms.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{hardy_constant, radial_intervals, CaseFlag, GridMode, RegionSpec, SpatialGrid};
use crate::pde::Field;
use crate::problem::Problem;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Piece {
    Log,
    Linear,
    Hermite { x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64 },
}

impl Piece {
    fn eval(&self, r: f64) -> (f64, f64) {
        match *self {
            Piece::Log => (r.ln(), 1.0 / r),
            Piece::Linear => (r - 1.0, 1.0),
            Piece::Hermite { x0, x1, y0, y1, d0, d1 } => {
                let h = x1 - x0;
                let t = (r - x0) / h;
                let (t2, t3) = (t * t, t * t * t);
                let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
                    + (t3 - 2.0 * t2 + t) * h * d0
                    + (-2.0 * t3 + 3.0 * t2) * y1
                    + (t3 - t2) * h * d1;
                let dv = (6.0 * t2 - 6.0 * t) / h * y0
                    + (3.0 * t2 - 4.0 * t + 1.0) * d0
                    + (-6.0 * t2 + 6.0 * t) / h * y1
                    + (3.0 * t2 - 2.0 * t) * d1;
                (v, dv)
            }
        }
    }
}

/// Piecewise radial profile `P(r)` on `(0, r_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialProfile {
    /// `(end, piece)`, increasing ends.
    pieces: Vec<(f64, Piece)>,
    peak: f64,
    sup: f64,
}

impl RadialProfile {
    /// Value and derivative at `r`.
    pub fn eval(&self, r: f64) -> (f64, f64) {
        let k = self.pieces.iter().position(|(end, _)| r <= *end).unwrap_or(self.pieces.len() - 1);
        self.pieces[k].1.eval(r)
    }

    pub fn peak(&self) -> f64 {
        self.peak
    }

    pub fn sup(&self) -> f64 {
        self.sup
    }
}

/// Build one profile per peak; outside `[a, b]` all profiles coincide.
///
/// `a ≥ 1` is where the rise towards the peaks starts, `b` where the common descent
/// to zero at `r_max` starts, and every peak lies in `(a, b)`.
pub fn build_profiles(a: f64, b: f64, peaks: &[f64], r_max: f64) -> Result<Vec<RadialProfile>> {
    if !(1.0 <= a && a < b && b < r_max) || peaks.iter().any(|&p| !(a < p && p < b)) {
        return Err(Error::WeightGeometry(format!("need 1 <= a < peaks < b < {r_max}, got a={a}, b={b}, peaks={peaks:?}")));
    }
    let psi_a = a - 1.0;
    let s_a = 1.0;
    let rise = peaks.iter().map(|p| p - a).fold(0.0, f64::max);
    let fall = peaks.iter().map(|p| b - p).fold(0.0, f64::max);
    let top = psi_a + 2.0 / 3.0 * s_a * rise.max(1e-3);
    let mut s_b = 1.0;
    let mut psi_b = top - 2.0 / 3.0 * s_b * fall;
    while psi_b / (r_max - b) <= 0.75 * s_b {
        s_b *= 0.5;
        psi_b = top - 2.0 / 3.0 * s_b * fall;
    }
    let secant = psi_b / (r_max - b);
    let s_r = 2.0 * secant - s_b;
    let outer = Piece::Hermite { x0: b, x1: r_max, y0: psi_b, y1: 0.0, d0: -s_b, d1: -s_r };
    Ok(peaks
        .iter()
        .map(|&peak| RadialProfile {
            pieces: vec![
                (1.0, Piece::Log),
                (a, Piece::Linear),
                (peak, Piece::Hermite { x0: a, x1: peak, y0: psi_a, y1: top, d0: s_a, d1: 0.0 }),
                (b, Piece::Hermite { x0: peak, x1: b, y0: top, y1: psi_b, d0: 0.0, d1: -s_b }),
                (r_max, outer),
            ],
            peak,
            sup: top,
        })
        .collect())
}

/// Where the weight peaks.
#[derive(Debug, Clone, PartialEq)]
pub enum PsiVariant {
    /// One weight peaking in the radial interval `ω₀`.
    Single { omega0: (f64, f64) },
    /// Two weights that agree outside `Õ = tilde` and peak in `ω₁`, `ω₂`.
    Pair { tilde: (f64, f64), omegas: [(f64, f64); 2] },
}

fn intersect(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(a0, a1) in a {
        for &(b0, b1) in b {
            let (lo, hi) = (a0.max(b0), a1.min(b1));
            if lo < hi {
                out.push((lo, hi));
            }
        }
    }
    out
}

fn subtract(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut cur = a.to_vec();
    for &(b0, b1) in b {
        let mut next = Vec::new();
        for (lo, hi) in cur {
            if b1 <= lo || b0 >= hi {
                next.push((lo, hi));
                continue;
            }
            if lo < b0 {
                next.push((lo, b0));
            }
            if b1 < hi {
                next.push((b1, hi));
            }
        }
        cur = next;
    }
    cur
}

fn longest(v: &[(f64, f64)]) -> Option<(f64, f64)> {
    v.iter().cloned().max_by(|x, y| (x.1 - x.0).total_cmp(&(y.1 - y.0)))
}

fn shrink(iv: (f64, f64), h: f64) -> (f64, f64) {
    let len = iv.1 - iv.0;
    let d = if len > 2.0 * h { h } else { 0.25 * len };
    (iv.0 + d, iv.1 - d)
}

/// Default observation geometry from annular regions.
///
/// `ω₀` is `O ∩ O_d` shrunk by one cell. In the distinct case `ω_i` comes from
/// `(O ∩ O_{i,d}) \ O_{3-i,d}` (or `O ∩ O_{i,d}` when that is empty) and `Õ` is the
/// hull of the two unshrunk sets.
pub fn default_variant(grid: &SpatialGrid, spec: &RegionSpec) -> Result<PsiVariant> {
    let need = |r: &crate::geometry::Region| {
        radial_intervals(r).ok_or_else(|| Error::WeightGeometry("weights need annular control and target regions".into()))
    };
    let control = need(&spec.control)?;
    let targets = [need(&spec.targets[0])?, need(&spec.targets[1])?];
    let h = grid.spacing();
    match spec.case {
        CaseFlag::Shared => {
            let raw = longest(&intersect(&control, &targets[0]))
                .ok_or_else(|| Error::WeightGeometry("control and target regions do not meet".into()))?;
            Ok(PsiVariant::Single { omega0: shrink(raw, h) })
        }
        CaseFlag::Distinct => {
            let mut raws = [(0.0, 0.0); 2];
            for i in 0..2 {
                let inside = intersect(&control, &targets[i]);
                let own = subtract(&inside, &targets[1 - i]);
                raws[i] = longest(&own)
                    .or_else(|| longest(&inside))
                    .ok_or_else(|| Error::WeightGeometry(format!("target {} misses the control region", i + 1)))?;
            }
            let tilde = (raws[0].0.min(raws[1].0), raws[0].1.max(raws[1].1));
            Ok(PsiVariant::Pair { tilde, omegas: [shrink(raws[0], h), shrink(raws[1], h)] })
        }
    }
}

/// Smooth gauge `c(x)` equal to `|x|` up to `a0` and to `√N‖x‖_∞` near the box boundary.
fn gauge(x: &[f64], a0: f64, half_width: f64) -> (f64, Vec<f64>) {
    let n = x.len();
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (kmax, inf) = x.iter().enumerate().fold((0, 0.0), |acc, (k, v)| if v.abs() > acc.1 { (k, v.abs()) } else { acc });
    let sq = (n as f64).sqrt();
    let s = ((r - a0) / (half_width - a0)).clamp(0.0, 1.0);
    let chi = s * s * (3.0 - 2.0 * s);
    let dchi = if s > 0.0 && s < 1.0 { 6.0 * s * (1.0 - s) / (half_width - a0) } else { 0.0 };
    let c = (1.0 - chi) * r + chi * sq * inf;
    let mut grad = vec![0.0; n];
    for k in 0..n {
        let xr = x[k] / r;
        grad[k] = (1.0 - chi) * xr + dchi * (sq * inf - r) * xr;
    }
    grad[kmax] += chi * sq * x[kmax].signum();
    (c, grad)
}

/// Weight function(s) sampled on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiField {
    /// One entry for the single variant, two for the pair.
    pub values: Vec<Vec<f64>>,
    pub gradient_norms: Vec<Vec<f64>>,
    /// Cells of `ω₀` (single) or `ω₁`, `ω₂` (pair).
    pub omega_masks: Vec<Vec<bool>>,
    /// Cells of `Õ` for the pair variant.
    pub tilde_mask: Option<Vec<bool>>,
    pub sup: f64,
    pub profiles: Vec<RadialProfile>,
}

/// Sample `Ψ` (or `Ψ₁`, `Ψ₂`) on the grid and check that it has no stray critical point.
pub fn build_psi(grid: &SpatialGrid, variant: &PsiVariant) -> Result<PsiField> {
    let (a, b, peaks, omegas, tilde) = match variant {
        PsiVariant::Single { omega0 } => (omega0.0, omega0.1, vec![0.5 * (omega0.0 + omega0.1)], vec![*omega0], None),
        PsiVariant::Pair { tilde, omegas } => (
            tilde.0,
            tilde.1,
            omegas.iter().map(|w| 0.5 * (w.0 + w.1)).collect(),
            omegas.to_vec(),
            Some(*tilde),
        ),
    };
    let (r_max, blend) = match grid.mode() {
        GridMode::Radial3d => (grid.extent(), None),
        GridMode::Tensor => {
            let l = grid.extent();
            if b >= l {
                return Err(Error::WeightGeometry("observation set must lie inside the inscribed ball".into()));
            }
            ((grid.dimension() as f64).sqrt() * l, Some(0.5 * (b + l)))
        }
    };
    let profiles = build_profiles(a, b, &peaks, r_max)?;
    let n = grid.n_cells();
    let in_iv = |iv: (f64, f64), j: usize| grid.radius(j) > iv.0 && grid.radius(j) < iv.1;
    let omega_masks: Vec<Vec<bool>> = omegas.iter().map(|&w| (0..n).map(|j| in_iv(w, j)).collect()).collect();
    if omega_masks.iter().any(|m| !m.iter().any(|&x| x)) {
        return Err(Error::WeightGeometry("observation set contains no cell at this resolution".into()));
    }
    let mut values = Vec::new();
    let mut gradient_norms = Vec::new();
    for (k, prof) in profiles.iter().enumerate() {
        let mut v = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(n);
        for j in 0..n {
            let (val, grad) = match blend {
                None => {
                    let (p, dp) = prof.eval(grid.radius(j));
                    (p, dp.abs())
                }
                Some(a0) => {
                    let (c, dc) = gauge(grid.center(j), a0, grid.extent());
                    let (p, dp) = prof.eval(c);
                    (p, dp.abs() * dc.iter().map(|x| x * x).sum::<f64>().sqrt())
                }
            };
            v.push(val);
            g.push(grad);
        }
        let gmax = g.iter().cloned().fold(0.0, f64::max);
        if let Some(j) = (0..n).find(|&j| !omega_masks[k][j] && g[j] < 1e-3 * gmax) {
            return Err(Error::CriticalPointLeak { cell: j });
        }
        values.push(v);
        gradient_norms.push(g);
    }
    let tilde_mask = tilde.map(|t| (0..n).map(|j| in_iv(t, j)).collect());
    Ok(PsiField { values, gradient_norms, omega_masks, tilde_mask, sup: profiles[0].sup(), profiles })
}

/// `θ` at the midpoint of interval `n` of `n_steps` on `(0, T)`, as a logarithm.
fn log_theta(n: usize, n_steps: usize, t_final: f64) -> f64 {
    let dt = t_final / n_steps as f64;
    let t = (n as f64 + 0.5) * dt;
    let u = (n_steps as f64 - n as f64 - 0.5) * dt;
    -3.0 * (t * u).ln()
}

/// The weight family on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CarlemanWeightSet {
    pub s: f64,
    pub lambda: f64,
    pub t_final: f64,
    pub n_steps: usize,
    pub psi: PsiField,
    pub case: CaseFlag,
    /// `θ` at each interval midpoint.
    pub theta: Vec<f64>,
    log_theta: Vec<f64>,
    /// `e^{2λ sup Ψ} - ½|x|² - e^{λΨ_i}` per weight and cell.
    spatial: Vec<Vec<f64>>,
    radii: Vec<f64>,
}

/// Build the weights, doubling `λ` (at most 20 times) until `σ > 0` everywhere.
pub fn build_weights(grid: &SpatialGrid, psi: PsiField, s: f64, lambda: f64, t_final: f64, n_steps: usize) -> Result<CarlemanWeightSet> {
    if !(s > 0.0 && lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("s and lambda must be positive, got {s}, {lambda}")));
    }
    let radii = grid.radii().to_vec();
    let mut lam = lambda;
    for _ in 0..=20 {
        let top = (2.0 * lam * psi.sup).exp();
        let spatial: Vec<Vec<f64>> = psi
            .values
            .iter()
            .map(|v| v.iter().zip(&radii).map(|(p, r)| top - 0.5 * r * r - (lam * p).exp()).collect())
            .collect();
        if spatial.iter().flatten().all(|&x| x > 0.0) {
            let log_theta: Vec<f64> = (0..n_steps).map(|n| log_theta(n, n_steps, t_final)).collect();
            let theta = log_theta.iter().map(|l| l.exp()).collect();
            let case = if psi.values.len() == 2 { CaseFlag::Distinct } else { CaseFlag::Shared };
            return Ok(CarlemanWeightSet { s, lambda: lam, t_final, n_steps, psi, case, theta, log_theta, spatial, radii });
        }
        lam *= 2.0;
    }
    Err(Error::LambdaEscalationFailure)
}

impl CarlemanWeightSet {
    pub fn midpoint(&self, n: usize) -> f64 {
        (n as f64 + 0.5) * self.t_final / self.n_steps as f64
    }

    pub fn log_theta(&self, n: usize) -> f64 {
        self.log_theta[n]
    }

    /// `σ_k` at cell `j`, interval midpoint `n`.
    pub fn sigma(&self, k: usize, j: usize, n: usize) -> f64 {
        self.s * self.theta[n] * self.spatial[k][j]
    }

    /// `Φ = e^{λΨ}` of the first weight.
    pub fn phi(&self, j: usize) -> f64 {
        (self.lambda * self.psi.values[0][j]).exp()
    }

    /// `ln ρ⁻²`: `ln θ - 2σ` (single) or `ln θ - 2 max_k σ_k` (pair).
    pub fn log_rho_inv2(&self, j: usize, n: usize) -> f64 {
        let smax = (0..self.spatial.len()).map(|k| self.sigma(k, j, n)).fold(f64::NEG_INFINITY, f64::max);
        self.log_theta[n] - 2.0 * smax
    }

    /// `e^{-2σ}` of the first weight, clamped below at `1e-300`, as a field over midpoints.
    pub fn damping_field(&self) -> Field {
        let n = self.radii.len();
        Field::from_fn(n, self.n_steps, self.t_final, |lvl, j| {
            if lvl == self.n_steps {
                0.0
            } else {
                (-2.0 * self.sigma(0, j, lvl)).exp().max(1e-300)
            }
        })
    }

    /// `σ` of the first weight as a field over midpoints.
    pub fn sigma_field(&self) -> Field {
        let n = self.radii.len();
        Field::from_fn(n, self.n_steps, self.t_final, |lvl, j| if lvl == self.n_steps { 0.0 } else { self.sigma(0, j, lvl) })
    }
}

/// Streaming log-sum-exp.
#[derive(Debug, Clone, Copy)]
pub struct LogSum {
    max: f64,
    acc: f64,
}

impl Default for LogSum {
    fn default() -> Self {
        LogSum { max: f64::NEG_INFINITY, acc: 0.0 }
    }
}

impl LogSum {
    pub fn add(&mut self, log_x: f64) {
        if log_x == f64::NEG_INFINITY {
            return;
        }
        if log_x > self.max {
            self.acc = self.acc * (self.max - log_x).exp() + 1.0;
            self.max = log_x;
        } else {
            self.acc += (log_x - self.max).exp();
        }
    }

    pub fn value(&self) -> f64 {
        if self.acc == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.acc.ln()
        }
    }
}

/// Squared discrete gradient per cell (face differences averaged onto cells).
pub fn gradient_squared(grid: &SpatialGrid, u: &[f64]) -> Vec<f64> {
    let n = grid.n_cells();
    let h = grid.spacing();
    let mut out = vec![0.0; n];
    match grid.mode() {
        GridMode::Radial3d => {
            for j in 0..n {
                let inner = if j == 0 { 0.0 } else { (u[j] - u[j - 1]) / h };
                let outer = if j + 1 == n { -2.0 * u[j] / h } else { (u[j + 1] - u[j]) / h };
                out[j] = 0.5 * (inner * inner + outer * outer);
            }
        }
        GridMode::Tensor => {
            let cpa = grid.cells_per_axis();
            for j in 0..n {
                let idx = grid.tensor_index(j);
                let mut s = 0.0;
                for axis in 0..grid.dimension() {
                    let side = |step: i64| {
                        let k = idx[axis] as i64 + step;
                        if k >= 0 && (k as usize) < cpa {
                            let mut nb = idx.clone();
                            nb[axis] = k as usize;
                            (u[grid.tensor_flat(&nb)] - u[j]) / h
                        } else {
                            -2.0 * u[j] / h
                        }
                    };
                    let (a, b) = (side(-1), side(1));
                    s += 0.5 * (a * a + b * b);
                }
                out[j] = s;
            }
        }
    }
    out
}

/// One Carleman sample: the logarithms of each side and the five left-hand terms.
#[derive(Debug, Clone, PartialEq)]
pub struct CarlemanSample {
    pub log_lhs: f64,
    pub log_rhs: f64,
    /// Logs of the five left-hand terms; `-∞` for a term that vanishes.
    pub log_terms: [f64; 5],
    pub ratio: f64,
}

/// Distribution of `LHS/RHS` over random `(u⁰, g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CarlemanSamples {
    pub samples: Vec<CarlemanSample>,
    pub max: f64,
}

/// Evaluate both sides of the Carleman inequality for `u` solving the backward problem
/// with terminal datum `u0` and source `g`.
pub fn carleman_sample(p: &Problem, w: &CarlemanWeightSet, u0: &[f64], g: &Field) -> Result<CarlemanSample> {
    let grid = p.grid();
    let u = p.solver.backward(u0, Some(g), None)?.field;
    let omega = &w.psi.omega_masks[0];
    let raw = p.solver.inner_q(g, g, None)? + p.solver.inner_q(&u, &u, Some(omega))?;
    if raw < 1e-30 {
        return Err(Error::DegenerateRhs);
    }
    let (s, lam) = (w.s, w.lambda);
    let mu_gap = hardy_constant(grid.dimension()) - p.solver.operator().mu();
    let mass = p.solver.mass();
    let dt = p.solver.dt();
    let mut terms = [LogSum::default(); 5];
    let mut rhs = LogSum::default();
    let ln = f64::ln;
    for n in 0..p.solver.n_steps() {
        let lu = u.level(n);
        let lg = g.level(n);
        let grad2 = gradient_squared(grid, lu);
        let lt = w.log_theta(n);
        for j in 0..lu.len() {
            let r = grid.radius(j);
            let base = ln(dt * mass[j]) - 2.0 * w.sigma(0, j, n);
            let lphi = lam * w.psi.values[0][j];
            if lu[j] != 0.0 {
                let lu2 = ln(lu[j] * lu[j]);
                terms[0].add(base + 3.0 * ln(s) + 3.0 * lt + 2.0 * ln(r) + lu2);
                if r > 1.0 {
                    terms[1].add(base + 3.0 * ln(s) + 4.0 * ln(lam) + 3.0 * lt + 3.0 * lphi + lu2);
                }
                terms[2].add(base + ln(s) + lt + lu2 - ln(r));
                if mu_gap > 0.0 {
                    terms[3].add(base + ln(s * mu_gap) + lt + lu2 - 2.0 * ln(r));
                }
                if omega[j] {
                    rhs.add(base + 3.0 * ln(s) + 4.0 * ln(lam) + 3.0 * lt + 3.0 * lphi + lu2);
                }
            }
            if r > 1.0 && grad2[j] > 0.0 {
                terms[4].add(base + ln(s) + 2.0 * ln(lam) + lt + lphi + ln(grad2[j]));
            }
            if lg[j] != 0.0 {
                rhs.add(base + ln(lg[j] * lg[j]));
            }
        }
    }
    let log_terms = [terms[0].value(), terms[1].value(), terms[2].value(), terms[3].value(), terms[4].value()];
    let mut lhs = LogSum::default();
    for t in log_terms {
        lhs.add(t);
    }
    let (log_lhs, log_rhs) = (lhs.value(), rhs.value());
    Ok(CarlemanSample { log_lhs, log_rhs, log_terms, ratio: (log_lhs - log_rhs).exp() })
}

/// Carleman ratios for `n_samples` white-noise pairs `(u⁰, g)` of unit norm.
pub fn carleman_ratio(p: &Problem, w: &CarlemanWeightSet, n_samples: usize, rng: &mut impl Rng) -> Result<CarlemanSamples> {
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let u0 = p.random_unit_vector(rng);
        let g = p.random_unit_field(None, rng);
        samples.push(carleman_sample(p, w, &u0, &g)?);
    }
    let max = samples.iter().map(|s| s.ratio).fold(0.0, f64::max);
    Ok(CarlemanSamples { samples, max })
}

/// Weighted distance of a target from the trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Admissibility {
    /// `ln ∬_{O_{i,d}} ρ²|ȳ - y_{i,d}|²`; `-∞` when the target equals the trajectory.
    pub log_value: f64,
    /// `exp(log_value)`, possibly infinite.
    pub value: f64,
    /// Integrand at the last midpoint exceeds `1e6` times its mid-interval value.
    pub warn: bool,
}

/// `∬_{mask×(0,T)} ρ²|ȳ - y_d|²` with a growth warning near `t = T`.
pub fn target_admissibility(p: &Problem, w: &CarlemanWeightSet, trajectory: &Field, target: &Field, mask: &[bool]) -> Result<Admissibility> {
    trajectory.same_shape(target)?;
    let mass = p.solver.mass();
    let dt = p.solver.dt();
    let nt = p.solver.n_steps();
    let mut slices = Vec::with_capacity(nt);
    for n in 0..nt {
        let (a, b) = (trajectory.level(n), target.level(n));
        let mut acc = LogSum::default();
        for j in 0..a.len() {
            let d = a[j] - b[j];
            if mask[j] && d != 0.0 {
                acc.add(mass[j].ln() - w.log_rho_inv2(j, n) + (d * d).ln());
            }
        }
        slices.push(acc.value());
    }
    let mut total = LogSum::default();
    for &s in &slices {
        total.add(dt.ln() + s);
    }
    let log_value = total.value();
    let (last, mid) = (slices[nt - 1], slices[nt / 2]);
    let warn = last > f64::NEG_INFINITY && (mid == f64::NEG_INFINITY || last - mid > 1e6f64.ln());
    Ok(Admissibility { log_value, value: log_value.exp(), warn })
}
