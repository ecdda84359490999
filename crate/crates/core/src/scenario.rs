//! TOML scenario files.
//!
//! A scenario fixes the grid, physics, regions, data and run options. Loading checks
//! every field and reports all violations at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_grid, build_regions, hardy_constant, GridMode, GridSpec, RegionSpec, SpatialGrid};
use crate::leader::Penalty;
use crate::nash::NashData;
use crate::pde::{Field, LinearSolver, TimeScheme};
use crate::problem::{Problem, ProblemSpec};
use crate::semilinear::Nonlinearity;

/// Space (and optionally time) profile used for initial data and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expression {
    Zero,
    Constant {
        value: f64,
        #[serde(default)]
        decay: f64,
    },
    /// `amplitude·exp(-|x-center|²/(2 width²))`; `center` defaults to the origin.
    Gaussian {
        amplitude: f64,
        #[serde(default)]
        center: Vec<f64>,
        width: f64,
        #[serde(default)]
        decay: f64,
    },
    /// `Σ_k coefficients[k]·|x|^k`.
    Polynomial {
        coefficients: Vec<f64>,
        #[serde(default)]
        decay: f64,
    },
    /// Dirichlet Laplacian mode: `sin(kπr/R)/r` (radial) or `Π sin(kπ(x_d+L)/2L)` (tensor).
    Eigenmode {
        amplitude: f64,
        #[serde(default = "one")]
        index: usize,
        #[serde(default)]
        decay: f64,
    },
    /// Values read from a CSV file: `cell,value` for initial data or `time,cell,value` for fields.
    File { path: PathBuf },
}

fn one() -> usize {
    1
}

impl Expression {
    fn decay(&self) -> f64 {
        match self {
            Expression::Constant { decay, .. }
            | Expression::Gaussian { decay, .. }
            | Expression::Polynomial { decay, .. }
            | Expression::Eigenmode { decay, .. } => *decay,
            _ => 0.0,
        }
    }

    fn check(&self, grid: &SpatialGrid, what: &str, out: &mut Vec<String>) {
        match self {
            Expression::Gaussian { center, width, .. } => {
                if !(*width > 0.0) {
                    out.push(format!("{what}: gaussian width must be positive"));
                }
                if !center.is_empty() && center.len() != grid.coord_len() {
                    out.push(format!("{what}: gaussian center needs {} coordinates", grid.coord_len()));
                }
            }
            Expression::Eigenmode { index, .. } if *index == 0 => out.push(format!("{what}: eigenmode index starts at 1")),
            _ => {}
        }
    }

    fn spatial(&self, grid: &SpatialGrid, j: usize) -> f64 {
        let r = grid.radius(j);
        match self {
            Expression::Zero | Expression::File { .. } => 0.0,
            Expression::Constant { value, .. } => *value,
            Expression::Gaussian { amplitude, center, width, .. } => {
                let d2: f64 = if center.is_empty() {
                    r * r
                } else {
                    grid.center(j).iter().zip(center).map(|(x, c)| (x - c) * (x - c)).sum()
                };
                amplitude * (-d2 / (2.0 * width * width)).exp()
            }
            Expression::Polynomial { coefficients, .. } => coefficients.iter().rev().fold(0.0, |acc, c| acc * r + c),
            Expression::Eigenmode { amplitude, index, .. } => {
                let k = *index as f64 * std::f64::consts::PI;
                match grid.mode() {
                    GridMode::Radial3d => amplitude * (k * r / grid.extent()).sin() / r,
                    GridMode::Tensor => {
                        let l = grid.extent();
                        amplitude * grid.center(j).iter().map(|x| (k * (x + l) / (2.0 * l)).sin()).product::<f64>()
                    }
                }
            }
        }
    }

    /// Cell values.
    pub fn eval_vector(&self, grid: &SpatialGrid, base: &Path) -> Result<Vec<f64>> {
        if let Expression::File { path } = self {
            let text = std::fs::read_to_string(base.join(path)).map_err(|e| Error::InvalidScenario(vec![format!("{}: {e}", path.display())]))?;
            let mut v = vec![0.0; grid.n_cells()];
            for (k, line) in text.lines().enumerate().skip(1) {
                let parts: Vec<&str> = line.split(',').collect();
                let parsed = (parts.len() == 2).then(|| (parts[0].trim().parse::<usize>(), parts[1].trim().parse::<f64>()));
                match parsed {
                    Some((Ok(j), Ok(x))) if j < v.len() => v[j] = x,
                    _ => return Err(Error::InvalidScenario(vec![format!("{}: bad line {}", path.display(), k + 1)])),
                }
            }
            return Ok(v);
        }
        Ok((0..grid.n_cells()).map(|j| self.spatial(grid, j)).collect())
    }

    /// Space-time field; interval `n` uses the midpoint time.
    pub fn eval_field(&self, grid: &SpatialGrid, n_steps: usize, t_final: f64, base: &Path) -> Result<Field> {
        if let Expression::File { path } = self {
            let text = std::fs::read_to_string(base.join(path)).map_err(|e| Error::InvalidScenario(vec![format!("{}: {e}", path.display())]))?;
            let f = Field::from_csv(&text)?;
            if f.n_cells() != grid.n_cells() || f.n_steps() != n_steps {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{}", n_steps + 1, grid.n_cells()),
                    found: format!("{}x{}", f.n_steps() + 1, f.n_cells()),
                });
            }
            return Ok(f);
        }
        let space: Vec<f64> = (0..grid.n_cells()).map(|j| self.spatial(grid, j)).collect();
        let decay = self.decay();
        let dt = t_final / n_steps as f64;
        Ok(Field::from_fn(grid.n_cells(), n_steps, t_final, |n, j| {
            let t = if n < n_steps { (n as f64 + 0.5) * dt } else { t_final };
            space[j] * (-decay * t).exp()
        }))
    }
}

/// `[physics]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Physics {
    /// Absolute `μ`; give this or `mu_fraction`.
    #[serde(default)]
    pub mu: Option<f64>,
    /// `μ` as a fraction of the critical constant.
    #[serde(default)]
    pub mu_fraction: Option<f64>,
    pub t_final: f64,
    pub n_steps: usize,
    /// 1 for implicit Euler, ½ for Crank–Nicolson.
    #[serde(default = "default_theta")]
    pub theta: f64,
    pub alpha: [f64; 2],
    #[serde(default)]
    pub linear_solver: SolverChoice,
}

fn default_theta() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    #[default]
    Direct,
    Pcg,
}

/// `[data]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub initial: Expression,
    pub targets: [Expression; 2],
    /// Initial datum of the free trajectory in semilinear runs.
    #[serde(default = "zero_expr")]
    pub trajectory_initial: Expression,
}

fn zero_expr() -> Expression {
    Expression::Zero
}

/// `[carleman]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarlemanSpec {
    #[serde(default = "default_s")]
    pub s: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
}

fn default_s() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    1.0
}
fn default_samples() -> usize {
    10
}

impl Default for CarlemanSpec {
    fn default() -> Self {
        CarlemanSpec { s: default_s(), lambda: default_lambda(), n_samples: default_samples() }
    }
}

/// `[leader]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderSpec {
    #[serde(default = "default_eps")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_penalty")]
    pub penalty: PenaltyChoice,
    #[serde(default = "default_leader_tol")]
    pub tol: f64,
    #[serde(default = "default_leader_iter")]
    pub max_iter: usize,
}

fn default_eps() -> Vec<f64> {
    vec![1e-2, 1e-3, 1e-4]
}
fn default_penalty() -> PenaltyChoice {
    PenaltyChoice::Quadratic
}
fn default_leader_tol() -> f64 {
    1e-10
}
fn default_leader_iter() -> usize {
    2000
}

impl Default for LeaderSpec {
    fn default() -> Self {
        LeaderSpec { epsilons: default_eps(), penalty: default_penalty(), tol: default_leader_tol(), max_iter: default_leader_iter() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyChoice {
    ExactNorm,
    Quadratic,
}

impl From<PenaltyChoice> for Penalty {
    fn from(p: PenaltyChoice) -> Self {
        match p {
            PenaltyChoice::ExactNorm => Penalty::ExactNorm,
            PenaltyChoice::Quadratic => Penalty::Quadratic,
        }
    }
}

/// `[semilinear]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemilinearSpec {
    pub nonlinearity: Nonlinearity,
    #[serde(default = "default_outer_tol")]
    pub tol: f64,
    #[serde(default = "default_outer_iter")]
    pub max_outer: usize,
}

fn default_outer_tol() -> f64 {
    1e-8
}
fn default_outer_iter() -> usize {
    100
}

impl Default for SemilinearSpec {
    fn default() -> Self {
        SemilinearSpec { nonlinearity: Nonlinearity::Zero, tol: default_outer_tol(), max_outer: default_outer_iter() }
    }
}

/// `[tolerances]`: thresholds used by `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub nash: f64,
    pub adjoint: f64,
    pub duality: f64,
    pub stationarity: f64,
    pub energy: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { nash: 1e-10, adjoint: 1e-10, duality: 1e-8, stationarity: 1e-6, energy: 1e-10 }
    }
}

/// A complete scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub grid: GridSpec,
    pub physics: Physics,
    pub regions: RegionSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub carleman: CarlemanSpec,
    #[serde(default)]
    pub leader: LeaderSpec,
    #[serde(default)]
    pub semilinear: SemilinearSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Directory that `file` expressions are relative to.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut s: Scenario = toml::from_str(text).map_err(|e| Error::ScenarioParse(e.to_string()))?;
        s.base_dir = base_dir.to_path_buf();
        let violations = s.violations();
        if !violations.is_empty() {
            return Err(Error::InvalidScenario(violations));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidScenario(vec![format!("{}: {e}", path.display())]))?;
        Scenario::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn mu(&self) -> f64 {
        let crit = hardy_constant(self.grid.dimension);
        match (self.physics.mu, self.physics.mu_fraction) {
            (Some(m), _) => m,
            (None, Some(f)) => f * crit,
            (None, None) => 0.0,
        }
    }

    /// Every violated constraint, as human-readable messages.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let ph = &self.physics;
        match (ph.mu, ph.mu_fraction) {
            (Some(_), Some(_)) => out.push("physics: give mu or mu_fraction, not both".into()),
            (None, Some(f)) if !(0.0..=1.0).contains(&f) => out.push(format!("physics: mu_fraction {f} outside [0, 1]")),
            _ => {}
        }
        if !(ph.t_final > 0.0) {
            out.push(format!("physics: t_final must be positive, got {}", ph.t_final));
        }
        if let Err(e) = (TimeScheme { theta: ph.theta, n_steps: ph.n_steps }).validate() {
            out.push(format!("physics: {e}"));
        }
        if !ph.alpha.iter().all(|a| *a > 0.0) {
            out.push(format!("physics: alpha must be positive, got {:?}", ph.alpha));
        }
        match build_grid(&self.grid) {
            Err(e) => out.push(format!("grid: {e}")),
            Ok(grid) => {
                if let Err(e) = crate::geometry::hardy_potential(&grid, self.mu()) {
                    out.push(format!("physics: {e}"));
                }
                if let Err(e) = build_regions(&grid, &self.regions) {
                    out.push(format!("regions: {e}"));
                }
                self.data.initial.check(&grid, "data.initial", &mut out);
                self.data.trajectory_initial.check(&grid, "data.trajectory_initial", &mut out);
                for (i, t) in self.data.targets.iter().enumerate() {
                    t.check(&grid, &format!("data.targets[{i}]"), &mut out);
                }
            }
        }
        if !(self.carleman.s > 0.0 && self.carleman.lambda > 0.0) {
            out.push("carleman: s and lambda must be positive".into());
        }
        if self.leader.epsilons.is_empty() || self.leader.epsilons.iter().any(|e| !(*e > 0.0)) {
            out.push("leader: epsilons must be a nonempty list of positive numbers".into());
        }
        if !(self.semilinear.tol > 0.0) {
            out.push("semilinear: tol must be positive".into());
        }
        let dt = ph.t_final / ph.n_steps.max(1) as f64;
        let q = dt * self.semilinear.nonlinearity.bounds().1;
        if q >= 1.0 {
            out.push(format!("semilinear: dt*sup|F'| = {q} must be below 1"));
        }
        out
    }

    pub fn problem_spec(&self) -> ProblemSpec {
        ProblemSpec {
            grid: self.grid.clone(),
            mu: self.mu(),
            regions: self.regions.clone(),
            t_final: self.physics.t_final,
            scheme: TimeScheme { theta: self.physics.theta, n_steps: self.physics.n_steps },
            alpha: self.physics.alpha,
            linear_solver: match self.physics.linear_solver {
                SolverChoice::Direct => LinearSolver::Direct,
                SolverChoice::Pcg => LinearSolver::Pcg { tol: 1e-13, max_iter: 10_000 },
            },
        }
    }

    pub fn build_problem(&self) -> Result<Problem> {
        Problem::build(&self.problem_spec())
    }

    /// Initial datum and targets on the problem's grid.
    pub fn nash_data(&self, p: &Problem) -> Result<NashData> {
        let grid = p.grid();
        let (nt, t) = (p.solver.n_steps(), p.solver.t_final());
        Ok(NashData {
            initial: self.data.initial.eval_vector(grid, &self.base_dir)?,
            targets: [
                self.data.targets[0].eval_field(grid, nt, t, &self.base_dir)?,
                self.data.targets[1].eval_field(grid, nt, t, &self.base_dir)?,
            ],
            state_source: None,
        })
    }

    pub fn trajectory_initial(&self, p: &Problem) -> Result<Vec<f64>> {
        self.data.trajectory_initial.eval_vector(p.grid(), &self.base_dir)
    }
}
