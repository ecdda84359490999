//! A discretised control problem: grid, regions, stepper and follower weights.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{build_grid, build_regions, GridSpec, RegionSet, RegionSpec, SpatialGrid};
use crate::pde::{assemble, Field, HeatSolver, LinearSolver, TimeScheme};

/// Everything the linear solvers need, independent of the data.
#[derive(Debug)]
pub struct Problem {
    pub regions: RegionSet,
    pub solver: HeatSolver,
    /// Follower control-cost weights.
    pub alpha: [f64; 2],
}

/// Options for [`Problem::build`].
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub grid: GridSpec,
    pub mu: f64,
    pub regions: RegionSpec,
    pub t_final: f64,
    pub scheme: TimeScheme,
    pub alpha: [f64; 2],
    pub linear_solver: LinearSolver,
}

impl Problem {
    pub fn build(spec: &ProblemSpec) -> Result<Self> {
        let grid = build_grid(&spec.grid)?;
        let regions = build_regions(&grid, &spec.regions)?;
        let op = Arc::new(assemble(&grid, spec.mu)?);
        let solver = HeatSolver::new(op, spec.scheme, spec.t_final, spec.linear_solver)?;
        Problem::new(regions, solver, spec.alpha)
    }

    pub fn new(regions: RegionSet, solver: HeatSolver, alpha: [f64; 2]) -> Result<Self> {
        if !alpha.iter().all(|a| *a > 0.0 && a.is_finite()) {
            return Err(Error::InvalidArgument(format!("follower weights must be positive, got {alpha:?}")));
        }
        if regions.control.len() != solver.n_cells() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} cells", solver.n_cells()),
                found: format!("{} mask entries", regions.control.len()),
            });
        }
        Ok(Problem { regions, solver, alpha })
    }

    /// Same geometry and stepper data with other follower weights.
    pub fn with_alpha(&self, alpha: [f64; 2]) -> Result<Self> {
        Problem::new(self.regions.clone(), self.solver.clone(), alpha)
    }

    pub fn grid(&self) -> &SpatialGrid {
        self.solver.operator().grid()
    }

    pub fn n_cells(&self) -> usize {
        self.solver.n_cells()
    }

    pub fn zeros(&self) -> Field {
        self.solver.zeros()
    }

    /// White noise on `mask × (0, T)`, unnormalised.
    pub fn random_field(&self, mask: Option<&[bool]>, rng: &mut impl Rng) -> Field {
        let mut f = self.zeros();
        let nc = self.n_cells();
        for n in 0..self.solver.n_steps() {
            let lvl = f.level_mut(n);
            for j in 0..nc {
                if mask.map_or(true, |m| m[j]) {
                    lvl[j] = rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        f
    }

    /// White noise per cell with unit `L²(Ω)` norm.
    pub fn random_unit_vector(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut v: Vec<f64> = (0..self.n_cells()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = self.solver.norm_m(&v);
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    /// White noise on `mask × (0, T)` with unit norm in that set.
    pub fn random_unit_field(&self, mask: Option<&[bool]>, rng: &mut impl Rng) -> Field {
        let mut f = self.random_field(mask, rng);
        let norm = self.solver.norm_q(&f, mask).expect("shape is the solver's own");
        f.scale(1.0 / norm);
        f
    }
}
