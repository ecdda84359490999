//! Hierarchic control of heat equations with an inverse-square potential.
//!
//! A leader control acting on one region steers the state to a small ball around
//! zero (or a free trajectory) at the final time, while two followers play a Nash
//! game tracking their own targets. The crate covers the discretisation, the Nash
//! solvers, the leader's penalised dual problem, Carleman weight diagnostics and a
//! semilinear extension.

pub mod carleman;
pub mod error;
pub mod geometry;
pub mod leader;
pub mod nash;
pub mod pde;
pub mod problem;
pub mod scenario;
pub mod semilinear;

pub use error::{Error, GeometryError, Result};
pub use geometry::{build_grid, build_regions, CaseFlag, GridMode, GridSpec, RegionSet, RegionSpec, Shape, SpatialGrid};
pub use leader::{Branch, LeaderResult, LeaderSystem, Penalty};
pub use nash::{Coefficients, NashData, NashSolution};
pub use pde::{assemble, DiscreteOperator, Field, HeatSolver, LinearSolver, TimeScheme};
pub use problem::{Problem, ProblemSpec};
pub use scenario::Scenario;
pub use semilinear::Nonlinearity;
