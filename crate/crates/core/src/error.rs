use thiserror::Error;

/// Violations of the geometric hypotheses on grids and regions.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("extent {0} does not strictly contain the closed unit ball")]
    ExtentTooSmall(f64),
    #[error("{0} cells per axis is below the minimum of 8")]
    TooFewCells(usize),
    #[error("an odd cell count ({0}) puts a cell centre at the origin")]
    OriginNode(usize),
    #[error("unsupported dimension {0}")]
    InvalidDimension(usize),
    #[error("mu = {mu} outside [0, {max}]")]
    MuOutOfRange { mu: f64, max: f64 },
    #[error("box in {region} has the wrong number of coordinates")]
    ShapeDimension { region: String },
    #[error("{region} region contains no cell")]
    EmptyRegion { region: String },
    #[error("target region {target} meets the closed unit ball")]
    SingularOverlap { target: usize },
    #[error("control region does not meet target region {target}")]
    EmptyIntersection { target: usize },
    #[error("case flag mismatch: {0}")]
    CaseMismatch(String),
}

/// Errors raised by solvers and diagnostics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("linear solve failed: {0}")]
    LinearSolveFailure(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("power iteration did not settle: relative gap {gap:e} after {iterations} steps")]
    NonConvergence { gap: f64, iterations: usize },
    #[error("coercivity constant {delta:e} is not positive")]
    CoercivityFailure { delta: f64 },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("fixed-point ratio stayed at {ratio:.3} or above for 3 steps")]
    ContractionFailure { ratio: f64 },
    #[error("coupled adjoint increments grew for 3 sweeps (last {increment:e})")]
    CouplingDivergence { increment: f64 },
    #[error("the exact-norm penalty is not differentiable at 0")]
    ZeroPointNondifferentiable,
    #[error("leader gradient stagnated at {gradient:e}")]
    ObservabilityTooWeak { gradient: f64 },
    #[error("Psi has a near-critical point outside the observation set at cell {cell}")]
    CriticalPointLeak { cell: usize },
    #[error("sigma stayed non-positive after 20 doublings of lambda")]
    LambdaEscalationFailure,
    #[error("Carleman right-hand side vanishes")]
    DegenerateRhs,
    #[error("weight construction: {0}")]
    WeightGeometry(String),
    #[error("time step too large for the nonlinearity: dt*|F'| = {0}")]
    StepTooLarge(f64),
    #[error("outer fixed point diverged (increment {increment:e})")]
    OuterDivergence { increment: f64 },
    #[error("scenario parse error: {0}")]
    ScenarioParse(String),
    #[error("invalid scenario: {}", .0.join("; "))]
    InvalidScenario(Vec<String>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
