use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("vacuum: enthalpy argument {arg} is at or below h(rho_floor) = {floor}")]
    Vacuum { arg: f64, floor: f64 },
    #[error("state too close to sonic: rho^2 p'(rho) - J0^2 = {gap}")]
    SonicProximity { gap: f64 },
    #[error("sonic breakdown at x = {x}")]
    SonicBreakdown { x: f64 },
    #[error("vacuum breakdown at x = {x}")]
    VacuumBreakdown { x: f64 },
    #[error("no sign change of the exit-density mismatch in E0 range [{lo}, {hi}]")]
    NoBracket { lo: f64, hi: f64 },
    #[error("no convergence after {iterations} iterations (last change {last_diff:e})")]
    MaxIterations { iterations: usize, last_diff: f64 },
    #[error("background not subsonic: {0}")]
    NotSubsonic(String),
    #[error("perturbation outside the admissibility ball: {0}")]
    Admissibility(String),
    #[error("iterate left the admissible set: {0}")]
    AdmissibilityExit(String),
    #[error("successive differences failed to contract for 3 consecutive steps (ratios {ratios:?})")]
    NonContraction { ratios: Vec<f64> },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("boundary data violates wall compatibility: {0}")]
    Compatibility(String),
    #[error("linear solve failed: {0}")]
    Solver(String),
    #[error("domain map folds over at {point:?} (det = {det})")]
    FoldOver { point: Vec<f64>, det: f64 },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
