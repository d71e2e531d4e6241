use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grid extent must be positive and finite, got {0}")]
    InvalidExtent(f64),
    #[error("grid needs at least 2 cells, got {0}")]
    TooFewCells(usize),
    #[error("expected {expected} node values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at node {0}")]
    NonFinite(usize),
    #[error("point {s} outside [0, {m}]")]
    OutOfDomain { s: f64, m: f64 },
    #[error("refinement factor must be at least 1")]
    InvalidRefinement,
    #[error("grids are not nested")]
    IncompatibleGrids,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{family} does not provide a derivative of order {order}")]
    UnsupportedDerivative { family: &'static str, order: usize },
    #[error("rate `{rate}` reads argument `{var}`, which it may not depend on")]
    ForbiddenArgument {
        rate: &'static str,
        var: &'static str,
    },
    #[error("invalid coefficients for {family}: {reason}")]
    InvalidCoefficients {
        family: &'static str,
        reason: String,
    },
    #[error("density must be non-negative, found {value} at node {node}")]
    NegativeDensity { node: usize, value: f64 },
    #[error("hierarchy parameter alpha must be finite and >= 0, got {0}")]
    InvalidAlpha(f64),
    #[error("ingredient grid extent {got} does not match maximal size {expected}")]
    ExtentMismatch { expected: f64, got: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SteadyError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("growth rate is not positive (gamma = {gamma} at s = {s}, P = {p})")]
    NonPositiveGrowth { s: f64, p: f64, gamma: f64 },
    #[error("fixed-point iteration diverged: norm {norm} exceeds ceiling {ceiling}")]
    Diverged { norm: f64, ceiling: f64 },
    #[error("fixed-point iteration collapsed to the trivial state after {iterations} iterations")]
    CollapsedToZero { iterations: usize },
    #[error("decomposition rank must be at least 1")]
    InvalidRank,
    #[error("decomposition has {terms} terms but the state carries {births} birth coordinates")]
    RankMismatch { terms: usize, births: usize },
    #[error("invalid solver option: {0}")]
    InvalidOption(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("time step {dt} violates the stability bound {bound}")]
    CflViolation { dt: f64, bound: f64 },
    #[error("CFL number must lie in (0, 1], got {0}")]
    InvalidCfl(f64),
    #[error("total mass {mass} exceeded ceiling {ceiling} at t = {t}")]
    BlowUp { t: f64, mass: f64, ceiling: f64 },
    #[error("invalid simulation request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Steady(#[from] SteadyError),
    #[error("fertility is not in separable form beta1(s) * beta2(y, E)")]
    NotSeparable,
    #[error("invalid bracket [{lo}, {hi}]")]
    InvalidBracket { lo: f64, hi: f64 },
    #[error("invalid scan window: {0}")]
    InvalidWindow(String),
    #[error("eigenvalue iteration did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("matrix must be square and non-empty")]
    BadMatrix,
}
