use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("coincident points at index {0} and {1}")]
    DuplicatePoint(usize, usize),

    #[error("point {0} sits at the coordinate origin (eta2 = 0); shift the domain")]
    OriginDegeneracy(usize),

    #[error("point ({0}, {1}) lies outside the domain")]
    OutsideDomain(f64, f64),

    #[error("coefficient out of range: {0}")]
    Coefficient(String),

    #[error("expression error at byte {pos}: {msg}")]
    Expression { pos: usize, msg: String },

    #[error("inadmissible measure: {0}")]
    InadmissibleMeasure(String),

    #[error("too few samples for band limit {k}: need at least {needed}, got {got}")]
    Aliasing { k: usize, needed: usize, got: usize },

    #[error("ambiguous support matching: tolerance {tol} exceeds half the separation {half_sep}")]
    AmbiguousMatching { tol: f64, half_sep: f64 },

    #[error("infeasible sampling spec after {0} rejections")]
    InfeasibleSpec(usize),

    #[error("cost/point dimension mismatch: cost expects {expected}-d points, got {got}")]
    CostDimension { expected: usize, got: usize },

    #[error("unbalanced masses: {0:e}")]
    Imbalance(f64),

    #[error("oracle limited to 4 atoms per side, got {0}x{1}")]
    OracleSize(usize, usize),

    #[error("infeasible dual pair: phi_i + psi_j exceeds c_ij by {0:e}")]
    InfeasibleDuals(f64),

    #[error("correction solve failed to contract for |rho| = {rho_abs}: {detail}")]
    RhoTooSmall { rho_abs: f64, detail: String },

    #[error("exponential range exceeded: r * max s.x = {0}")]
    ExponentOverflow(f64),

    #[error("ill-conditioned interpolation matrix: sigma_min = {sigma_min:e}, norm = {norm:e}")]
    IllConditioned { sigma_min: f64, norm: f64 },

    #[error("mode {k} outside band limit {band}")]
    OutOfBand { k: i64, band: usize },

    #[error("ill-posed forward problem: {0}")]
    IllPosed(String),

    #[error("atom at ({0}, {1}) closer than the required margin to the boundary")]
    Margin(f64, f64),

    #[error("iterative solver did not converge: {0}")]
    NoConvergence(String),

    #[error("time grid error: {0}")]
    TimeGrid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
