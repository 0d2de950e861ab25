use thiserror::Error;

/// Errors produced by the physics and analysis modules.
///
/// `InvalidConfig` maps to CLI exit code 2, `FitDiverged` to 4, everything
/// else domain-related to 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("axial field Bz = {0} G outside supported range (|Bz| < 2000 G)")]
    FieldOutOfRange(f64),

    #[error("temperature {0} K outside validity window [70, 400] K of the quadratic model")]
    TemperatureOutOfRange(f64),

    #[error("state labeling ambiguous near the ground-state level anticrossing (Bz = {bz} G, max overlap {overlap:.3})")]
    NearGslac { bz: f64, overlap: f64 },

    #[error("perturbative frequency formulas invalid within 10x A_perp of the anticrossing (Bz = {0} G)")]
    PerturbativeBreakdown(f64),

    #[error("degenerate fractional temperature coefficients (lambda_D == lambda_Q): the composite weight is undefined (alpha would approach infinity)")]
    DegenerateLambdas,

    #[error("normalized readout denominator V_B + offset is zero")]
    ZeroDenominator,

    #[error("quadrature pair (0, 0) carries no phase information")]
    ZeroQuadratures,

    #[error("detuning near the arctangent branch cut at |delta| = 1/(4 tau); enable unwrapping to track it")]
    BranchCut,

    #[error("tau grid is not uniform (index {index}: step {step:e} s, expected {expected:e} s)")]
    NonUniformGrid { index: usize, step: f64, expected: f64 },

    #[error("series of length {len} too short for tau = {tau} s at dt = {dt} s")]
    SeriesTooShort { len: usize, tau: f64, dt: f64 },

    #[error("missing budget entry for parameter `{0}`")]
    MissingBudgetEntry(String),

    #[error("fringe fit did not converge: {details}")]
    FitDiverged { details: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
