use thiserror::Error;

/// Errors raised by the numerical kernels and the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("vector {index} is not unit length (norm {norm})")]
    Normalization { index: usize, norm: f64 },
    #[error("degenerate basis: separation constant {alpha} below threshold")]
    DegenerateBasis { alpha: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("subspace violation: {0}")]
    Subspace(String),
    #[error("unknown system '{0}'")]
    UnknownSystem(String),
    #[error("parameter out of admissible range: {0}")]
    Parameter(String),
    #[error("not partially hyperbolic: lambda0 estimate {lambda0}")]
    NotPartiallyHyperbolic { lambda0: f64 },
    #[error("splitting computation failed: {0}")]
    SplittingFailure(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("disc radius too large: {0}")]
    DeltaTooLarge(String),
    #[error("itinerary error: {0}")]
    Itinerary(String),
    #[error("no convergence: {0}")]
    Convergence(String),
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("chart refinement failed: {0}")]
    ChartRefinement(String),
    #[error("distortion failure: {0}")]
    Distortion(String),
    #[error("coherence error: {0}")]
    Coherence(String),
    #[error("partial fiber: {0}")]
    PartialFiber(String),
    #[error("missing stage output: {0}")]
    MissingStage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml error: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite entries")))
    }
}
