use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("point {point:?} lies outside the chart box")]
    OutsideChart { point: Vec<f64> },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("metric matrix is singular at {point:?}")]
    SingularMetric { point: Vec<f64> },

    #[error("signature check failed at {point:?}: expected (-,+,...,+)")]
    Signature { point: Vec<f64> },

    #[error("second derivatives unavailable for metric `{0}`")]
    NotSmooth(String),

    #[error("convolution margin violated: distance {distance} to the chart boundary is below epsilon {epsilon}")]
    MarginViolation { distance: f64, epsilon: f64 },

    #[error("quadrature did not converge: refinement changed the value by {difference:e} (tolerance {tolerance:e})")]
    QuadratureNonConvergence { difference: f64, tolerance: f64 },

    #[error("cone calibration failed: no shift constant up to {max_constant} achieves nesting")]
    CalibrationFailure { max_constant: f64 },

    #[error("step size underflow at t = {t} (state {state:?})")]
    StepSizeUnderflow { t: f64, state: Vec<f64> },

    #[error("integration exceeded {0} steps")]
    TooManySteps(usize),

    #[error("curve left the chart at parameter {t} before reaching {target}")]
    BoundaryExit { t: f64, target: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("limits did not converge along the perturbation grid: successive terminal states differ by {0:e}")]
    NonConvergentClustering(f64),

    #[error("hypothesis verification failed: {what} (worst value {worst})")]
    Hypothesis { what: String, worst: f64 },

    #[error("search failed: {0}")]
    SearchFailure(String),
}

impl LabError {
    pub(crate) fn outside(point: &nalgebra::Vector4<f64>, dim: usize) -> Self {
        LabError::OutsideChart {
            point: point.iter().take(dim).copied().collect(),
        }
    }
}
