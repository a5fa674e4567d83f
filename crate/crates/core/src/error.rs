use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point behind camera (landmark {index:?}, z = {z})")]
    PointBehindCamera { index: Option<usize>, z: f64 },

    #[error("degenerate camera distance: {0}")]
    DegenerateDistance(String),

    #[error("non-positive focal length {0}")]
    NonPositiveFocal(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("infeasible render: {0}")]
    InfeasibleRender(String),

    #[error("non-finite gradient at coordinate {index}")]
    NonFiniteGradient { index: usize },

    #[error("invalid finite-difference step {0}")]
    InvalidStep(f64),

    #[error("initialization failed: {0}")]
    InitializationFailed(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("missing landmark labels: {0}")]
    MissingLabels(String),

    #[error("insufficient depth overlap: {found} valid pixels, need {required}")]
    InsufficientOverlap { found: usize, required: usize },

    #[error("degenerate control points: {0}")]
    DegenerateControlPoints(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("parse error in {what} at byte {offset}: {message}")]
    Parse {
        what: String,
        offset: u64,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Coarse classification used by the CLI exit codes.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::PointBehindCamera { .. }
                | Error::DegenerateDistance(_)
                | Error::NonPositiveFocal(_)
                | Error::InfeasibleRender(_)
                | Error::NonFiniteGradient { .. }
                | Error::InitializationFailed(_)
                | Error::InsufficientOverlap { .. }
                | Error::DegenerateControlPoints(_)
                | Error::DegenerateConfiguration(_)
        )
    }

    /// Short machine-readable kind name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::PointBehindCamera { .. } => "point_behind_camera",
            Error::DegenerateDistance(_) => "degenerate_distance",
            Error::NonPositiveFocal(_) => "non_positive_focal",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::InvalidDimensions(_) => "invalid_dimensions",
            Error::InfeasibleRender(_) => "infeasible_render",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::InvalidStep(_) => "invalid_step",
            Error::InitializationFailed(_) => "initialization_failed",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::MissingLabels(_) => "missing_labels",
            Error::InsufficientOverlap { .. } => "insufficient_overlap",
            Error::DegenerateControlPoints(_) => "degenerate_control_points",
            Error::DegenerateConfiguration(_) => "degenerate_configuration",
            Error::Parse { .. } => "parse",
            Error::Invalid(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
