use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the simulator, networks, trainers and planners.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// A tensor constructor received data whose length does not match the shape.
    DataLength { expected: usize, got: usize },
    /// Two tensors that must be congruent have different shapes.
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A layer rejected its input; carries the index of the offending layer.
    LayerInput {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// An activation tape does not belong to this network or forward pass.
    StaleTape,
    /// A non-finite value appeared where the math requires finite input.
    NonFinite { context: &'static str },
    /// Classification label outside [0, K).
    LabelOutOfRange { label: usize, classes: usize },
    /// The normal equations are numerically singular at the requested lambda.
    SingularSystem { cond_estimate: f64 },
    /// A domain value violated its documented range.
    InvalidValue { context: &'static str, value: f64 },
    /// An operation needs data that the caller did not provide.
    EmptyInput(&'static str),
    /// STOP detection requires a calibrated threshold.
    Uncalibrated,
    /// Threshold calibration received indistinguishable groups.
    DegenerateCalibration { stop_mean: f64, other_mean: f64 },
    /// File or directory level failure.
    Io { path: String, message: String },
    /// A serialized artifact could not be parsed.
    Parse { path: String, message: String },
    /// Configuration rejected (unknown key, bad combination, missing input).
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DataLength { expected, got } => {
                write!(f, "data length mismatch: shape expects {expected}, got {got}")
            }
            Error::ShapeMismatch { context, left, right } => {
                write!(f, "{context}: shape mismatch {left:?} vs {right:?}")
            }
            Error::LayerInput { layer, expected, got } => {
                write!(f, "layer {layer} rejected input: expected {expected:?}, got {got:?}")
            }
            Error::StaleTape => write!(f, "activation tape does not match this network"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::SingularSystem { cond_estimate } => {
                write!(f, "normal equations singular (condition estimate {cond_estimate:.3e})")
            }
            Error::InvalidValue { context, value } => {
                write!(f, "invalid value {value} for {context}")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::Uncalibrated => write!(f, "stop threshold has not been calibrated"),
            Error::DegenerateCalibration { stop_mean, other_mean } => write!(
                f,
                "cannot calibrate stop threshold: group means {stop_mean} and {other_mean} coincide"
            ),
            Error::Io { path, message } => write!(f, "io error at {path}: {message}"),
            Error::Parse { path, message } => write!(f, "parse error in {path}: {message}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub fn io(path: impl Into<String>, err: impl fmt::Display) -> Self {
        Error::Io { path: path.into(), message: err.to_string() }
    }

    pub fn parse(path: impl Into<String>, err: impl fmt::Display) -> Self {
        Error::Parse { path: path.into(), message: err.to_string() }
    }
}
