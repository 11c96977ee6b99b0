use std::fmt;

/// Errors raised anywhere in the library.
///
/// The CLI maps [`Error::Config`], [`Error::InvalidSpec`], [`Error::InvalidWindow`],
/// [`Error::UnknownLead`] and [`Error::Calibration`] to exit code 2, everything else to 1.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    Dimension(String),
    /// A configuration value is outside its allowed set.
    Config(String),
    /// A filter specification cannot be realised at the given sample rate.
    InvalidSpec(String),
    /// A window is too short to hold a single patch.
    InvalidWindow(String),
    /// FFT length is not a power of two.
    UnsupportedLength(usize),
    /// ECG lead label not present in the lead-angle table.
    UnknownLead(String),
    /// `backward` called on a value that is not connected to any trainable leaf.
    NoGraph,
    /// Nothing to operate on: zero channels, windows or batches.
    EmptyInput,
    /// Loss requested over an empty mask.
    UndefinedLoss,
    /// A metric has no defined value for the given labels.
    UndefinedMetric(String),
    /// Quantization statistics missing or degenerate.
    Calibration(String),
    /// Training produced a non-finite loss.
    Divergence { step: usize, loss: f64, detail: String },
    /// Malformed file or manifest.
    Format(String),
    Io(String),
}

impl Error {
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidSpec(_)
                | Error::InvalidWindow(_)
                | Error::UnknownLead(_)
                | Error::Calibration(_)
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::InvalidSpec(m) => write!(f, "invalid filter spec: {m}"),
            Error::InvalidWindow(m) => write!(f, "invalid window: {m}"),
            Error::UnsupportedLength(n) => write!(f, "unsupported FFT length {n} (need a power of two)"),
            Error::UnknownLead(l) => write!(f, "unknown ECG lead `{l}`"),
            Error::NoGraph => write!(f, "backward called on a value with no recorded graph"),
            Error::EmptyInput => write!(f, "empty input: no channels, windows or samples"),
            Error::UndefinedLoss => write!(f, "loss undefined: mask selects no cells"),
            Error::UndefinedMetric(m) => write!(f, "undefined metric: {m}"),
            Error::Calibration(m) => write!(f, "calibration error: {m}"),
            Error::Divergence { step, loss, detail } => {
                write!(f, "training diverged at step {step} (loss {loss}): {detail}")
            }
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
