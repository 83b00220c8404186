use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed or inconsistent caller input (shapes, lengths, config values).
    Input,
    /// Problems with the data itself (parsing, too few accounts, empty splits).
    Data,
    /// Numerical degeneracy: vanishing scales, no feasible bandwidth, bad spectra.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("degenerate scale: {0}")]
    DegenerateScale(String),
    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("insufficient reference set: {0}")]
    InsufficientReference(String),
    #[error("infeasible warping band: |{len_a} - {len_b}| exceeds window {window}")]
    InfeasibleBand {
        len_a: usize,
        len_b: usize,
        window: usize,
    },
    #[error("no feasible bandwidth on the grid: {0}")]
    NoFeasibleBandwidth(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Input(_) | Error::Parameter(_) | Error::InfeasibleBand { .. } => ErrorKind::Input,
            Error::InsufficientReference(_) | Error::Size(_) | Error::UndefinedMetric(_) => {
                ErrorKind::Data
            }
            Error::DegenerateScale(_)
            | Error::DegenerateKernel(_)
            | Error::Numerical(_)
            | Error::NoFeasibleBandwidth(_) => ErrorKind::Numerical,
            Error::Stage { source, .. } => source.kind(),
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn at(self, stage: impl Into<String>) -> Error {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
