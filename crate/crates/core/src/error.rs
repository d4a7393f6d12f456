use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("conjugate gradient breakdown on device {device}: encountered non-positive curvature {curvature:e}")]
    CgBreakdown { device: usize, curvature: f64 },

    #[error("conjugate gradient stalled on device {device}: residual {residual:e} above {target:e} after {iters} iterations")]
    CgStalled {
        device: usize,
        residual: f64,
        target: f64,
        iters: usize,
    },

    #[error("degenerate channel: |a^H h| = {gain:e} below threshold for device {device}")]
    DegenerateChannel { device: usize, gain: f64 },

    #[error("empty device selection")]
    EmptySelection,

    #[error("sdp solver failure at barrier round {iterate}: {msg}")]
    SdpFailure { msg: String, iterate: usize },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn in_round(self, round: usize) -> Error {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
