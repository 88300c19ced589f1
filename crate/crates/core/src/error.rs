use alloc::string::String;

/// Errors produced by the analysis pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("line {line}, column {column}: {reason}")]
    Parse {
        line: usize,
        column: usize,
        reason: String,
    },
    #[error("invalid netlist: {0}")]
    InvalidNetlist(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("netlist has more than one supply voltage ({first} V and {second} V)")]
    MultipleSupplies { first: f64, second: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty hotspot set")]
    EmptyHotspots,
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
