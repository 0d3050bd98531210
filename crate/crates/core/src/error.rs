use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine. Each variant maps onto one CLI exit class
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),

    #[error("logarithm near branch cut (rotation angle {0} rad)")]
    BranchCut(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("raster parse error in {path}: {reason}")]
    RasterFormat { path: PathBuf, reason: String },

    #[error("trajectory parse error at line {line}: {reason}")]
    TrajectoryFormat { line: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("scene error: {0}")]
    Scene(String),

    #[error("insufficient static support ({0} static pixels, need 16)")]
    InsufficientStaticSupport(usize),

    #[error("no static pixels")]
    NoStaticPixels,

    #[error("flow provider miss for pair ({0}, {1})")]
    FlowProviderMiss(usize, usize),

    #[error("disconnected pose graph: vertex {0} unreachable from anchor")]
    DisconnectedGraph(usize),

    #[error("LM diverged (damping {0:e})")]
    LmDiverged(f64),

    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// 2 = configuration, 3 = data, 4 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Config(_) => 2,
            Error::BranchCut(_) | Error::LmDiverged(_) | Error::DegenerateAlignment(_) | Error::NonPositiveDepth(_) => {
                4
            }
            _ => 3,
        }
    }
}
