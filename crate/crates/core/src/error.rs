use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "degenerate denominator: |y| = {magnitude:.3e} at antenna {antenna}, packet {packet}, \
         subcarrier {subcarrier} (floor {floor:.3e})"
    )]
    DegenerateDenominator {
        antenna: usize,
        packet: usize,
        subcarrier: usize,
        magnitude: f64,
        floor: f64,
    },

    #[error("basis vector vanishes at candidate {candidate} (norm {norm:.3e})")]
    ZeroBasis { candidate: f64, norm: f64 },

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("found {found} local maxima but {wanted} were requested")]
    InsufficientPeaks { found: usize, wanted: usize },

    #[error("ill-conditioned {context} (condition number {condition:.3e})")]
    IllConditioned {
        context: &'static str,
        condition: f64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
