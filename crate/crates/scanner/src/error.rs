use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("invalid tile plan: {0}")]
    Plan(String),
    #[error("detector unavailable: {0}")]
    DetectorUnavailable(String),
    #[error("catalog write failed: {0}")]
    Sink(String),
    #[error("invalid scan configuration: {0}")]
    Config(String),
    #[error("tile {tile} cannot move backward from {from:?} to {to:?}")]
    Transition {
        tile: String,
        from: crate::job::TileState,
        to: crate::job::TileState,
    },
}
