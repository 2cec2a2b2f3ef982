use thiserror::Error;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("invalid chip spec: {0}")]
    Spec(String),
    #[error("could only place {placed} of {requested} flakes without overlap")]
    TooDense { placed: usize, requested: usize },
    #[error("invalid optics: {0}")]
    Optics(String),
    #[error("stage target ({x}, {y}) µm is outside the travel limits")]
    Motion { x: f64, y: f64 },
    #[error("invalid rule parameters: {0}")]
    Params(String),
}
