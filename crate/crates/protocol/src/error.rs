use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProtocolError {
    #[error("malformed body at line {line}, column {column}: {message}")]
    Malformed { line: usize, column: usize, message: String },
    #[error("unsupported protocol version {0:?}")]
    UnsupportedVersion(String),
    #[error("invalid base64 image: {0}")]
    Base64(String),
    #[error("undecodable image: {0}")]
    Image(String),
    #[error("invalid field: {0}")]
    Invalid(String),
    #[error("detection {index}: {message}")]
    Detection { index: usize, message: String },
}

/// One attempt made by the client.
#[derive(Debug, Clone, PartialEq)]
pub struct Attempt {
    pub number: u32,
    pub elapsed_ms: f64,
    pub outcome: String,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("inference failed after {} attempts: {}", attempts.len(), attempts.last().map(|a| a.outcome.as_str()).unwrap_or("no attempt"))]
    Transport { attempts: Vec<Attempt> },
    #[error("server rejected request with status {status}: {body}")]
    Request { status: u16, body: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("client setup: {0}")]
    Setup(String),
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server runtime: {0}")]
    Runtime(String),
}
