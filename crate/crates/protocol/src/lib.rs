//! The inference boundary between the scanner and a detector: JSON wire
//! format `v1`, a retrying HTTP client and two reference servers.

pub mod client;
pub mod error;
pub mod server;
pub mod wire;

pub use client::{ClientConfig, InferOutcome, InferenceClient};
pub use error::{Attempt, ClientError, ProtocolError, ServerError};
pub use server::{spawn_router, spawn_server, Backend, ReplayBackend, RuleBackend, ServerControl, ServerHandle};
pub use wire::{
    decode_png, decode_request, decode_response, encode_png, encode_request, encode_response, Health, InferRequest,
    InferResponse, ModelInfo, ModelList, WireDetection, PROTOCOL_VERSION,
};

/// Tile identifier used across the scanner, servers and catalog.
pub fn tile_id(row: usize, col: usize) -> String {
    format!("r{row:03}_c{col:03}")
}
