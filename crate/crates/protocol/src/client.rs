//! Blocking inference client with timeout, retries and jittered backoff.

use std::time::{Duration, Instant};

use rand::Rng;

use crate::error::{Attempt, ClientError};
use crate::wire::{decode_response, encode_request, Health, InferRequest, InferResponse, ModelList};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    /// Base URL of the server, e.g. `http://127.0.0.1:8500`.
    pub endpoint: String,
    pub timeout_ms: u64,
    pub retries: u32,
    /// First backoff delay; doubles per retry, with up to 50% jitter added.
    pub backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl ClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            timeout_ms: 2000,
            retries: 2,
            backoff_ms: 50,
            max_backoff_ms: 1000,
        }
    }

    /// Upper bound on the time `infer` can block.
    pub fn worst_case_ms(&self) -> u64 {
        let backoff: u64 = (0..self.retries).map(|k| self.backoff_delay_cap(k)).sum();
        self.timeout_ms * (self.retries as u64 + 1) + backoff
    }

    fn backoff_delay_cap(&self, retry: u32) -> u64 {
        let base = self.backoff_ms.saturating_mul(1 << retry.min(16)).min(self.max_backoff_ms);
        base + base / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutcome {
    pub response: InferResponse,
    /// Wall-clock time of the successful attempt.
    pub round_trip_ms: f64,
    pub attempts: Vec<Attempt>,
}

/// Safe to share between threads; clones share the connection pool.
#[derive(Debug, Clone)]
pub struct InferenceClient {
    config: ClientConfig,
    http: reqwest::blocking::Client,
}

enum Failure {
    Retryable(String),
    Fatal(ClientError),
}

impl InferenceClient {
    pub fn new(config: ClientConfig) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| ClientError::Setup(e.to_string()))?;
        Ok(Self { config, http })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.endpoint, path)
    }

    fn once(&self, body: &[u8]) -> Result<InferResponse, Failure> {
        let resp = self
            .http
            .post(self.url("/v1/infer"))
            .header("content-type", "application/json")
            .body(body.to_vec())
            .send()
            .map_err(|e| {
                Failure::Retryable(if e.is_timeout() {
                    format!("timeout after {} ms", self.config.timeout_ms)
                } else {
                    format!("transport: {e}")
                })
            })?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| Failure::Retryable(format!("reading body: {e}")))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Failure::Retryable(format!("status {}", status.as_u16())));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(ClientError::Request {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&bytes).into_owned(),
            }));
        }
        decode_response(&bytes).map_err(|e| Failure::Fatal(e.into()))
    }

    /// Send `req`, retrying timeouts, transport errors and 5xx responses.
    pub fn infer(&self, req: &InferRequest) -> Result<InferOutcome, ClientError> {
        let body = encode_request(req);
        let mut attempts = Vec::new();
        let mut rng = rand::rng();
        for k in 0..=self.config.retries {
            if k > 0 {
                let cap = self.config.backoff_delay_cap(k - 1);
                let base = cap * 2 / 3;
                let delay = if cap > base { rng.random_range(base..=cap) } else { base };
                std::thread::sleep(Duration::from_millis(delay));
            }
            let start = Instant::now();
            let result = self.once(&body);
            let elapsed_ms = start.elapsed().as_secs_f64() * 1000.0;
            match result {
                Ok(response) => {
                    attempts.push(Attempt {
                        number: k + 1,
                        elapsed_ms,
                        outcome: "ok".into(),
                    });
                    return Ok(InferOutcome {
                        response,
                        round_trip_ms: elapsed_ms,
                        attempts,
                    });
                }
                Err(Failure::Retryable(msg)) => attempts.push(Attempt {
                    number: k + 1,
                    elapsed_ms,
                    outcome: msg,
                }),
                Err(Failure::Fatal(e)) => return Err(e),
            }
        }
        Err(ClientError::Transport { attempts })
    }

    fn get_json<T: serde::de::DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let resp = self.http.get(self.url(path)).send().map_err(|e| ClientError::Transport {
            attempts: vec![Attempt {
                number: 1,
                elapsed_ms: 0.0,
                outcome: format!("transport: {e}"),
            }],
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ClientError::Request {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        resp.json().map_err(|e| ClientError::Setup(format!("bad {path} body: {e}")))
    }

    pub fn health(&self) -> Result<Health, ClientError> {
        self.get_json("/v1/health")
    }

    pub fn models(&self) -> Result<ModelList, ClientError> {
        self.get_json("/v1/models")
    }
}
