//! HTTP prediction service for a trained target, and the matching client.
//!
//! Wire schema (every response carries `schema_version`):
//!
//! | route            | request                     | response                                  |
//! |------------------|-----------------------------|-------------------------------------------|
//! | `POST /v1/predict` | `{"instances": [[f64]]}`  | `{"labels": [u32], "queries_used": u64}`  |
//! | `POST /v1/probs`   | `{"instances": [[f64]]}`  | `{"probs": [[f64]]}` (only with `expose_probs`) |
//! | `GET /v1/stats`    |                           | `{"queries_used", "cap", "dp_mechanism", "model_spec", ...}` |
//!
//! Errors are `{"error": <code>, ...}` with codes `batch_too_large` (413),
//! `budget_exhausted` (429), `probs_disabled` (403), `malformed_json` and
//! `invalid_request` (400).

mod client;
mod error;
mod service;

pub use client::{RemoteTarget, MAX_ATTEMPTS};
pub use error::ServerError;
pub use service::{
    router, serve, spawn, AppState, RunningServer, ServerConfig, DEFAULT_MAX_BATCH, SCHEMA_VERSION,
};
