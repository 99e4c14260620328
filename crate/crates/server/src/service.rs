use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use marich_core::mathcore::RealMatrix;
use marich_core::models::{load_model, Model};
use marich_core::oracle::{DpConfig, DpMechanism, LabelOracle, TargetHandle};
use marich_core::Error;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::oneshot;

use crate::ServerError;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MAX_BATCH: usize = 256;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub bind: String,
    pub model: PathBuf,
    pub cap: Option<u64>,
    pub dp: Option<DpConfig>,
    /// Serve `/v1/probs`. Meant for evaluation deployments only.
    pub expose_probs: bool,
    pub max_batch: usize,
}

impl ServerConfig {
    pub fn new(bind: impl Into<String>, model: impl Into<PathBuf>) -> Self {
        Self {
            bind: bind.into(),
            model: model.into(),
            cap: None,
            dp: None,
            expose_probs: false,
            max_batch: DEFAULT_MAX_BATCH,
        }
    }
}

/// Shared, read-only apart from the ledger inside the target.
pub struct AppState {
    target: TargetHandle,
    max_batch: usize,
    expose_probs: bool,
}

impl AppState {
    pub fn new(
        model: Model,
        cap: Option<u64>,
        dp: Option<DpConfig>,
        expose_probs: bool,
        max_batch: usize,
    ) -> Result<Self, ServerError> {
        if max_batch == 0 {
            return Err(ServerError::Config("max_batch must be at least 1".into()));
        }
        let mut target = TargetHandle::in_process(model).with_eval_channel(expose_probs);
        if let Some(cap) = cap {
            target = target.with_cap(cap);
        }
        if let Some(dp) = dp {
            target = target.with_dp(dp)?;
        }
        Ok(Self {
            target,
            max_batch,
            expose_probs,
        })
    }

    pub fn from_config(config: &ServerConfig) -> Result<Self, ServerError> {
        let model = load_model(&config.model)?;
        Self::new(
            model,
            config.cap,
            config.dp.clone(),
            config.expose_probs,
            config.max_batch,
        )
    }

    pub fn queries_used(&self) -> u64 {
        self.target.queries_used()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstancesRequest {
    instances: Vec<Vec<f64>>,
}

fn reply(status: StatusCode, mut body: Value) -> Response {
    body["schema_version"] = json!(SCHEMA_VERSION);
    (status, Json(body)).into_response()
}

fn bad_request(code: &str, message: String) -> Response {
    reply(
        StatusCode::BAD_REQUEST,
        json!({"error": code, "message": message}),
    )
}

#[allow(clippy::result_large_err)]
fn parse_instances(state: &AppState, body: &[u8]) -> Result<RealMatrix, Response> {
    let req: InstancesRequest = serde_json::from_slice(body).map_err(|e| {
        let code = if e.is_data() {
            "invalid_request"
        } else {
            "malformed_json"
        };
        reply(
            StatusCode::BAD_REQUEST,
            json!({
                "error": code,
                "message": e.to_string(),
                "line": e.line(),
                "column": e.column(),
            }),
        )
    })?;
    if req.instances.len() > state.max_batch {
        return Err(reply(
            StatusCode::PAYLOAD_TOO_LARGE,
            json!({"error": "batch_too_large", "max_batch": state.max_batch}),
        ));
    }
    let d = state.target.model_spec().input_dim;
    if let Some((i, row)) = req.instances.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(bad_request(
            "invalid_request",
            format!("instance {i} has {} features, model expects {d}", row.len()),
        ));
    }
    if req.instances.is_empty() {
        return Ok(RealMatrix::zeros(0, d));
    }
    RealMatrix::from_rows(&req.instances).map_err(|e| bad_request("invalid_request", e.to_string()))
}

fn core_error(err: Error) -> Response {
    match err {
        Error::BudgetExhausted { used, cap } => reply(
            StatusCode::TOO_MANY_REQUESTS,
            json!({"error": "budget_exhausted", "used": used, "cap": cap}),
        ),
        e @ (Error::InvalidArgument(_) | Error::OutOfRange(_)) => {
            bad_request("invalid_request", e.to_string())
        }
        e => reply(
            StatusCode::INTERNAL_SERVER_ERROR,
            json!({"error": "internal", "message": e.to_string()}),
        ),
    }
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let batch = match parse_instances(&state, &body) {
        Ok(b) => b,
        Err(resp) => return resp,
    };
    match state.target.query_labels(&batch) {
        Ok(labels) => {
            tracing::debug!(n = labels.len(), "predict");
            reply(
                StatusCode::OK,
                json!({"labels": labels, "queries_used": state.target.queries_used()}),
            )
        }
        Err(e) => core_error(e),
    }
}

async fn probs(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    if !state.expose_probs {
        return reply(
            StatusCode::FORBIDDEN,
            json!({"error": "probs_disabled", "message": "start the server with --expose-probs"}),
        );
    }
    let batch = match parse_instances(&state, &body) {
        Ok(b) => b,
        Err(resp) => return resp,
    };
    match state.target.white_box_probs(&batch) {
        Ok(p) => {
            let rows: Vec<&[f64]> = p.iter().map(|v| v.as_slice()).collect();
            reply(StatusCode::OK, json!({"probs": rows}))
        }
        Err(e) => core_error(e),
    }
}

async fn stats(State(state): State<Arc<AppState>>) -> Response {
    let dp = state.target.dp();
    let mechanism = dp.map(|d| d.mechanism).unwrap_or(DpMechanism::None);
    reply(
        StatusCode::OK,
        json!({
            "queries_used": state.target.queries_used(),
            "cap": state.target.cap(),
            "dp_mechanism": mechanism,
            "dp_epsilon": dp.filter(|d| d.mechanism != DpMechanism::None).map(|d| d.epsilon),
            "model_spec": state.target.model_spec(),
            "max_batch": state.max_batch,
            "expose_probs": state.expose_probs,
        }),
    )
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/predict", post(predict))
        .route("/v1/probs", post(probs))
        .route("/v1/stats", get(stats))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub fn serve(config: &ServerConfig) -> Result<(), ServerError> {
    let state = Arc::new(AppState::from_config(config)?);
    let runtime = tokio::runtime::Runtime::new().map_err(|source| ServerError::Bind {
        addr: config.bind.clone(),
        source,
    })?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.bind)
            .await
            .map_err(|source| ServerError::Bind {
                addr: config.bind.clone(),
                source,
            })?;
        let addr = listener.local_addr().map_err(|source| ServerError::Bind {
            addr: config.bind.clone(),
            source,
        })?;
        tracing::info!(%addr, "listening");
        println!("listening on http://{addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|source| ServerError::Runtime { addr, source })
    })
}

/// A server on a background thread; stops when dropped.
pub struct RunningServer {
    addr: SocketAddr,
    state: Arc<AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl RunningServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn queries_used(&self) -> u64 {
        self.state.queries_used()
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `bind` (port 0 picks a free port) and serves on a new thread.
pub fn spawn(state: AppState, bind: &str) -> Result<RunningServer, ServerError> {
    let state = Arc::new(state);
    let std_listener = std::net::TcpListener::bind(bind).map_err(|source| ServerError::Bind {
        addr: bind.to_string(),
        source,
    })?;
    std_listener
        .set_nonblocking(true)
        .map_err(|source| ServerError::Bind {
            addr: bind.to_string(),
            source,
        })?;
    let addr = std_listener
        .local_addr()
        .map_err(|source| ServerError::Bind {
            addr: bind.to_string(),
            source,
        })?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(state.clone());
    let thread = std::thread::spawn(move || {
        let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
        runtime.block_on(async move {
            let listener =
                tokio::net::TcpListener::from_std(std_listener).expect("listener registration");
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(RunningServer {
        addr,
        state,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
