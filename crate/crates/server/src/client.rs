use std::time::Duration;

use marich_core::mathcore::{ProbVector, RealMatrix};
use marich_core::models::ModelSpec;
use marich_core::oracle::RemoteBackend;
use marich_core::{Error, Result};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::{json, Value};

/// Attempts per request before a transport error is reported.
pub const MAX_ATTEMPTS: u32 = 3;
const BACKOFF_START: Duration = Duration::from_millis(100);

#[derive(Deserialize)]
struct Stats {
    queries_used: u64,
    cap: Option<u64>,
    model_spec: ModelSpec,
    max_batch: usize,
    expose_probs: bool,
}

/// Label-only client for a served target.
///
/// Batches larger than the server's `max_batch` are sent in chunks. Before a
/// multi-chunk batch the client checks the remaining budget, so a capped
/// server does not answer some chunks of a batch it will later refuse.
pub struct RemoteTarget {
    base: String,
    client: Client,
    spec: ModelSpec,
    max_batch: usize,
    expose_probs: bool,
}

impl RemoteTarget {
    pub fn connect(url: &str) -> Result<Self> {
        let client = Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| Error::Transport {
                message: e.to_string(),
                attempts: 0,
            })?;
        let base = url.trim_end_matches('/').to_string();
        let mut me = Self {
            base,
            client,
            spec: ModelSpec::softmax_regression(1, 2),
            max_batch: 1,
            expose_probs: false,
        };
        let stats = me.stats()?;
        stats.model_spec.validate()?;
        me.spec = stats.model_spec;
        me.max_batch = stats.max_batch.max(1);
        me.expose_probs = stats.expose_probs;
        Ok(me)
    }

    /// Whether the server answers `/v1/probs`.
    pub fn exposes_probs(&self) -> bool {
        self.expose_probs
    }

    pub fn url(&self) -> &str {
        &self.base
    }

    /// Server-side ledger.
    pub fn queries_used(&self) -> Result<u64> {
        Ok(self.stats()?.queries_used)
    }

    fn stats(&self) -> Result<Stats> {
        let v = self.send(|c| c.get(format!("{}/v1/stats", self.base)))?;
        serde_json::from_value(v).map_err(|e| Error::Transport {
            message: format!("unexpected /v1/stats body: {e}"),
            attempts: 1,
        })
    }

    fn post(&self, route: &str, batch: &RealMatrix) -> Result<Value> {
        let rows: Vec<&[f64]> = batch.row_iter().collect();
        let body = serde_json::to_vec(&json!({ "instances": rows }))?;
        self.send(|c| {
            c.post(format!("{}{route}", self.base))
                .header("content-type", "application/json")
                .body(body.clone())
        })
    }

    /// Retries connection failures and 5xx responses with doubling backoff.
    fn send(&self, build: impl Fn(&Client) -> reqwest::blocking::RequestBuilder) -> Result<Value> {
        let mut delay = BACKOFF_START;
        let mut last = String::new();
        for attempt in 1..=MAX_ATTEMPTS {
            match build(&self.client).send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    let body: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
                    if status.is_success() {
                        return Ok(body);
                    }
                    if let Some(e) = client_error(status, &body) {
                        return Err(e);
                    }
                    last = format!("HTTP {status}: {text}");
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < MAX_ATTEMPTS {
                tracing::warn!(attempt, error = %last, "request failed, retrying");
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(Error::Transport {
            message: last,
            attempts: MAX_ATTEMPTS,
        })
    }

    fn chunks(&self, batch: &RealMatrix) -> Vec<RealMatrix> {
        let idx: Vec<usize> = (0..batch.rows()).collect();
        idx.chunks(self.max_batch)
            .map(|c| batch.select_rows(c))
            .collect()
    }
}

/// Non-retryable statuses, mapped onto core errors.
fn client_error(status: StatusCode, body: &Value) -> Option<Error> {
    let code = body["error"].as_str().unwrap_or("");
    match status {
        StatusCode::TOO_MANY_REQUESTS => Some(Error::BudgetExhausted {
            used: body["used"].as_u64().unwrap_or(0),
            cap: body["cap"].as_u64().unwrap_or(0),
        }),
        StatusCode::FORBIDDEN => Some(Error::Capability(
            "server does not expose probabilities; restart it with --expose-probs".into(),
        )),
        s if s.is_client_error() => Some(Error::InvalidArgument(format!(
            "server rejected request ({status}, {code}): {}",
            body["message"].as_str().unwrap_or("")
        ))),
        _ => None,
    }
}

fn field<T: serde::de::DeserializeOwned>(body: &mut Value, name: &str) -> Result<T> {
    serde_json::from_value(body[name].take()).map_err(|e| Error::Transport {
        message: format!("bad `{name}` in response: {e}"),
        attempts: 1,
    })
}

impl RemoteBackend for RemoteTarget {
    fn model_spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn predict(&self, batch: &RealMatrix) -> Result<Vec<usize>> {
        if batch.rows() > self.max_batch {
            let s = self.stats()?;
            if let Some(cap) = s.cap {
                if s.queries_used + batch.rows() as u64 > cap {
                    return Err(Error::BudgetExhausted {
                        used: s.queries_used,
                        cap,
                    });
                }
            }
        }
        let mut labels = Vec::with_capacity(batch.rows());
        for chunk in self.chunks(batch) {
            let mut body = self.post("/v1/predict", &chunk)?;
            let got: Vec<usize> = field(&mut body, "labels")?;
            if got.len() != chunk.rows() {
                return Err(Error::Transport {
                    message: format!("asked for {} labels, got {}", chunk.rows(), got.len()),
                    attempts: 1,
                });
            }
            labels.extend(got);
        }
        Ok(labels)
    }

    fn probs(&self, batch: &RealMatrix) -> Result<Vec<ProbVector>> {
        let mut out = Vec::with_capacity(batch.rows());
        for chunk in self.chunks(batch) {
            let mut body = self.post("/v1/probs", &chunk)?;
            let rows: Vec<Vec<f64>> = field(&mut body, "probs")?;
            for r in rows {
                out.push(ProbVector::new(r)?);
            }
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        format!("remote {}", self.base)
    }
}
