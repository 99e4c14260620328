//! The black-box target: a label-only query channel with an exact ledger.
//!
//! The attack loop only ever sees `&dyn LabelOracle`, which returns labels
//! and the current query count. Probability vectors are reachable through
//! [`TargetHandle::white_box_probs`] alone, and only when the evaluation
//! channel was enabled at construction.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{argmax, argmax_label, ProbVector, RealMatrix};
use crate::models::{Model, ModelSpec};

/// L1 diameter of the probability simplex.
pub const DEFAULT_SENSITIVITY: f64 = 2.0;

/// What the attack is allowed to see of a target.
pub trait LabelOracle: Send + Sync {
    /// Labels for every row of `batch`; the ledger grows by `batch.rows()`.
    fn query_labels(&self, batch: &RealMatrix) -> Result<Vec<usize>>;
    fn queries_used(&self) -> u64;
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
}

/// A target served elsewhere (for example over HTTP).
pub trait RemoteBackend: Send + Sync {
    fn model_spec(&self) -> &ModelSpec;
    fn predict(&self, batch: &RealMatrix) -> Result<Vec<usize>>;
    /// Raw probabilities, if the remote exposes them.
    fn probs(&self, batch: &RealMatrix) -> Result<Vec<ProbVector>>;
    fn describe(&self) -> String;
}

pub enum Backend {
    InProcess(Model),
    Remote(Box<dyn RemoteBackend>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DpMechanism {
    #[default]
    None,
    LaplaceOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    #[serde(default)]
    pub mechanism: DpMechanism,
    pub epsilon: f64,
    #[serde(default = "default_sensitivity")]
    pub sensitivity: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

fn default_sensitivity() -> f64 {
    DEFAULT_SENSITIVITY
}

impl DpConfig {
    pub fn laplace(epsilon: f64, noise_seed: u64) -> Self {
        Self {
            mechanism: DpMechanism::LaplaceOutput,
            epsilon,
            sensitivity: DEFAULT_SENSITIVITY,
            noise_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mechanism == DpMechanism::None {
            return Ok(());
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!(
                "dp epsilon must be finite and positive, got {}",
                self.epsilon
            )));
        }
        if !(self.sensitivity > 0.0) || !self.sensitivity.is_finite() {
            return Err(Error::invalid(format!(
                "dp sensitivity must be finite and positive, got {}",
                self.sensitivity
            )));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.sensitivity / self.epsilon
    }
}

/// Draw from `Lap(0, scale)` by inverse CDF.
fn laplace_sample(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        if u.abs() < 0.5 {
            return -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

/// Adds i.i.d. `Lap(0, Δ/ε)` noise to every coordinate and returns the
/// argmax of the noisy vector. The noise is a pure function of
/// `(noise_seed, draw_index)`.
pub fn laplace_perturbed_label(probs: &ProbVector, dp: &DpConfig, draw_index: u64) -> usize {
    if dp.mechanism == DpMechanism::None {
        return argmax_label(probs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dp.noise_seed);
    rng.set_stream(draw_index);
    let scale = dp.scale();
    let noisy: Vec<f64> = probs
        .as_slice()
        .iter()
        .map(|&p| p + laplace_sample(&mut rng, scale))
        .collect();
    argmax(&noisy)
}

pub struct TargetHandle {
    backend: Backend,
    spec: ModelSpec,
    ledger: AtomicU64,
    cap: Option<u64>,
    dp: Option<DpConfig>,
    eval_channel_enabled: bool,
}

impl std::fmt::Debug for TargetHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TargetHandle")
            .field("backend", &self.backend_name())
            .field("ledger", &self.queries_used())
            .field("cap", &self.cap)
            .field("dp", &self.dp)
            .field("eval_channel_enabled", &self.eval_channel_enabled)
            .finish()
    }
}

impl TargetHandle {
    pub fn in_process(model: Model) -> Self {
        Self {
            spec: model.spec().clone(),
            backend: Backend::InProcess(model),
            ledger: AtomicU64::new(0),
            cap: None,
            dp: None,
            eval_channel_enabled: false,
        }
    }

    pub fn remote(backend: Box<dyn RemoteBackend>) -> Self {
        Self {
            spec: backend.model_spec().clone(),
            backend: Backend::Remote(backend),
            ledger: AtomicU64::new(0),
            cap: None,
            dp: None,
            eval_channel_enabled: false,
        }
    }

    pub fn with_cap(mut self, cap: u64) -> Self {
        self.cap = Some(cap);
        self
    }

    /// Output perturbation is applied locally for in-process targets; a
    /// remote target applies its own defense server-side.
    pub fn with_dp(mut self, dp: DpConfig) -> Result<Self> {
        dp.validate()?;
        if matches!(self.backend, Backend::Remote(_)) && dp.mechanism != DpMechanism::None {
            return Err(Error::invalid(
                "output perturbation for a remote target is configured on the server",
            ));
        }
        self.dp = Some(dp);
        Ok(self)
    }

    pub fn with_eval_channel(mut self, enabled: bool) -> Self {
        self.eval_channel_enabled = enabled;
        self
    }

    pub fn cap(&self) -> Option<u64> {
        self.cap
    }

    pub fn dp(&self) -> Option<&DpConfig> {
        self.dp.as_ref()
    }

    pub fn model_spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn backend_name(&self) -> String {
        match &self.backend {
            Backend::InProcess(_) => "in-process".into(),
            Backend::Remote(r) => r.describe(),
        }
    }

    /// Atomically reserves `n` queries; returns the ledger value before the
    /// reservation.
    fn reserve(&self, n: u64) -> Result<u64> {
        let mut current = self.ledger.load(Ordering::SeqCst);
        loop {
            if let Some(cap) = self.cap {
                if current + n > cap {
                    return Err(Error::BudgetExhausted { used: current, cap });
                }
            }
            match self.ledger.compare_exchange_weak(
                current,
                current + n,
                Ordering::SeqCst,
                Ordering::SeqCst,
            ) {
                Ok(prev) => return Ok(prev),
                Err(actual) => current = actual,
            }
        }
    }

    fn answer(&self, batch: &RealMatrix, first_draw: u64) -> Result<Vec<usize>> {
        match &self.backend {
            Backend::InProcess(model) => {
                let probs = model.forward_batch(batch)?;
                Ok(match &self.dp {
                    Some(dp) if dp.mechanism != DpMechanism::None => probs
                        .iter()
                        .enumerate()
                        .map(|(i, p)| laplace_perturbed_label(p, dp, first_draw + i as u64))
                        .collect(),
                    _ => probs.iter().map(argmax_label).collect(),
                })
            }
            Backend::Remote(remote) => remote.predict(batch),
        }
    }

    /// Raw probabilities for evaluation. Never touches the ledger.
    pub fn white_box_probs(&self, batch: &RealMatrix) -> Result<Vec<ProbVector>> {
        if !self.eval_channel_enabled {
            return Err(Error::Capability(
                "white-box evaluation channel is disabled for this target".into(),
            ));
        }
        match &self.backend {
            Backend::InProcess(model) => model.forward_batch(batch),
            Backend::Remote(remote) => remote.probs(batch),
        }
    }
}

impl LabelOracle for TargetHandle {
    fn query_labels(&self, batch: &RealMatrix) -> Result<Vec<usize>> {
        if batch.rows() > 0 && batch.cols() != self.spec.input_dim {
            return Err(Error::invalid(format!(
                "query batch has {} columns, target expects {}",
                batch.cols(),
                self.spec.input_dim
            )));
        }
        let n = batch.rows() as u64;
        let start = self.reserve(n)?;
        match self.answer(batch, start) {
            Ok(labels) => Ok(labels),
            Err(e) => {
                self.ledger.fetch_sub(n, Ordering::SeqCst);
                Err(e)
            }
        }
    }

    fn queries_used(&self) -> u64 {
        self.ledger.load(Ordering::SeqCst)
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn input_dim(&self) -> usize {
        self.spec.input_dim
    }
}
