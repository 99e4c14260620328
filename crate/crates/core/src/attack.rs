//! The adaptive extraction loop.
//!
//! Phase 1 spends `n0` uniformly random queries and trains the extracted
//! model for `epochs` epochs. Each of the `rounds` adaptive rounds then
//! narrows the unspent pool through entropy → entropy-gradient → loss
//! sampling (or a single baseline sampler drawing the same final count),
//! queries the target for labels, appends them to the accumulated training
//! set and keeps training the same model on everything received so far.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::QueryPool;
use crate::error::{Error, Result};
use crate::mathcore::RealMatrix;
use crate::models::{init_model, Model, ModelSpec, SgdConfig};
use crate::oracle::LabelOracle;
use crate::samplers::{self, LossScoring, Selection};
use crate::seeds::derive_seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    #[default]
    Marich,
    Random,
    Entropy,
    LeastConfidence,
    Margin,
    KCenter,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 6] = [
        SamplerKind::Marich,
        SamplerKind::Random,
        SamplerKind::Entropy,
        SamplerKind::LeastConfidence,
        SamplerKind::Margin,
        SamplerKind::KCenter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Marich => "marich",
            SamplerKind::Random => "random",
            SamplerKind::Entropy => "entropy",
            SamplerKind::LeastConfidence => "least-confidence",
            SamplerKind::Margin => "margin",
            SamplerKind::KCenter => "k-center",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Initial uniformly random queries.
    pub n0: usize,
    /// Per-round budget at round 0; round `t` schedules `b0 · alphaᵗ`.
    pub b0: f64,
    pub rounds: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub alpha: f64,
    /// Training epochs after every batch of answers.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub sampler: SamplerKind,
    pub stratified_grad: bool,
    pub loss_scoring: LossScoring,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            n0: 300,
            b0: 250.0,
            rounds: 10,
            gamma1: 0.8,
            gamma2: 0.8,
            alpha: 1.02,
            epochs: 10,
            lr: 0.02,
            batch_size: 32,
            seed: 0,
            sampler: SamplerKind::Marich,
            stratified_grad: false,
            loss_scoring: LossScoring::MinDistance,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.n0 < 1 {
            return bad("n0 must be at least 1");
        }
        if !(self.b0 >= 1.0) || !self.b0.is_finite() {
            return bad("b0 must be at least 1");
        }
        for (name, g) in [("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::invalid(format!(
                    "{name} must lie in (0, 1], got {g}"
                )));
            }
        }
        if !(self.alpha >= 1.0) || !self.alpha.is_finite() {
            return bad("alpha must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and non-negative");
        }
        Ok(())
    }

    fn sgd(&self, round: usize) -> SgdConfig {
        SgdConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: derive_seed(self.seed, "train", round as u64),
        }
    }
}

/// Scheduled budget for round `t`: `b0 · alphaᵗ`.
pub fn budget_schedule(b0: f64, alpha: f64, t: usize) -> f64 {
    b0 * alpha.powi(t as i32)
}

/// Selection sizes of the three cascade stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSizes {
    pub entropy: usize,
    pub gradient: usize,
    pub loss: usize,
}

fn floor_at_least_one(v: f64) -> usize {
    // absorb representation error such as 0.8 * 0.8 * 250 = 159.999...
    ((v + 1e-9).floor() as usize).max(1)
}

pub fn stage_sizes(budget: f64, gamma1: f64, gamma2: f64) -> StageSizes {
    StageSizes {
        entropy: floor_at_least_one(budget),
        gradient: floor_at_least_one(gamma1 * budget),
        loss: floor_at_least_one(gamma1 * gamma2 * budget),
    }
}

/// Metrics captured after each training phase, when an observer is set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub accuracy: Option<f64>,
    pub agreement: Option<f64>,
    pub mean_kl: Option<f64>,
}

/// Computes [`RoundMetrics`] for the model after each round. Implemented by
/// the evaluation layer; the attack never inspects the target through it.
pub trait RoundObserver {
    fn snapshot(&self, model: &Model) -> Result<RoundMetrics>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialRecord {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub queries: usize,
    pub metrics: Option<RoundMetrics>,
    #[serde(skip)]
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub scheduled_budget: f64,
    pub stage_sizes: StageSizes,
    /// Pool indices kept at each stage; baselines fill `selected` only.
    pub entropy_indices: Vec<usize>,
    pub gradient_indices: Vec<usize>,
    pub selected: Vec<usize>,
    pub labels: Vec<usize>,
    pub queries: usize,
    pub cumulative_queries: usize,
    pub metrics: Option<RoundMetrics>,
    #[serde(skip)]
    pub elapsed_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackStatus {
    Completed,
    PoolExhausted,
    BudgetExhausted,
}

impl std::fmt::Display for AttackStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackStatus::Completed => "completed",
            AttackStatus::PoolExhausted => "pool-exhausted",
            AttackStatus::BudgetExhausted => "budget-exhausted",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub config: AttackConfig,
    pub extract_spec: ModelSpec,
    pub status: AttackStatus,
    pub initial: InitialRecord,
    pub rounds: Vec<RoundRecord>,
    pub total_queries: usize,
}

pub const TRACE_CSV_HEADER: [&str; 7] = [
    "t",
    "B_t",
    "queries",
    "cumulative",
    "accuracy",
    "agreement",
    "mean_kl",
];

impl AttackTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per round; row `t = 0` is the random initialization, whose
    /// `B_t` column holds `n0`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let metric = |m: &Option<RoundMetrics>, f: fn(&RoundMetrics) -> Option<f64>| {
            opt(m.as_ref().and_then(f))
        };
        let mut out = TRACE_CSV_HEADER.join(",");
        out.push('\n');
        let init = &self.initial;
        out.push_str(&format!(
            "0,{},{},{},{},{},{}\n",
            self.config.n0,
            init.queries,
            init.queries,
            metric(&init.metrics, |m| m.accuracy),
            metric(&init.metrics, |m| m.agreement),
            metric(&init.metrics, |m| m.mean_kl),
        ));
        for r in &self.rounds {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.round,
                r.scheduled_budget,
                r.queries,
                r.cumulative_queries,
                metric(&r.metrics, |m| m.accuracy),
                metric(&r.metrics, |m| m.agreement),
                metric(&r.metrics, |m| m.mean_kl),
            ));
        }
        out
    }

    /// Wall-clock milliseconds: initialization first, then each round.
    pub fn timings_ms(&self) -> Vec<f64> {
        std::iter::once(self.initial.elapsed_ms)
            .chain(self.rounds.iter().map(|r| r.elapsed_ms))
            .collect()
    }

    pub fn final_metrics(&self) -> Option<&RoundMetrics> {
        self.rounds
            .last()
            .map(|r| r.metrics.as_ref())
            .unwrap_or(self.initial.metrics.as_ref())
    }
}

/// Runs the full cascade regardless of `config.sampler`.
pub fn marich_attack(
    target: &dyn LabelOracle,
    pool: &mut QueryPool,
    extract_spec: &ModelSpec,
    config: &AttackConfig,
    observer: Option<&dyn RoundObserver>,
) -> Result<(Model, AttackTrace)> {
    let cfg = AttackConfig {
        sampler: SamplerKind::Marich,
        ..config.clone()
    };
    run_attack(target, pool, extract_spec, &cfg, observer)
}

/// Same loop with one baseline sampler drawing `⌊γ₁γ₂B_t⌋` per round.
pub fn baseline_attack(
    target: &dyn LabelOracle,
    pool: &mut QueryPool,
    extract_spec: &ModelSpec,
    config: &AttackConfig,
    observer: Option<&dyn RoundObserver>,
) -> Result<(Model, AttackTrace)> {
    if config.sampler == SamplerKind::Marich {
        return Err(Error::invalid("baseline_attack needs a baseline sampler"));
    }
    run_attack(target, pool, extract_spec, config, observer)
}

/// Dispatches on `config.sampler`.
pub fn run_attack(
    target: &dyn LabelOracle,
    pool: &mut QueryPool,
    extract_spec: &ModelSpec,
    config: &AttackConfig,
    observer: Option<&dyn RoundObserver>,
) -> Result<(Model, AttackTrace)> {
    config.validate()?;
    extract_spec.validate()?;
    if extract_spec.input_dim != pool.features().cols() {
        return Err(Error::invalid(format!(
            "extracted model takes {} features, pool has {}",
            extract_spec.input_dim,
            pool.features().cols()
        )));
    }
    if extract_spec.input_dim != target.input_dim() {
        return Err(Error::invalid(
            "extracted and target input dimensions differ",
        ));
    }
    if extract_spec.num_classes != target.num_classes() {
        return Err(Error::invalid(format!(
            "extracted model has {} classes, target has {}",
            extract_spec.num_classes,
            target.num_classes()
        )));
    }
    if pool.num_unspent() < config.n0 {
        return Err(Error::invalid(format!(
            "pool has {} unspent points, n0 = {}",
            pool.num_unspent(),
            config.n0
        )));
    }

    let k = extract_spec.num_classes;
    let ledger_start = target.queries_used();
    let mut model = init_model(extract_spec, derive_seed(config.seed, "extract-init", 0))?;
    let snapshot =
        |m: &Model| -> Result<Option<RoundMetrics>> { observer.map(|o| o.snapshot(m)).transpose() };

    // Phase 1
    let started = Instant::now();
    let init_sel =
        samplers::random_sampling(&pool.view(), config.n0, derive_seed(config.seed, "init", 0))?;
    let mut train_x = RealMatrix::zeros(0, pool.features().cols());
    let mut train_y: Vec<usize> = Vec::new();
    let mut trace = AttackTrace {
        config: config.clone(),
        extract_spec: extract_spec.clone(),
        status: AttackStatus::Completed,
        initial: InitialRecord {
            indices: init_sel.indices.clone(),
            labels: Vec::new(),
            queries: 0,
            metrics: None,
            elapsed_ms: 0.0,
        },
        rounds: Vec::new(),
        total_queries: 0,
    };

    let batch = pool.features().select_rows(&init_sel.indices);
    match target.query_labels(&batch) {
        Ok(labels) => {
            pool.mark_spent(&init_sel.indices)?;
            train_x.append_rows(&batch)?;
            train_y.extend_from_slice(&labels);
            model = model.train(&train_x, &train_y, &config.sgd(0))?;
            trace.initial.labels = labels;
            trace.initial.queries = init_sel.len();
            trace.initial.metrics = snapshot(&model)?;
        }
        Err(Error::BudgetExhausted { .. }) => {
            trace.status = AttackStatus::BudgetExhausted;
        }
        Err(e) => return Err(e),
    }
    trace.initial.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    trace.total_queries = trace.initial.queries;

    if trace.status == AttackStatus::Completed {
        for t in 1..=config.rounds {
            let started = Instant::now();
            let budget = budget_schedule(config.b0, config.alpha, t);
            let sizes = stage_sizes(budget, config.gamma1, config.gamma2);
            let view = pool.view();
            if view.is_empty() {
                trace.status = AttackStatus::PoolExhausted;
                break;
            }

            let (entropy_indices, gradient_indices, selected) = match config.sampler {
                SamplerKind::Marich => {
                    let ent = samplers::entropy_sampling(&model, &view, sizes.entropy)?;
                    let grad = samplers::entropy_gradient_sampling(
                        &model,
                        &view.restrict(&ent.indices),
                        sizes.gradient,
                        k,
                        derive_seed(config.seed, "kmeans", t as u64),
                        config.stratified_grad,
                    )?;
                    let loss = samplers::loss_sampling(
                        &model,
                        &view.restrict(&grad.indices),
                        &train_x,
                        &train_y,
                        sizes.loss,
                        k,
                        config.loss_scoring,
                    )?;
                    (ent.indices, grad.indices, loss)
                }
                baseline => {
                    let sel = baseline_select(
                        baseline,
                        &model,
                        &view,
                        &train_x,
                        sizes.loss,
                        config.seed,
                        t,
                    )?;
                    (Vec::new(), Vec::new(), sel)
                }
            };
            drop(view);

            if selected.is_empty() {
                trace.status = AttackStatus::PoolExhausted;
                break;
            }
            let batch = pool.features().select_rows(&selected.indices);
            let labels = match target.query_labels(&batch) {
                Ok(l) => l,
                Err(Error::BudgetExhausted { .. }) => {
                    trace.status = AttackStatus::BudgetExhausted;
                    break;
                }
                Err(e) => return Err(e),
            };
            pool.mark_spent(&selected.indices)?;
            train_x.append_rows(&batch)?;
            train_y.extend_from_slice(&labels);
            model = model.train(&train_x, &train_y, &config.sgd(t))?;

            trace.total_queries += selected.len();
            trace.rounds.push(RoundRecord {
                round: t,
                scheduled_budget: budget,
                stage_sizes: sizes,
                entropy_indices,
                gradient_indices,
                selected: selected.indices,
                labels,
                queries: batch.rows(),
                cumulative_queries: trace.total_queries,
                metrics: snapshot(&model)?,
                elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
    }

    debug_assert_eq!(
        trace.total_queries as u64,
        target.queries_used() - ledger_start
    );
    debug_assert_eq!(trace.total_queries, train_y.len());
    Ok((model, trace))
}

fn baseline_select(
    kind: SamplerKind,
    model: &Model,
    view: &crate::data::PoolView<'_>,
    train_x: &RealMatrix,
    budget: usize,
    seed: u64,
    round: usize,
) -> Result<Selection> {
    match kind {
        SamplerKind::Random => {
            samplers::random_sampling(view, budget, derive_seed(seed, "random", round as u64))
        }
        SamplerKind::Entropy => samplers::entropy_sampling(model, view, budget),
        SamplerKind::LeastConfidence => samplers::least_confidence_sampling(model, view, budget),
        SamplerKind::Margin => samplers::margin_sampling(model, view, budget),
        SamplerKind::KCenter => samplers::kcenter_sampling(model, view, train_x, budget),
        SamplerKind::Marich => unreachable!("cascade handled by the caller"),
    }
}
