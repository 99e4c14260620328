//! Query-selection strategies over unspent pool indices.
//!
//! The three cascade stages (entropy, entropy-gradient, loss) and the
//! baselines (random, least-confidence, margin, entropy, k-center) all
//! return a [`Selection`] of pool indices. Every ordering tie is broken
//! toward the lower pool index.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::data::PoolView;
use crate::error::{Error, Result};
use crate::mathcore::{self, squared_distance, RealMatrix};
use crate::models::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub strategy: String,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn empty(strategy: &str) -> Self {
        Self {
            indices: Vec::new(),
            scores: Vec::new(),
            strategy: strategy.into(),
        }
    }
}

/// How LossSampling scores a candidate against the high-loss anchors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossScoring {
    /// Squared distance to the nearest anchor.
    #[default]
    MinDistance,
    /// Sum of squared distances to all anchors.
    Summed,
}

fn check_budget(budget: usize) -> Result<()> {
    if budget == 0 {
        return Err(Error::invalid("selection budget must be at least 1"));
    }
    Ok(())
}

/// Orders `(index, score)` pairs by score (descending when `highest`),
/// then by pool index, and keeps the first `budget`.
fn rank(pairs: Vec<(usize, f64)>, budget: usize, highest: bool, strategy: &str) -> Selection {
    let mut pairs = pairs;
    pairs.sort_by(|a, b| {
        let by_score = if highest {
            b.1.total_cmp(&a.1)
        } else {
            a.1.total_cmp(&b.1)
        };
        by_score.then(a.0.cmp(&b.0))
    });
    pairs.truncate(budget);
    let (indices, scores) = pairs.into_iter().unzip();
    Selection {
        indices,
        scores,
        strategy: strategy.into(),
    }
}

fn probs_of(model: &Model, view: &PoolView<'_>) -> Result<Vec<mathcore::ProbVector>> {
    view.indices()
        .iter()
        .map(|&i| model.forward(view.row(i)))
        .collect()
}

/// The `budget` candidates with the highest predictive entropy.
pub fn entropy_sampling(model: &Model, view: &PoolView<'_>, budget: usize) -> Result<Selection> {
    check_budget(budget)?;
    let probs = probs_of(model, view)?;
    let pairs = view
        .indices()
        .iter()
        .zip(&probs)
        .map(|(&i, p)| (i, mathcore::entropy(p)))
        .collect();
    Ok(rank(pairs, budget, true, "entropy"))
}

/// Least confidence: highest `1 − max_c p_c`.
pub fn least_confidence_sampling(
    model: &Model,
    view: &PoolView<'_>,
    budget: usize,
) -> Result<Selection> {
    check_budget(budget)?;
    let probs = probs_of(model, view)?;
    let pairs = view
        .indices()
        .iter()
        .zip(&probs)
        .map(|(&i, p)| (i, 1.0 - p.as_slice().iter().copied().fold(0.0, f64::max)))
        .collect();
    Ok(rank(pairs, budget, true, "least-confidence"))
}

fn top_two_gap(p: &[f64]) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    a - b
}

/// Margin: smallest gap between the two most probable classes.
pub fn margin_sampling(model: &Model, view: &PoolView<'_>, budget: usize) -> Result<Selection> {
    check_budget(budget)?;
    let probs = probs_of(model, view)?;
    let pairs = view
        .indices()
        .iter()
        .zip(&probs)
        .map(|(&i, p)| (i, top_two_gap(p.as_slice())))
        .collect();
    Ok(rank(pairs, budget, false, "margin"))
}

/// Uniform sampling without replacement. Scores record the draw order.
pub fn random_sampling(view: &PoolView<'_>, budget: usize, seed: u64) -> Result<Selection> {
    check_budget(budget)?;
    let n = view.len();
    if n == 0 {
        return Ok(Selection::empty("random"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, n, budget.min(n));
    let indices: Vec<usize> = picks.iter().map(|j| view.indices()[j]).collect();
    let scores = (0..indices.len()).map(|r| r as f64).collect();
    Ok(Selection {
        indices,
        scores,
        strategy: "random".into(),
    })
}

/// Per-candidate gradient-embedding objective: `Σ_j ‖g − c_j‖²`.
pub fn gradient_objective(gradient: &[f64], centers: &RealMatrix) -> f64 {
    centers
        .row_iter()
        .map(|c| squared_distance(gradient, c))
        .sum()
}

/// Embeds each candidate by `∇ₓ H(f(x))`, clusters the embeddings into
/// `k_classes` groups and keeps the `budget` candidates whose embeddings
/// are closest, in summed squared distance, to all centers.
///
/// The objective is separable over points, so ranking by per-point score
/// is its exact minimizer. With `stratified`, candidates are instead drawn
/// round-robin across clusters, nearest-to-own-center first.
pub fn entropy_gradient_sampling(
    model: &Model,
    candidates: &PoolView<'_>,
    budget: usize,
    k_classes: usize,
    seed: u64,
    stratified: bool,
) -> Result<Selection> {
    check_budget(budget)?;
    let n = candidates.len();
    if n == 0 {
        return Ok(Selection::empty("entropy-gradient"));
    }
    let rows = candidates
        .indices()
        .iter()
        .map(|&i| model.input_entropy_gradient(candidates.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let grads = RealMatrix::from_rows(&rows)?;
    let k = k_classes.clamp(1, n);
    let clusters = kmeans(&grads, k, DEFAULT_MAX_ITERS, DEFAULT_TOL, seed)?;
    let scores: Vec<f64> = grads
        .row_iter()
        .map(|g| gradient_objective(g, &clusters.centers))
        .collect();

    if budget >= n {
        return Ok(Selection {
            indices: candidates.indices().to_vec(),
            scores,
            strategy: "entropy-gradient".into(),
        });
    }
    if !stratified {
        let pairs = candidates.indices().iter().copied().zip(scores).collect();
        return Ok(rank(pairs, budget, false, "entropy-gradient"));
    }

    // Per-cluster queues ordered by distance to the cluster's own center.
    let mut queues: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); k];
    for (pos, (&idx, g)) in candidates
        .indices()
        .iter()
        .zip(grads.row_iter())
        .enumerate()
    {
        let c = clusters.assignments[pos];
        let own = squared_distance(g, clusters.centers.row(c));
        queues[c].push((idx, own, scores[pos]));
    }
    for q in &mut queues {
        q.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        q.reverse(); // pop from the back
    }
    let mut indices = Vec::with_capacity(budget);
    let mut picked_scores = Vec::with_capacity(budget);
    while indices.len() < budget {
        for q in queues.iter_mut() {
            if indices.len() == budget {
                break;
            }
            if let Some((idx, _, s)) = q.pop() {
                indices.push(idx);
                picked_scores.push(s);
            }
        }
    }
    Ok(Selection {
        indices,
        scores: picked_scores,
        strategy: "entropy-gradient-stratified".into(),
    })
}

/// Keeps the `budget` candidates closest to the `k_classes` previously
/// answered queries on which the current model has the highest loss.
///
/// With no answered queries the first `budget` candidates are returned.
pub fn loss_sampling(
    model: &Model,
    candidates: &PoolView<'_>,
    history_x: &RealMatrix,
    history_y: &[usize],
    budget: usize,
    k_classes: usize,
    scoring: LossScoring,
) -> Result<Selection> {
    check_budget(budget)?;
    if history_x.rows() != history_y.len() {
        return Err(Error::invalid(
            "training history features and labels disagree",
        ));
    }
    if history_y.is_empty() {
        let indices: Vec<usize> = candidates.indices().iter().take(budget).copied().collect();
        return Ok(Selection {
            scores: vec![0.0; indices.len()],
            indices,
            strategy: "loss".into(),
        });
    }
    let losses = history_x
        .row_iter()
        .zip(history_y)
        .map(|(x, &y)| model.per_example_loss(x, y))
        .collect::<Result<Vec<_>>>()?;
    let anchors = mismatch_anchors(&losses, k_classes.max(1));
    let pairs = candidates
        .indices()
        .iter()
        .map(|&i| {
            let x = candidates.row(i);
            let dists = anchors
                .iter()
                .map(|&a| squared_distance(x, history_x.row(a)));
            let score = match scoring {
                LossScoring::MinDistance => dists.fold(f64::INFINITY, f64::min),
                LossScoring::Summed => dists.sum(),
            };
            (i, score)
        })
        .collect();
    Ok(rank(pairs, budget, false, "loss"))
}

/// Positions of the `k` highest losses (ties to the earlier position).
pub fn mismatch_anchors(losses: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Greedy farthest-first (k-center) selection in embedding space.
///
/// Embeddings are penultimate-layer activations for MLPs and raw inputs
/// for softmax regression. `already_selected` seeds the covered set; if it
/// is empty the first pick is the lowest candidate index.
pub fn kcenter_sampling(
    model: &Model,
    view: &PoolView<'_>,
    already_selected: &RealMatrix,
    budget: usize,
) -> Result<Selection> {
    check_budget(budget)?;
    let emb = view
        .indices()
        .iter()
        .map(|&i| model.embedding(view.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let seeds = already_selected
        .row_iter()
        .map(|x| model.embedding(x))
        .collect::<Result<Vec<_>>>()?;
    let mut min_d: Vec<f64> = emb
        .iter()
        .map(|e| {
            seeds
                .iter()
                .map(|s| squared_distance(e, s))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut taken = vec![false; emb.len()];
    let mut indices = Vec::new();
    let mut scores = Vec::new();
    while indices.len() < budget.min(emb.len()) {
        let mut best: Option<usize> = None;
        for j in 0..emb.len() {
            if taken[j] {
                continue;
            }
            best = match best {
                None => Some(j),
                Some(b) => match min_d[j].total_cmp(&min_d[b]) {
                    Ordering::Greater => Some(j),
                    Ordering::Equal if view.indices()[j] < view.indices()[b] => Some(j),
                    _ => Some(b),
                },
            };
        }
        let j = best.expect("an untaken candidate remains");
        taken[j] = true;
        indices.push(view.indices()[j]);
        scores.push(min_d[j].sqrt());
        for (t, e) in emb.iter().enumerate() {
            if !taken[t] {
                min_d[t] = min_d[t].min(squared_distance(e, &emb[j]));
            }
        }
    }
    Ok(Selection {
        indices,
        scores,
        strategy: "k-center".into(),
    })
}
