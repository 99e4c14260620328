//! Fidelity metrics and the loss-threshold membership-inference attack.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{RoundMetrics, RoundObserver};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mathcore::{argmax_label, kl_divergence, ProbVector, RealMatrix, PROB_FLOOR};
use crate::models::Model;
use crate::oracle::TargetHandle;
use crate::seeds::derive_seed;

pub use crate::models::parametric_fidelity;

/// Anything that yields probability vectors for evaluation.
pub trait ProbSource {
    fn probs(&self, batch: &RealMatrix) -> Result<Vec<ProbVector>>;

    fn labels(&self, batch: &RealMatrix) -> Result<Vec<usize>> {
        Ok(self.probs(batch)?.iter().map(argmax_label).collect())
    }
}

impl ProbSource for Model {
    fn probs(&self, batch: &RealMatrix) -> Result<Vec<ProbVector>> {
        self.forward_batch(batch)
    }

    fn labels(&self, batch: &RealMatrix) -> Result<Vec<usize>> {
        self.predict_labels(batch)
    }
}

/// Reads through the white-box channel, so the ledger is untouched.
impl ProbSource for TargetHandle {
    fn probs(&self, batch: &RealMatrix) -> Result<Vec<ProbVector>> {
        self.white_box_probs(batch)
    }
}

/// Fraction of argmax predictions equal to the labels.
pub fn accuracy(model: &dyn ProbSource, test: &Dataset) -> Result<f64> {
    let labels = test.labels()?;
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let pred = model.labels(&test.features)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Percentage of points where both argmax labels coincide.
pub fn agreement(a: &dyn ProbSource, b: &dyn ProbSource, set: &RealMatrix) -> Result<f64> {
    if set.rows() == 0 {
        return Err(Error::invalid("agreement over an empty set"));
    }
    let la = a.labels(set)?;
    let lb = b.labels(set)?;
    let same = la.iter().zip(&lb).filter(|(x, y)| x == y).count();
    Ok(100.0 * same as f64 / set.rows() as f64)
}

/// Mean KL(target ‖ extracted) over the rows of `set`.
pub fn kl_fidelity(
    target: &dyn ProbSource,
    extracted: &dyn ProbSource,
    set: &RealMatrix,
) -> Result<f64> {
    if set.rows() == 0 {
        return Err(Error::invalid("KL fidelity over an empty set"));
    }
    let pt = target.probs(set)?;
    let pe = extracted.probs(set)?;
    let mut total = 0.0;
    for (p, q) in pt.iter().zip(&pe) {
        total += kl_divergence(p, q)?;
    }
    Ok(total / set.rows() as f64)
}

/// Held-out membership decisions in a fixed order: members then non-members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiDecisions {
    pub scores: Vec<f64>,
    pub is_member: Vec<bool>,
    pub decisions: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiResult {
    /// Negative per-example loss for every member and non-member.
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
    /// Predict "member" when `score >= threshold`.
    pub threshold: f64,
    pub member_accuracy: f64,
    pub nonmember_accuracy: f64,
    pub overall_accuracy: f64,
    /// (false-positive rate, true-positive rate), from (0,0) to (1,1).
    pub roc: Vec<(f64, f64)>,
    pub auc: f64,
    pub holdout: MiDecisions,
}

fn mi_scores(model: &dyn ProbSource, set: &Dataset) -> Result<Vec<f64>> {
    let labels = set.labels()?;
    let probs = model.probs(&set.features)?;
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let py = *p
                .as_slice()
                .get(y)
                .ok_or_else(|| Error::OutOfRange(format!("label {y} outside {} classes", p.k())))?;
            Ok(py.max(PROB_FLOOR).ln())
        })
        .collect()
}

/// Calibration and holdout indices; depends only on `(n, seed)`.
fn calibration_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let cal = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let holdout = order.split_off(cal);
    (order, holdout)
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

fn best_threshold(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut candidates: Vec<f64> = members.iter().chain(nonmembers).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.push(f64::INFINITY);
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for &t in &candidates {
        let tpr = members.iter().filter(|&&s| s >= t).count() as f64 / members.len() as f64;
        let tnr = nonmembers.iter().filter(|&&s| s < t).count() as f64 / nonmembers.len() as f64;
        let balanced = 0.5 * (tpr + tnr);
        if balanced > best.0 {
            best = (balanced, t);
        }
    }
    best.1
}

/// ROC over every distinct score, thresholds descending.
pub fn roc_curve(members: &[f64], nonmembers: &[f64]) -> Vec<(f64, f64)> {
    let mut thresholds: Vec<f64> = members.iter().chain(nonmembers).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut roc = vec![(0.0, 0.0)];
    for t in thresholds {
        let fpr = nonmembers.iter().filter(|&&s| s >= t).count() as f64 / nonmembers.len() as f64;
        let tpr = members.iter().filter(|&&s| s >= t).count() as f64 / members.len() as f64;
        roc.push((fpr, tpr));
    }
    if roc.last() != Some(&(1.0, 1.0)) {
        roc.push((1.0, 1.0));
    }
    roc
}

pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5)
        .sum()
}

/// Loss-threshold membership inference.
///
/// Each set is split into calibration and holdout parts by a permutation
/// that depends only on its size and `seed`. The threshold maximizes
/// balanced accuracy on the calibration parts; all reported metrics and the
/// ROC use the holdout parts. Both sets need at least two points.
pub fn mi_threshold_attack(
    model: &dyn ProbSource,
    members: &Dataset,
    nonmembers: &Dataset,
    calibration_fraction: f64,
    seed: u64,
) -> Result<MiResult> {
    if !(calibration_fraction > 0.0 && calibration_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "calibration_fraction must lie in (0, 1), got {calibration_fraction}"
        )));
    }
    if members.len() < 2 || nonmembers.len() < 2 {
        return Err(Error::invalid(
            "membership inference needs at least two members and two non-members",
        ));
    }
    let ms = mi_scores(model, members)?;
    let ns = mi_scores(model, nonmembers)?;
    let split_seed = derive_seed(seed, "mi-split", 0);
    let (m_cal, m_hold) = calibration_split(ms.len(), calibration_fraction, split_seed);
    let (n_cal, n_hold) = calibration_split(ns.len(), calibration_fraction, split_seed);

    let threshold = best_threshold(&pick(&ms, &m_cal), &pick(&ns, &n_cal));
    let mh = pick(&ms, &m_hold);
    let nh = pick(&ns, &n_hold);
    let m_ok = mh.iter().filter(|&&s| s >= threshold).count();
    let n_ok = nh.iter().filter(|&&s| s < threshold).count();

    let scores: Vec<f64> = mh.iter().chain(&nh).copied().collect();
    let holdout = MiDecisions {
        decisions: scores.iter().map(|&s| s >= threshold).collect(),
        is_member: std::iter::repeat_n(true, mh.len())
            .chain(std::iter::repeat_n(false, nh.len()))
            .collect(),
        scores,
    };
    let roc = roc_curve(&mh, &nh);
    Ok(MiResult {
        threshold,
        member_accuracy: m_ok as f64 / mh.len() as f64,
        nonmember_accuracy: n_ok as f64 / nh.len() as f64,
        overall_accuracy: (m_ok + n_ok) as f64 / (mh.len() + nh.len()) as f64,
        auc: trapezoid(&roc),
        roc,
        holdout,
        member_scores: ms,
        nonmember_scores: ns,
    })
}

/// Percentage of positions where two decision sequences agree.
pub fn decision_agreement(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "decision sequences differ in length or are empty ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(100.0 * same as f64 / a.len() as f64)
}

pub const MI_AGREEMENT_GRID: usize = 101;

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[pos.min(sorted.len() - 1)]
}

/// Agreement at the calibrated thresholds (percent) and the area under the
/// agreement-vs-quantile curve, both attacks thresholding at the same score
/// quantile on a grid of [`MI_AGREEMENT_GRID`] points over [0, 1].
pub fn mi_agreement(on_target: &MiDecisions, on_extracted: &MiDecisions) -> Result<(f64, f64)> {
    if on_target.is_member != on_extracted.is_member
        || on_target.scores.len() != on_extracted.scores.len()
    {
        return Err(Error::invalid(
            "MI decisions cover different example sequences",
        ));
    }
    let pct = decision_agreement(&on_target.decisions, &on_extracted.decisions)?;
    let sorted = |s: &[f64]| {
        let mut v = s.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (sa, sb) = (sorted(&on_target.scores), sorted(&on_extracted.scores));
    let n = on_target.scores.len() as f64;
    let curve: Vec<(f64, f64)> = (0..MI_AGREEMENT_GRID)
        .map(|i| {
            let q = i as f64 / (MI_AGREEMENT_GRID - 1) as f64;
            let (ta, tb) = (quantile(&sa, q), quantile(&sb, q));
            let same = on_target
                .scores
                .iter()
                .zip(&on_extracted.scores)
                .filter(|(&a, &b)| (a >= ta) == (b >= tb))
                .count();
            (q, same as f64 / n)
        })
        .collect();
    Ok((pct, trapezoid(&curve)))
}

/// One metric value keyed by experiment and round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub round: Option<usize>,
    pub metric: String,
    pub value: f64,
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("experiment,round,metric,value\n");
    for r in rows {
        let round = r.round.map(|t| t.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.experiment, round, r.metric, r.value
        ));
    }
    out
}

/// Per-round snapshots for the attack loop.
///
/// Accuracy uses the labeled test set. Agreement and mean KL need target
/// probabilities and are skipped when no target source is given.
pub struct SnapshotObserver<'a> {
    pub test: &'a Dataset,
    pub target: Option<&'a dyn ProbSource>,
}

impl RoundObserver for SnapshotObserver<'_> {
    fn snapshot(&self, model: &Model) -> Result<RoundMetrics> {
        let acc = match self.test.labels {
            Some(_) => Some(accuracy(model, self.test)?),
            None => None,
        };
        let (agr, kl) = match self.target {
            Some(t) => (
                Some(agreement(t, model, &self.test.features)?),
                Some(kl_fidelity(t, model, &self.test.features)?),
            ),
            None => (None, None),
        };
        Ok(RoundMetrics {
            accuracy: acc,
            agreement: agr,
            mean_kl: kl,
        })
    }
}
