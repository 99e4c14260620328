//! Mini-batch SGD on hard-label cross-entropy, with an optional DP-SGD
//! mode (per-example clipping plus Gaussian noise on the summed gradient).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Gradient, Model};
use crate::error::{Error, Result};
use crate::mathcore::RealMatrix;
use crate::seeds::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSgdConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
}

impl Model {
    /// Continues training from the current parameters.
    pub fn train(&self, x: &RealMatrix, y: &[usize], cfg: &SgdConfig) -> Result<Model> {
        self.run_sgd(x, y, cfg, None)
    }

    /// DP-SGD: each per-example gradient is clipped to `clip_norm`, the
    /// batch sum receives `N(0, (σ·C)²)` noise per coordinate, then the
    /// result is averaged over the batch.
    pub fn dpsgd_train(
        &self,
        x: &RealMatrix,
        y: &[usize],
        cfg: &SgdConfig,
        dp: &DpSgdConfig,
    ) -> Result<Model> {
        if !(dp.clip_norm > 0.0) || !dp.clip_norm.is_finite() {
            return Err(Error::invalid(format!(
                "clip_norm must be positive and finite, got {}",
                dp.clip_norm
            )));
        }
        if !(dp.noise_multiplier >= 0.0) || !dp.noise_multiplier.is_finite() {
            return Err(Error::invalid(format!(
                "noise_multiplier must be non-negative, got {}",
                dp.noise_multiplier
            )));
        }
        self.run_sgd(x, y, cfg, Some(dp))
    }

    fn run_sgd(
        &self,
        x: &RealMatrix,
        y: &[usize],
        cfg: &SgdConfig,
        dp: Option<&DpSgdConfig>,
    ) -> Result<Model> {
        if x.rows() == 0 || y.is_empty() {
            return Err(Error::invalid("cannot train on an empty dataset"));
        }
        if x.rows() != y.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if cfg.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !cfg.lr.is_finite() || cfg.lr < 0.0 {
            return Err(Error::invalid(
                "learning rate must be finite and non-negative",
            ));
        }
        if x.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "training data has {} columns, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::OutOfRange(format!(
                "label {bad} not in 0..{}",
                self.num_classes()
            )));
        }

        let mut model = self.clone();
        let mut order: Vec<usize> = (0..y.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dpsgd-noise", 0));
        let noise = dp.map(|d| {
            Normal::new(0.0, d.noise_multiplier * d.clip_norm).expect("validated noise scale")
        });

        for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            for batch in order.chunks(cfg.batch_size) {
                let mut sum = Gradient::zeros_like(&model.spec);
                for &i in batch {
                    let (_, mut g) = model.loss_gradient(x.row(i), y[i])?;
                    if let Some(d) = dp {
                        g.clip_to_norm(d.clip_norm);
                    }
                    sum.add_assign(&g);
                }
                if let Some(normal) = &noise {
                    sum.for_each_mut(|v| *v += normal.sample(&mut noise_rng));
                }
                let step = cfg.lr / batch.len() as f64;
                for (layer, g) in model.layers.iter_mut().zip(&sum.layers) {
                    for (w, gw) in layer
                        .weights
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.weights.as_slice())
                    {
                        *w -= step * gw;
                    }
                    for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                        *b -= step * gb;
                    }
                }
            }
        }

        if model.params_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "training diverged to non-finite parameters; lower the learning rate".into(),
            ));
        }
        Ok(model)
    }
}
