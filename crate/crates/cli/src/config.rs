//! Experiment documents (TOML). One document describes one experiment and
//! one output directory; every command reads the sections it needs.

use std::path::{Path, PathBuf};

use marich_core::attack::AttackConfig;
use marich_core::data::{load_csv, load_idx, split, synth_blobs, Dataset};
use marich_core::models::{Activation, DpSgdConfig, ModelKind, ModelSpec};
use marich_core::oracle::{DpConfig, DEFAULT_SENSITIVITY};
use marich_core::seeds::derive_seed;
use serde::{Deserialize, Serialize};

/// Printed by `--help`.
pub const CONFIG_KEYS: &str = "\
CONFIG KEYS (TOML; unknown keys are rejected)
  experiment            name used in reports            (default \"experiment\")
  seed                  global seed for data and splits (default 0)
  output_dir            directory for every output file (default \"out\")

  [data]                target's data, split three ways
    train_fraction      target training part            (default 0.5)
    test_fraction       held-out test part              (default 0.2)
    pool_fraction       attacker's query pool           (default 0.3)
    [data.blobs]        classes, dim, per_class, center_spread (4.0), noise_sd (1.0), seed
    [data.csv]          path, label_column (\"label\"), classes
    [data.idx]          images, labels
  [test]                optional separate test source   (blobs | csv | idx table)
  [pool]                optional separate query pool    (blobs | csv | idx table)

  [target]
    kind                softmax-regression | mlp        (default softmax-regression)
    hidden_sizes        MLP widths                      (default [])
    activation          relu | tanh                     (default relu)
    epochs, lr, batch_size                              (defaults 30, 0.1, 32)
    model_path          target file                     (default <output_dir>/target.bin)
    url                 attack a served target instead of model_path
    cap                 in-process query cap
    dp_epsilon          in-process Laplace output perturbation
    dp_sensitivity      (default 2.0)
    dp_noise_seed       (default 0)
    [target.dpsgd]      clip_norm, noise_multiplier     (train with DP-SGD)

  [extract]             architecture of the extracted model
    kind, hidden_sizes, activation                      (same defaults as [target])

  [attack]
    sampler             marich | random | entropy | least-confidence | margin | k-center
    n0                  initial random queries          (default 300)
    b0                  round-0 budget                  (default 250)
    alpha               budget growth per round         (default 1.02)
    rounds              adaptive rounds                 (default 10)
    gamma1, gamma2      cascade keep ratios             (default 0.8, 0.8)
    epochs, lr, batch_size                              (defaults 10, 0.02, 32)
    seed                attack seed                     (default 0)
    stratified_grad     round-robin over gradient clusters (default false)
    loss_scoring        min-distance | summed           (default min-distance)

  [evaluate]
    metrics             subset of accuracy, agreement, kl, parametric, mi
                        (default all but parametric)
    extracted_path      (default <output_dir>/extracted.bin)
    calibration_fraction  MI calibration share          (default 0.5)
    mi_seed             (default 0)
    round_snapshots     per-round metrics during attack (default true)
";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsSource {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    #[serde(default = "default_spread")]
    pub center_spread: f64,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    pub seed: Option<u64>,
}

fn default_spread() -> f64 {
    4.0
}

fn default_noise() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    pub classes: usize,
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
}

/// Exactly one of the three tables must be present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub blobs: Option<BlobsSource>,
    pub csv: Option<CsvSource>,
    pub idx: Option<IdxSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "half")]
    pub train_fraction: f64,
    #[serde(default = "fifth")]
    pub test_fraction: f64,
    #[serde(default = "three_tenths")]
    pub pool_fraction: f64,
    pub blobs: Option<BlobsSource>,
    pub csv: Option<CsvSource>,
    pub idx: Option<IdxSource>,
}

fn half() -> f64 {
    0.5
}

fn fifth() -> f64 {
    0.2
}

fn three_tenths() -> f64 {
    0.3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "target_epochs")]
    pub epochs: usize,
    #[serde(default = "target_lr")]
    pub lr: f64,
    #[serde(default = "batch")]
    pub batch_size: usize,
    pub model_path: Option<PathBuf>,
    pub url: Option<String>,
    pub cap: Option<u64>,
    pub dp_epsilon: Option<f64>,
    #[serde(default = "default_sensitivity")]
    pub dp_sensitivity: f64,
    #[serde(default)]
    pub dp_noise_seed: u64,
    pub dpsgd: Option<DpSgdConfig>,
}

fn default_kind() -> ModelKind {
    ModelKind::SoftmaxRegression
}

fn target_epochs() -> usize {
    30
}

fn target_lr() -> f64 {
    0.1
}

fn batch() -> usize {
    32
}

fn default_sensitivity() -> f64 {
    DEFAULT_SENSITIVITY
}

impl Default for TargetSection {
    fn default() -> Self {
        toml::from_str("").expect("empty target section")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::SoftmaxRegression,
            hidden_sizes: Vec::new(),
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    Agreement,
    Kl,
    Parametric,
    Mi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    pub extracted_path: Option<PathBuf>,
    #[serde(default = "half")]
    pub calibration_fraction: f64,
    #[serde(default)]
    pub mi_seed: u64,
    #[serde(default = "yes")]
    pub round_snapshots: bool,
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::Accuracy, Metric::Agreement, Metric::Kl, Metric::Mi]
}

fn yes() -> bool {
    true
}

impl Default for EvaluateSection {
    fn default() -> Self {
        toml::from_str("").expect("empty evaluate section")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_experiment")]
    pub experiment: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub test: Option<DataSource>,
    pub pool: Option<DataSource>,
    #[serde(default)]
    pub target: TargetSection,
    #[serde(default)]
    pub extract: ArchSection,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

fn default_experiment() -> String {
    "experiment".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, thiserror::Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn cfg_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.into(),
        message: message.into(),
    }
}

/// The four data roles an experiment needs.
pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
    pub pool: Dataset,
    pub num_classes: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        for (name, f) in [
            ("data.train_fraction", d.train_fraction),
            ("data.test_fraction", d.test_fraction),
            ("data.pool_fraction", d.pool_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(cfg_err(name, format!("must lie in [0, 1], got {f}")));
            }
        }
        let total = d.train_fraction + d.test_fraction + d.pool_fraction;
        if (total - 1.0).abs() > 1e-9 {
            return Err(cfg_err(
                "data",
                format!("fractions sum to {total}, expected 1"),
            ));
        }
        let data_source = DataSource {
            blobs: d.blobs.clone(),
            csv: d.csv.clone(),
            idx: d.idx.clone(),
        };
        check_source("data", &data_source)?;
        if let Some(t) = &self.test {
            check_source("test", t)?;
        } else if d.test_fraction == 0.0 {
            return Err(cfg_err(
                "data.test_fraction",
                "zero without a [test] source",
            ));
        }
        if let Some(p) = &self.pool {
            check_source("pool", p)?;
        } else if d.pool_fraction == 0.0 {
            return Err(cfg_err(
                "data.pool_fraction",
                "zero without a [pool] source",
            ));
        }
        if d.train_fraction == 0.0 {
            return Err(cfg_err("data.train_fraction", "must be positive"));
        }
        self.attack
            .validate()
            .map_err(|e| cfg_err("attack", e.to_string()))?;
        let t = &self.target;
        if t.batch_size == 0 {
            return Err(cfg_err("target.batch_size", "must be at least 1"));
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return Err(cfg_err("target.lr", "must be finite and non-negative"));
        }
        if let Some(eps) = t.dp_epsilon {
            self.dp()
                .expect("epsilon set")
                .validate()
                .map_err(|e| cfg_err("target.dp_epsilon", format!("{e} (got {eps})")))?;
        }
        if t.url.is_some() && (t.cap.is_some() || t.dp_epsilon.is_some()) {
            return Err(cfg_err(
                "target.url",
                "cap and dp for a served target are set on the server",
            ));
        }
        for (name, kind, hidden) in [
            ("target", t.kind, &t.hidden_sizes),
            ("extract", self.extract.kind, &self.extract.hidden_sizes),
        ] {
            if kind == ModelKind::Mlp && hidden.is_empty() {
                return Err(cfg_err(
                    &format!("{name}.hidden_sizes"),
                    "mlp needs at least one layer",
                ));
            }
            if kind == ModelKind::SoftmaxRegression && !hidden.is_empty() {
                return Err(cfg_err(
                    &format!("{name}.hidden_sizes"),
                    "softmax-regression has no hidden layers",
                ));
            }
        }
        let e = &self.evaluate;
        if !(e.calibration_fraction > 0.0 && e.calibration_fraction < 1.0) {
            return Err(cfg_err(
                "evaluate.calibration_fraction",
                "must lie in (0, 1)",
            ));
        }
        let mut m = e.metrics.clone();
        m.sort();
        m.dedup();
        if m.len() != e.metrics.len() {
            return Err(cfg_err("evaluate.metrics", "metrics listed twice"));
        }
        Ok(())
    }

    pub fn dp(&self) -> Option<DpConfig> {
        self.target.dp_epsilon.map(|eps| DpConfig {
            sensitivity: self.target.dp_sensitivity,
            ..DpConfig::laplace(eps, self.target.dp_noise_seed)
        })
    }

    pub fn target_path(&self) -> PathBuf {
        self.target
            .model_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("target.bin"))
    }

    pub fn extracted_path(&self) -> PathBuf {
        self.evaluate
            .extracted_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("extracted.bin"))
    }

    pub fn target_spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        spec(
            self.target.kind,
            &self.target.hidden_sizes,
            self.target.activation,
            input_dim,
            num_classes,
        )
    }

    pub fn extract_spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        let a = &self.extract;
        spec(
            a.kind,
            &a.hidden_sizes,
            a.activation,
            input_dim,
            num_classes,
        )
    }

    /// Loads and splits all data. Missing or unreadable inputs are config
    /// errors, so they surface before any training starts.
    pub fn datasets(&self) -> Result<Datasets, ConfigError> {
        let d = &self.data;
        let main = DataSource {
            blobs: d.blobs.clone(),
            csv: d.csv.clone(),
            idx: d.idx.clone(),
        };
        let full = load_source("data", &main, self.seed)?;
        let parts = split(
            &full,
            &[d.train_fraction, d.test_fraction, d.pool_fraction],
            derive_seed(self.seed, "split", 0),
        )
        .map_err(|e| cfg_err("data", e.to_string()))?;
        let [train, test, pool]: [Dataset; 3] = parts.try_into().expect("three parts");
        let test = match &self.test {
            Some(src) => load_source("test", src, derive_seed(self.seed, "test", 0))?,
            None => test,
        };
        let pool = match &self.pool {
            Some(src) => load_source("pool", src, derive_seed(self.seed, "pool", 0))?,
            None => pool,
        };
        let num_classes = full.k.max(test.k);
        for (name, ds) in [("test", &test), ("pool", &pool)] {
            if ds.dim() != full.dim() {
                return Err(cfg_err(
                    name,
                    format!("{} features, training data has {}", ds.dim(), full.dim()),
                ));
            }
        }
        Ok(Datasets {
            train,
            test,
            pool,
            num_classes,
        })
    }
}

fn spec(kind: ModelKind, hidden: &[usize], act: Activation, d: usize, k: usize) -> ModelSpec {
    match kind {
        ModelKind::SoftmaxRegression => ModelSpec::softmax_regression(d, k),
        ModelKind::Mlp => ModelSpec::mlp(d, k, hidden.to_vec(), act),
    }
}

fn check_source(name: &str, s: &DataSource) -> Result<(), ConfigError> {
    let n = s.blobs.is_some() as u8 + s.csv.is_some() as u8 + s.idx.is_some() as u8;
    if n != 1 {
        return Err(cfg_err(name, "needs exactly one of blobs, csv, idx"));
    }
    if let Some(b) = &s.blobs {
        if b.classes < 2 || b.dim == 0 || b.per_class == 0 {
            return Err(cfg_err(
                &format!("{name}.blobs"),
                "classes >= 2, dim >= 1 and per_class >= 1 required",
            ));
        }
    }
    Ok(())
}

fn load_source(name: &str, s: &DataSource, seed: u64) -> Result<Dataset, ConfigError> {
    let missing = |field: &str, p: &Path| {
        if p.exists() {
            Ok(())
        } else {
            Err(cfg_err(
                &format!("{name}.{field}"),
                format!("{} does not exist", p.display()),
            ))
        }
    };
    let loaded = if let Some(b) = &s.blobs {
        synth_blobs(
            b.classes,
            b.dim,
            b.per_class,
            b.center_spread,
            b.noise_sd,
            b.seed.unwrap_or(seed),
        )
    } else if let Some(c) = &s.csv {
        missing("csv.path", &c.path)?;
        load_csv(&c.path, Some(&c.label_column), c.classes)
    } else if let Some(i) = &s.idx {
        missing("idx.images", &i.images)?;
        missing("idx.labels", &i.labels)?;
        load_idx(&i.images, &i.labels)
    } else {
        unreachable!("validated source")
    };
    loaded.map_err(|e| cfg_err(name, e.to_string()))
}
