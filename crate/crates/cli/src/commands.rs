use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use marich_core::attack::{run_attack, AttackStatus, RoundObserver, SamplerKind};
use marich_core::data::QueryPool;
use marich_core::evaluation::{
    accuracy, agreement, kl_fidelity, mi_agreement, mi_threshold_attack, parametric_fidelity,
    report_csv, ProbSource, ReportRow, SnapshotObserver,
};
use marich_core::models::{init_model, load_model, save_model, DpSgdConfig, Model, SgdConfig};
use marich_core::oracle::{DpConfig, TargetHandle};
use marich_core::seeds::derive_seed;
use marich_server::{RemoteTarget, ServerConfig, ServerError};
use serde_json::{json, Value};

use crate::config::{ConfigError, ExperimentConfig, Metric};

/// Exit code 2 for config problems, 3 for everything at run time.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config error: {e:#}"),
            Failure::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<marich_core::Error> for Failure {
    fn from(e: marich_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T> = Result<T, Failure>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn prepare_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_model_input(path: &Path, what: &str) -> Outcome<Model> {
    if !path.exists() {
        return Err(Failure::Config(anyhow::anyhow!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    load_model(path).map_err(|e| Failure::Config(anyhow::anyhow!("{what} {}: {e}", path.display())))
}

pub struct TrainOverrides {
    pub output_dir: Option<PathBuf>,
    pub dpsgd: bool,
    pub clip_norm: Option<f64>,
    pub noise_multiplier: Option<f64>,
}

pub fn train_target(mut cfg: ExperimentConfig, o: TrainOverrides) -> Outcome<()> {
    if let Some(dir) = o.output_dir {
        cfg.output_dir = dir;
    }
    let dpsgd = match (o.dpsgd, cfg.target.dpsgd.clone()) {
        (false, dp) => dp,
        (true, base) => {
            let clip = o.clip_norm.or(base.as_ref().map(|b| b.clip_norm));
            let sigma = o
                .noise_multiplier
                .or(base.as_ref().map(|b| b.noise_multiplier));
            match (clip, sigma) {
                (Some(clip_norm), Some(noise_multiplier)) => Some(DpSgdConfig {
                    clip_norm,
                    noise_multiplier,
                }),
                _ => {
                    return Err(Failure::Config(anyhow::anyhow!(
                        "--dpsgd needs --clip-norm and --noise-multiplier or a [target.dpsgd] table"
                    )))
                }
            }
        }
    };
    let data = cfg.datasets()?;
    prepare_dir(&cfg.output_dir)?;

    let spec = cfg.target_spec(data.train.dim(), data.num_classes);
    let init = init_model(&spec, derive_seed(cfg.seed, "target-init", 0))?;
    let sgd = SgdConfig {
        epochs: cfg.target.epochs,
        lr: cfg.target.lr,
        batch_size: cfg.target.batch_size,
        seed: derive_seed(cfg.seed, "target-train", 0),
    };
    let y = data.train.labels()?;
    let model = match &dpsgd {
        Some(dp) => init.dpsgd_train(&data.train.features, y, &sgd, dp)?,
        None => init.train(&data.train.features, y, &sgd)?,
    };
    let train_acc = accuracy(&model, &data.train)?;
    let test_acc = accuracy(&model, &data.test)?;

    let path = cfg.target_path();
    if let Some(parent) = path.parent() {
        prepare_dir(parent)?;
    }
    save_model(&model, &path)?;
    let metrics = json!({
        "experiment": cfg.experiment,
        "model_path": path,
        "model_spec": spec,
        "train_size": data.train.len(),
        "test_size": data.test.len(),
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "dpsgd": dpsgd,
    });
    write_file(
        &cfg.output_dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).map_err(anyhow::Error::from)?,
    )?;
    println!("target test accuracy {test_acc:.4} -> {}", path.display());
    Ok(())
}

/// A target to attack or evaluate, plus whether it can answer with probabilities.
struct ResolvedTarget {
    handle: TargetHandle,
    white_box: bool,
    model: Option<Model>,
}

fn resolve_target(cfg: &ExperimentConfig, url: Option<&str>) -> Outcome<ResolvedTarget> {
    if let Some(url) = url.or(cfg.target.url.as_deref()) {
        let remote = RemoteTarget::connect(url)?;
        let white_box = remote.exposes_probs();
        return Ok(ResolvedTarget {
            // a label-only server refuses /v1/probs with a hint naming the flag
            handle: TargetHandle::remote(Box::new(remote)).with_eval_channel(true),
            white_box,
            model: None,
        });
    }
    let model = load_model_input(&cfg.target_path(), "target model")?;
    let mut handle = TargetHandle::in_process(model.clone()).with_eval_channel(true);
    if let Some(cap) = cfg.target.cap {
        handle = handle.with_cap(cap);
    }
    if let Some(dp) = cfg.dp() {
        handle = handle.with_dp(dp)?;
    }
    Ok(ResolvedTarget {
        handle,
        white_box: true,
        model: Some(model),
    })
}

pub struct AttackOverrides {
    pub output_dir: Option<PathBuf>,
    pub sampler: Option<SamplerKind>,
    pub seed: Option<u64>,
    pub target_url: Option<String>,
}

pub fn attack(mut cfg: ExperimentConfig, o: AttackOverrides) -> Outcome<AttackStatus> {
    if let Some(dir) = o.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(s) = o.sampler {
        cfg.attack.sampler = s;
    }
    if let Some(seed) = o.seed {
        cfg.attack.seed = seed;
    }
    let data = cfg.datasets()?;
    let target = resolve_target(&cfg, o.target_url.as_deref())?;
    prepare_dir(&cfg.output_dir)?;

    let spec = cfg.extract_spec(data.pool.dim(), target.handle.model_spec().num_classes);
    let mut pool = QueryPool::new(&data.pool);
    let observer = SnapshotObserver {
        test: &data.test,
        target: target
            .white_box
            .then_some(&target.handle as &dyn ProbSource),
    };
    let observer = cfg
        .evaluate
        .round_snapshots
        .then_some(&observer as &dyn RoundObserver);
    let (model, trace) = run_attack(&target.handle, &mut pool, &spec, &cfg.attack, observer)?;

    let dir = &cfg.output_dir;
    write_file(&dir.join("trace.json"), trace.to_json()?)?;
    write_file(&dir.join("rounds.csv"), trace.to_csv())?;
    let timings = trace.timings_ms();
    write_file(
        &dir.join("timings.json"),
        serde_json::to_string_pretty(&json!({
            "initial_ms": timings[0],
            "rounds_ms": &timings[1..],
        }))
        .map_err(anyhow::Error::from)?,
    )?;
    let out = cfg.extracted_path();
    save_model(&model, &out)?;

    let acc = trace.final_metrics().and_then(|m| m.accuracy);
    println!(
        "attack {} ({}): {} queries, status {}{}",
        cfg.attack.sampler.name(),
        target.handle.backend_name(),
        trace.total_queries,
        trace.status,
        acc.map(|a| format!(", test accuracy {a:.4}"))
            .unwrap_or_default()
    );
    Ok(trace.status)
}

pub struct EvaluateOverrides {
    pub output_dir: Option<PathBuf>,
    pub target_url: Option<String>,
}

pub fn evaluate(mut cfg: ExperimentConfig, o: EvaluateOverrides) -> Outcome<Value> {
    if let Some(dir) = o.output_dir {
        cfg.output_dir = dir;
    }
    let data = cfg.datasets()?;
    let target = resolve_target(&cfg, o.target_url.as_deref())?;
    let extracted = load_model_input(&cfg.extracted_path(), "extracted model")?;
    prepare_dir(&cfg.output_dir)?;

    let t: &dyn ProbSource = &target.handle;
    let x = &data.test.features;
    let mut metrics = BTreeMap::<&str, Value>::new();
    let mut rows = Vec::new();
    let mut row = |metric: String, value: f64| {
        rows.push(ReportRow {
            experiment: cfg.experiment.clone(),
            round: None,
            metric,
            value,
        })
    };
    for m in &cfg.evaluate.metrics {
        match m {
            Metric::Accuracy => {
                let (ta, ea) = (accuracy(t, &data.test)?, accuracy(&extracted, &data.test)?);
                row("accuracy.target".into(), ta);
                row("accuracy.extracted".into(), ea);
                metrics.insert("accuracy", json!({"target": ta, "extracted": ea}));
            }
            Metric::Agreement => {
                let a = agreement(t, &extracted, x)?;
                row("agreement".into(), a);
                metrics.insert("agreement", json!(a));
            }
            Metric::Kl => {
                let kl = kl_fidelity(t, &extracted, x)?;
                row("kl.mean".into(), kl);
                row("kl.log10".into(), kl.max(1e-300).log10());
                metrics.insert("kl", json!({"mean": kl, "log10": kl.max(1e-300).log10()}));
            }
            Metric::Parametric => {
                let tm = target.model.as_ref().ok_or_else(|| {
                    Failure::Runtime(anyhow::anyhow!(
                        "parametric fidelity needs the target model file, not a URL"
                    ))
                })?;
                let p = parametric_fidelity(tm, &extracted)?;
                row("parametric".into(), p);
                metrics.insert("parametric", json!(p));
            }
            Metric::Mi => {
                let f = cfg.evaluate.calibration_fraction;
                let seed = cfg.evaluate.mi_seed;
                let on_t = mi_threshold_attack(t, &data.train, &data.test, f, seed)?;
                let on_e = mi_threshold_attack(&extracted, &data.train, &data.test, f, seed)?;
                let (pct, auc) = mi_agreement(&on_t.holdout, &on_e.holdout)?;
                let v = json!({
                    "target_accuracy": on_t.overall_accuracy,
                    "target_auc": on_t.auc,
                    "extracted_accuracy": on_e.overall_accuracy,
                    "extracted_auc": on_e.auc,
                    "agreement": pct,
                    "agreement_auc": auc,
                });
                for (k, val) in v.as_object().expect("object") {
                    row(format!("mi.{k}"), val.as_f64().expect("number"));
                }
                metrics.insert("mi", v);
            }
        }
    }
    let report = json!({
        "schema_version": 1,
        "experiment": cfg.experiment,
        "target": target.handle.backend_name(),
        "extracted": cfg.extracted_path(),
        "test_size": data.test.len(),
        "metrics": metrics,
    });
    write_file(
        &cfg.output_dir.join("report.json"),
        serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?,
    )?;
    write_file(&cfg.output_dir.join("report.csv"), report_csv(&rows))?;
    println!(
        "{}",
        serde_json::to_string(&report["metrics"]).map_err(anyhow::Error::from)?
    );
    Ok(report)
}

pub struct ServeArgs {
    pub bind: String,
    pub model: PathBuf,
    pub cap: Option<u64>,
    pub dp_epsilon: Option<f64>,
    pub dp_sensitivity: f64,
    pub dp_noise_seed: u64,
    pub expose_probs: bool,
    pub max_batch: usize,
}

pub fn serve(a: ServeArgs) -> Outcome<()> {
    let dp = a.dp_epsilon.map(|eps| DpConfig {
        sensitivity: a.dp_sensitivity,
        ..DpConfig::laplace(eps, a.dp_noise_seed)
    });
    if let Some(dp) = &dp {
        dp.validate().map_err(|e| Failure::Config(e.into()))?;
    }
    if a.max_batch == 0 {
        return Err(Failure::Config(anyhow::anyhow!(
            "--max-batch must be at least 1"
        )));
    }
    load_model_input(&a.model, "model")?;
    let config = ServerConfig {
        bind: a.bind,
        model: a.model,
        cap: a.cap,
        dp,
        expose_probs: a.expose_probs,
        max_batch: a.max_batch,
    };
    marich_server::serve(&config).map_err(|e| match e {
        ServerError::Config(_) | ServerError::Core(_) => Failure::Config(e.into()),
        other => Failure::Runtime(other.into()),
    })
}
