use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use marich_core::data::{split, synth_blobs};
use marich_core::evaluation::accuracy;
use marich_core::models::load_model;
use marich_server::{spawn, AppState};
use serde_json::Value;

const BASE: &str = r#"
experiment = "cli-test"
seed = 4

[data]
train_fraction = 0.4
test_fraction = 0.2
pool_fraction = 0.4

[data.blobs]
classes = 4
dim = 5
per_class = 60
center_spread = 3.0
noise_sd = 1.0

[target]
epochs = 20
lr = 0.1

[attack]
n0 = 20
b0 = 15.0
rounds = 3
epochs = 5
lr = 0.05
"#;

fn marich(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marich"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Setup {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Setup {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("exp.toml");
        let text = format!("output_dir = {:?}\n{extra}\n{BASE}", dir.path().join("out"));
        std::fs::write(&config, text).unwrap();
        Setup { dir, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join("out").join(name)
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.out(name)).unwrap()).unwrap()
    }
}

#[test]
fn help_lists_config_keys_and_exit_codes() {
    let out = Command::new(env!("CARGO_BIN_EXE_marich"))
        .args(["attack", "--help"])
        .output()
        .unwrap();
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in [
        "n0",
        "b0",
        "gamma1",
        "gamma2",
        "alpha",
        "sampler",
        "dp_epsilon",
        "calibration_fraction",
        "EXIT CODES",
    ] {
        assert!(text.contains(key), "help is missing {key}");
    }
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, "[data.csv]\npath = \"nowhere.csv\"\nclasses = 2\n").unwrap();
    let out = marich(&["train-target"], &config);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.csv.path"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let s = Setup::new("");
    let text = std::fs::read_to_string(&s.config)
        .unwrap()
        .replace("n0 = 20", "n0 = 20\nbogus = 1");
    std::fs::write(&s.config, text).unwrap();
    let out = marich(&["attack"], &s.config);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn missing_target_is_a_config_error() {
    let s = Setup::new("");
    assert_eq!(marich(&["attack"], &s.config).status.code(), Some(2));
}

#[test]
fn unreachable_target_is_a_runtime_error() {
    let s = Setup::new("");
    let out = Command::new(env!("CARGO_BIN_EXE_marich"))
        .args(["attack", "--target-url", "http://127.0.0.1:9", "--config"])
        .arg(&s.config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

fn rounds_queries(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
        .collect()
}

#[test]
fn samplers_issue_equal_query_counts() {
    let s = Setup::new("");
    ok(&marich(&["train-target"], &s.config));
    ok(&marich(&["attack"], &s.config));
    let marich_rounds = rounds_queries(&s.out("rounds.csv"));
    for sampler in [
        "random",
        "entropy",
        "least-confidence",
        "margin",
        "k-center",
    ] {
        std::fs::create_dir_all(s.dir.path().join(sampler)).unwrap();
        std::fs::copy(
            s.out("target.bin"),
            s.dir.path().join(sampler).join("target.bin"),
        )
        .unwrap();
        let out = Command::new(env!("CARGO_BIN_EXE_marich"))
            .args(["attack", "--sampler", sampler, "--config"])
            .arg(&s.config)
            .args(["--output-dir", s.dir.path().join(sampler).to_str().unwrap()])
            .output()
            .unwrap();
        ok(&out);
        assert_eq!(
            rounds_queries(&s.dir.path().join(sampler).join("rounds.csv")),
            marich_rounds,
            "{sampler}"
        );
    }
}

#[test]
fn http_attack_matches_in_process_selection() {
    let s = Setup::new("");
    ok(&marich(&["train-target"], &s.config));
    ok(&marich(&["attack"], &s.config));
    let local = s.json("trace.json");

    let target = load_model(&s.out("target.bin")).unwrap();
    let server = spawn(
        AppState::new(target, None, None, false, 7).unwrap(),
        "127.0.0.1:0",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_marich"))
        .args(["attack", "--target-url", &server.url(), "--config"])
        .arg(&s.config)
        .output()
        .unwrap();
    ok(&out);
    let remote = s.json("trace.json");
    assert_eq!(local["initial"]["indices"], remote["initial"]["indices"]);
    for (a, b) in local["rounds"]
        .as_array()
        .unwrap()
        .iter()
        .zip(remote["rounds"].as_array().unwrap())
    {
        assert_eq!(a["selected"], b["selected"]);
        assert_eq!(a["labels"], b["labels"]);
    }
    assert_eq!(
        remote["total_queries"].as_u64().unwrap(),
        server.queries_used()
    );
}

#[test]
fn evaluating_a_model_against_itself() {
    let s = Setup::new("");
    let target = s.out("target.bin");
    let text = std::fs::read_to_string(&s.config).unwrap()
        + &format!("\n[evaluate]\nextracted_path = {target:?}\nmetrics = [\"accuracy\", \"agreement\", \"kl\", \"parametric\", \"mi\"]\n");
    std::fs::write(&s.config, text).unwrap();
    ok(&marich(&["train-target"], &s.config));
    ok(&marich(&["evaluate"], &s.config));

    let report = s.json("report.json");
    let m = &report["metrics"];
    assert_eq!(m["agreement"], 100.0);
    assert_eq!(m["kl"]["mean"], 0.0);
    assert_eq!(m["parametric"], 1e-12f64.ln());
    assert_eq!(m["accuracy"]["target"], m["accuracy"]["extracted"]);
    assert_eq!(m["mi"]["agreement"], 100.0);

    let metrics = s.json("metrics.json");
    assert_eq!(metrics["test_accuracy"], m["accuracy"]["target"]);

    let csv = std::fs::read_to_string(s.out("report.csv")).unwrap();
    let metric_names: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    let mut unique = metric_names.clone();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), metric_names.len(), "metric repeated in {csv}");
}

#[test]
fn noiseless_dpsgd_matches_plain_training() {
    let s = Setup::new("");
    ok(&marich(&["train-target"], &s.config));
    let plain = s.json("metrics.json");
    let out = Command::new(env!("CARGO_BIN_EXE_marich"))
        .args([
            "train-target",
            "--dpsgd",
            "--clip-norm",
            "1e12",
            "--noise-multiplier",
            "0",
            "--config",
        ])
        .arg(&s.config)
        .output()
        .unwrap();
    ok(&out);
    let private = s.json("metrics.json");
    assert_eq!(plain["test_accuracy"], private["test_accuracy"]);
    assert_eq!(plain["train_accuracy"], private["train_accuracy"]);
    assert!(!private["dpsgd"].is_null());
}

#[test]
fn kl_over_label_only_server_names_the_flag() {
    let s = Setup::new("");
    ok(&marich(&["train-target"], &s.config));
    ok(&marich(&["attack"], &s.config));
    let target = load_model(&s.out("target.bin")).unwrap();
    let server = spawn(
        AppState::new(target, None, None, false, 256).unwrap(),
        "127.0.0.1:0",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_marich"))
        .args(["evaluate", "--target-url", &server.url(), "--config"])
        .arg(&s.config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--expose-probs"));
}

#[test]
fn report_accuracy_matches_library() {
    let s = Setup::new("");
    ok(&marich(&["train-target"], &s.config));
    ok(&marich(&["attack"], &s.config));
    ok(&marich(&["evaluate"], &s.config));
    let report = s.json("report.json");

    // the main dataset is drawn with the experiment seed
    let ds = synth_blobs(4, 5, 60, 3.0, 1.0, 4).unwrap();
    let parts = split(
        &ds,
        &[0.4, 0.2, 0.4],
        marich_core::seeds::derive_seed(4, "split", 0),
    )
    .unwrap();
    let extracted = load_model(&s.out("extracted.bin")).unwrap();
    let acc = accuracy(&extracted, &parts[1]).unwrap();
    assert_eq!(report["metrics"]["accuracy"]["extracted"], acc);
}
