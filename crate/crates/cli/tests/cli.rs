use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use consol_core::local::CanonicalEquation;
use serde_json::Value;

fn consol(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_consol")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const TOY: &str = r#"{"structure": {"layer_sizes": [2, 6, 1, 1],
 "layer_kinds": ["activation", "multiplication", "summation"],
 "indicators": [[[1,1,1,0,0,0],[0,0,0,1,1,1]], [[0],[1],[0],[0],[0],[1]], [[1]]],
 "library": ["id", "square", "cos"]}}"#;

/// Small Syn1 data plus the toy structure in a fresh directory.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    ok(&consol(&["gen-data", "syn1", "--seed", "3", "--n", "400", "--out", "data"], dir.path()));
    std::fs::write(dir.path().join("toy.json"), TOY).unwrap();
    let root = dir.path().to_path_buf();
    (dir, root)
}

#[test]
fn gen_data_writes_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    ok(&consol(&["gen-data", "syn1", "--seed", "7"], dir.path()));
    for f in ["train.csv", "test.csv"] {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert_eq!(text.lines().count(), 2001);
        assert!(text.starts_with("x1,x2,x3,y1,y2,y3\n"));
    }
    let meta = read_json(dir.path().join("train.csv.meta.json"));
    assert_eq!(meta["seed"], 7);
    assert!(meta["snr_db"].is_null());
}

#[test]
fn gen_data_records_noise_level() {
    let dir = tempfile::tempdir().unwrap();
    ok(&consol(&["gen-data", "syn1", "--snr", "100", "--n", "50"], dir.path()));
    assert_eq!(read_json(dir.path().join("train.csv.meta.json"))["snr_db"], 100.0);
}

#[test]
fn unknown_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = consol(&["gen-data", "bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("possible values"));
}

fn tiny_search_config(dir: &Path, extra: &str) -> PathBuf {
    let cfg = format!(
        r#"{{"version": 1, "seeds": {{"data": 1, "search": 2, "probe": 3}},
            "dataset": {{"name": "syn1", "n_train": 150, "n_test": 40}},
            "qlearn": {{"max_episodes": 4, "minibatch_size": 4, "q_epochs": 3, "r_epochs": 3 {extra}}},
            "output_dir": "run"}}"#
    );
    let p = dir.join("config.json");
    std::fs::write(&p, cfg).unwrap();
    p
}

#[test]
fn search_outputs_are_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    tiny_search_config(dir.path(), "");
    ok(&consol(&["search", "--config", "config.json"], dir.path()));
    ok(&consol(&["search", "--config", "config.json", "--out", "again"], dir.path()));
    for f in ["episodes.csv", "equations.txt", "report.json", "model.json", "qnet.bin", "rnet.bin", "config.json"] {
        let a = std::fs::read(dir.path().join("run").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("again").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let episodes = std::fs::read_to_string(dir.path().join("run/episodes.csv")).unwrap();
    assert_eq!(episodes.lines().next(), Some("t,reward,nrmse,actions,rejections,seconds"));
    assert_eq!(episodes.lines().count(), 5);

    let report = read_json(dir.path().join("run/report.json"));
    let schema: Value = serde_json::from_str(include_str!("../report.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    let terms: CanonicalEquation = serde_json::from_value(report["terms"].clone()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("run/equations.txt")).unwrap();
    assert_eq!(text, terms.render(4) + "\n");
}

#[test]
fn loose_stopping_threshold_stops_after_one_episode() {
    let dir = tempfile::tempdir().unwrap();
    tiny_search_config(dir.path(), r#", "stop_lambda": 2.0"#);
    ok(&consol(&["search", "--config", "config.json"], dir.path()));
    let report = read_json(dir.path().join("run/report.json"));
    assert_eq!(report["episodes"], 1);
    assert_eq!(report["stopped_early"], true);
}

#[test]
fn search_config_errors_exit_3_without_a_report() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"version": 1, "dataset": {"name": "files", "train": "missing/train.csv", "test": null}, "output_dir": "run"}"#,
    )
    .unwrap();
    let out = consol(&["search", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing/train.csv"));
    assert!(!dir.path().join("run/report.json").exists());

    std::fs::write(dir.path().join("typo.json"), r#"{"version": 1, "qlearn": {"gama": 0.3}}"#).unwrap();
    assert_eq!(consol(&["search", "--config", "typo.json"], dir.path()).status.code(), Some(3));
}

#[test]
fn fit_toy_structure() {
    let (_d, root) = workspace();
    let cols = ["--data", "data/train.csv", "--inputs", "1,2", "--outputs", "1"];
    let mut args = vec!["fit", "--structure", "toy.json", "--out", "good"];
    args.extend(cols);
    ok(&consol(&args, &root));
    let model = read_json(root.join("good/model.json"));
    let inner = model["weights"]["layers"][0]["inner"][5].as_f64().unwrap();
    let outer = model["weights"]["layers"][2]["w"]["data"][0].as_f64().unwrap();
    assert!((outer - 3.0).abs() < 1e-3 && (inner.abs() - 2.5).abs() < 1e-3, "{outer} {inner}");

    let mut args = vec!["fit", "--structure", "toy.json", "--init", "0", "--out", "zero"];
    args.extend(cols);
    let out = consol(&args, &root);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("zero gradient"));
    assert_eq!(read_json(root.join("zero/fit.json"))["converged"], false);

    let mut args = vec!["fit", "--structure", "toy.json", "--epochs", "0", "--out", "none"];
    args.extend(cols);
    ok(&consol(&args, &root));
    let fit = read_json(root.join("none/fit.json"));
    assert_eq!(fit["initial_loss"], fit["final_loss"]);
}

#[test]
fn probes() {
    let (_d, root) = workspace();
    let cols = ["--data", "data/train.csv", "--inputs", "1,2", "--outputs", "1"];

    let mut args = vec!["probe", "sweep", "--structure", "toy.json", "--grid", "-10..10", "--out", "sweep"];
    args.extend(cols);
    ok(&consol(&args, &root));
    let csv = std::fs::read_to_string(root.join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 22);
    assert!(csv.starts_with("w0,final_loss,sse\n-10,"));

    let mut args = vec!["fit", "--structure", "toy.json", "--out", "fit"];
    args.extend(cols);
    ok(&consol(&args, &root));

    let mut args = vec!["probe", "region", "--model", "fit/model.json", "--at-optimum", "--n", "20", "--out", "region"];
    args.extend(cols);
    ok(&consol(&args, &root));
    assert_eq!(read_json(root.join("region/region.json"))["membership"], true);

    let mut args = vec!["probe", "second-deriv", "--model", "fit/model.json", "--n", "10", "--out", "curv"];
    args.extend(cols);
    let out = consol(&args, &root);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("10 of 10"));

    tiny_search_config(&root, "");
    ok(&consol(&["search", "--config", "config.json"], &root));
    let out = consol(&["probe", "segment", "--target", "run/qnet.bin", "--n", "2000", "--out", "seg"], &root);
    ok(&out);
    assert_eq!(read_json(root.join("seg/segment.json"))["violations"], 0);

    let out = consol(&["probe", "segment", "--target", "toy.json"], &root);
    assert_eq!(out.status.code(), Some(3));
    let out = consol(&["probe", "nonsense"], &root);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_reports_metrics() {
    let (_d, root) = workspace();
    let mut args = vec!["fit", "--structure", "toy.json", "--out", "fit"];
    args.extend(["--data", "data/train.csv", "--inputs", "1,2", "--outputs", "1"]);
    ok(&consol(&args, &root));
    let out = consol(
        &["eval", "--model", "fit/model.json", "--data", "data/test.csv", "--inputs", "1,2", "--outputs", "1", "--out", "ev"],
        &root,
    );
    ok(&out);
    let m = read_json(root.join("ev/metrics.json"));
    assert!(m["nrmse_train"].as_f64().unwrap() < 1e-6);
    assert!(String::from_utf8_lossy(&out.stdout).contains("NRMSE"));
}

#[test]
fn thread_cap_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_consol"))
            .args(["gen-data", "syn1", "--n", "20"])
            .env("CONSOL_THREADS", v)
            .current_dir(dir.path())
            .output()
            .unwrap()
    };
    ok(&run("1"));
    assert_eq!(run("many").status.code(), Some(3));
}
