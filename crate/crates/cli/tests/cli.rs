use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_downscale-op"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("DOWNSCALE_OP_THREADS", "1").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_1D: &str = r#"
experiment = "elliptic-1d"
sweep = "patch-size"
fine_n = 512
coarse_n = 64
eval_n = 128
cell_n = 64
patch_sizes = [1, 3]
n_observations = [6]
seeds = 2
width = 8
epochs = 60
"#;

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let o = run(&["experiment", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.cfg"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["solve", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn bad_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "experiment = \"elliptic-1d\"\npatch_szes = [1]\n").unwrap();
    let o = run(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ms.cfg");
    std::fs::write(&cfg, "experiment = \"elliptic-2d-multiscale\"\n").unwrap();
    let o = run(&["cell", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn cell_prints_effective_tensor_with_bounded_eigenvalues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("cell2d.cfg");
    let o = run(&["cell", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("a_star:"));
    let line = out.lines().find(|l| l.starts_with("eigenvalues:")).expect("eigenvalue line");
    let eig: Vec<f64> = line["eigenvalues:".len()..].split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(eig.len(), 2);
    assert!(eig.iter().all(|l| (1.0..=3.0).contains(l)), "{eig:?}");
    assert!(dir.path().join("a_star.csv").exists());
}

#[test]
fn experiment_smoke_is_deterministic_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, SMALL_1D).unwrap();
    let mut trends = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let o = run(&["experiment", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
        for f in ["trend.csv", "trend.svg", "runs.csv", "config.toml"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        trends.push(std::fs::read(out.join("trend.csv")).unwrap());
    }
    assert_eq!(trends[0], trends[1]);
    let text = String::from_utf8(trends[0].clone()).unwrap();
    assert!(text.starts_with("sweep_value,mean_rel_l2,std_rel_l2,n_seeds,method\n"));
    assert_eq!(text.lines().count(), 3);

    let svg = dir.path().join("replot.svg");
    let o = run(&[
        "plot",
        "--input",
        dir.path().join("run0/trend.csv").to_str().unwrap(),
        "--output",
        svg.to_str().unwrap(),
        "--x-label",
        "patch size (points per axis)",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&svg).unwrap(), std::fs::read(dir.path().join("run0/trend.svg")).unwrap());

    // the written canonical config reproduces the run
    let o = run(&["experiment", "--config", dir.path().join("run0/config.toml").to_str().unwrap(), "--out-dir", dir.path().join("run2").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("run2/trend.csv")).unwrap(), trends[0]);
}

#[test]
fn solve_dataset_and_train_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    std::fs::write(
        &cfg,
        r#"{"experiment": "elliptic-1d", "fine_n": 512, "coarse_n": 64, "eval_n": 128, "patch_sizes": [3], "n_observations": [6], "width": 8, "epochs": 40}"#,
    )
    .unwrap();
    let out = dir.path().to_str().unwrap();
    for (cmd, files) in [
        ("solve", vec!["fine.csv", "coarse.csv", "reference_eval.csv"]),
        ("dataset", vec!["observations.csv"]),
        ("train", vec!["params.csv", "prediction.csv"]),
    ] {
        let o = run(&[cmd, "--config", cfg.to_str().unwrap(), "--out-dir", out]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        for f in files {
            assert!(dir.path().join(f).exists(), "{cmd}: {f} missing");
        }
    }
    let obs = std::fs::read_to_string(dir.path().join("observations.csv")).unwrap();
    assert!(obs.starts_with("# observations: dim=1,p=3"));
    assert_eq!(obs.lines().count(), 2 + 6);
}

#[test]
fn bayes_writes_ensemble_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.cfg");
    std::fs::write(
        &cfg,
        "experiment = \"elliptic-1d\"\nsweep = \"noisy-bayes\"\nfine_n = 512\ncoarse_n = 64\neval_n = 128\nn_observations = [8]\nwidth = 8\nepochs = 40\nburn_in = 20\nthin = 2\nensemble_size = 5\n",
    )
    .unwrap();
    let o = run(&["bayes", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("5 members"));
    assert!(dir.path().join("ensemble_mean.csv").exists());
    assert!(dir.path().join("ensemble_variance.csv").exists());
}
