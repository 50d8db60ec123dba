//! End-to-end tests of the `lrcnet` binary: exit codes, printed metrics
//! and artifact layout.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lrcnet::dataset::{read_dataset, write_dataset, Dataset};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lrcnet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Parses the value of a `key <float>` line from stdout.
fn metric(out: &Output, key: &str) -> f64 {
    let text = stdout(out);
    let line = text
        .lines()
        .find(|l| l.starts_with(key))
        .unwrap_or_else(|| panic!("no {key} line in output:\n{text}"));
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

fn write_file(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const BASE_1D: &str = r#"
seed = 7

[domain]
d = 1
length = 5.0

[kernel]
kind = "exponential"
mu1 = 0.5
mu2 = 0.0
alpha1 = 1.0
alpha2 = 0.0

[sampler]
n_particles = 6
n_sample = 14
delta_min = 0.05

[descriptor]
r_cut = 1.5
n_max_neigh = 12
m_sr = 8
m_lr = 4
k_chnls = 2

[nufft]
l_fft = 16

[train]
seed = 3
n_test = 4
eval_every = 2
stages = [{ batch = 5, epochs = 3 }]
"#;

fn config_with_data(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "{BASE_1D}\n[paths]\ndata = {:?}\n{extra}",
        data.display().to_string()
    );
    write_file(dir, "run.toml", &text)
}

fn generate(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = write_file(dir, "gen.toml", BASE_1D);
    let data = dir.join("data.bin");
    let out = run(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    (cfg, data)
}

#[test]
fn generate_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = generate(dir.path());
    let ds = read_dataset(&data).unwrap();
    assert_eq!(ds.snapshots.len(), 14);
    assert_eq!(ds.header.d, 1);

    let manifest_path = dir.path().join("data.bin.manifest.json");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(manifest_path).unwrap()).unwrap();
    assert!(manifest["config_echo"]
        .as_str()
        .unwrap()
        .contains("n_sample = 14"));
    assert!(manifest["timestamp_unix"].as_u64().unwrap() > 0);
    assert!(manifest["git"].is_string());
}

#[test]
fn generate_rejects_bad_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(dir.path(), "bad.toml", &BASE_1D.replace("d = 1", "d = 4"));
    let out = run(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("x.bin").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("d must be 1, 2, or 3"));
}

#[test]
fn generate_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(
        dir.path(),
        "bad.toml",
        &format!("{BASE_1D}\n[domain.extra]\nx = 1\n"),
    );
    let out = run(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("x.bin").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn generate_surfaces_unwritable_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(dir.path(), "gen.toml", BASE_1D);
    let out = run(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("missing/dir/x.bin").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn train_sr_and_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = generate(dir.path());
    let cfg = config_with_data(dir.path(), &data, "");
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "sr",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let train_eps = metric(&out, "eps_rel");
    assert!(train_eps.is_finite() && train_eps > 0.0);

    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.starts_with("stage,epoch,lr,train_loss,test_eps_rel,wall_seconds"));
    assert!(run_dir.join("manifest.json").exists());

    // Evaluating the checkpoint on the held-out tail reproduces the
    // printed train-time error.
    let ds = read_dataset(&data).unwrap();
    let tail = Dataset {
        header: {
            let mut h = ds.header;
            h.n_sample = 4;
            h
        },
        snapshots: ds.snapshots[10..].to_vec(),
    };
    let tail_path = dir.path().join("tail.bin");
    write_dataset(&tail_path, &tail).unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--data",
        tail_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let eval_eps = metric(&out, "eps_rel");
    assert!((eval_eps - train_eps).abs() <= 1e-12);

    let per_snap = fs::read_to_string(dir.path().join("tail.bin.eval.csv")).unwrap();
    assert_eq!(per_snap.lines().count(), 5);
    assert!(per_snap.starts_with("snapshot,eps_rel"));
}

#[test]
fn train_full_writes_checkpoint_with_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = generate(dir.path());
    let cfg = config_with_data(dir.path(), &data, "");
    let run_dir = dir.path().join("run_full");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "full",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let ck: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("checkpoint.json")).unwrap())
            .unwrap();
    assert_eq!(ck["l_fft"].as_u64(), Some(16));
}

#[test]
fn train_rejects_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = generate(dir.path());
    let text = format!(
        "{}\n[paths]\ndata = {:?}\n",
        BASE_1D.replace("d = 1", "d = 2").replace("l_fft = 16", "l_fft = 14"),
        data.display().to_string()
    );
    let cfg = write_file(dir.path(), "mismatch.toml", &text);
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "sr",
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("dimensional"));
}

#[test]
fn two_scale_needs_second_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = generate(dir.path());
    let cfg = config_with_data(dir.path(), &data, "");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "two-scale",
        "--out",
        dir.path().join("r2").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("data_large"));
}

#[test]
fn two_scale_runs_and_writes_both_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (_, small) = generate(dir.path());
    // Large boxes: same interaction, doubled box, more particles.
    let large_cfg_text = BASE_1D
        .replace("length = 5.0", "length = 10.0")
        .replace("n_particles = 6", "n_particles = 12")
        .replace("seed = 7", "seed = 8");
    let large_cfg = write_file(dir.path(), "large.toml", &large_cfg_text);
    let large = dir.path().join("large.bin");
    let out = run(&[
        "generate",
        "--config",
        large_cfg.to_str().unwrap(),
        "--out",
        large.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let cfg = config_with_data(
        dir.path(),
        &small,
        &format!("data_large = {:?}\n", large.display().to_string()),
    );
    let run_dir = dir.path().join("two");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "two-scale",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(metric(&out, "phase_a_eps_rel").is_finite());
    assert!(metric(&out, "eps_rel").is_finite());
    assert!(run_dir.join("checkpoint_sr.json").exists());
    assert!(run_dir.join("checkpoint.json").exists());
    assert!(run_dir.join("metrics_sr.csv").exists());
    assert!(run_dir.join("metrics.csv").exists());
}

#[test]
fn eval_rejects_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = generate(dir.path());
    let cfg = config_with_data(dir.path(), &data, "");
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "sr",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let ds = read_dataset(&data).unwrap();
    let empty = Dataset {
        header: {
            let mut h = ds.header;
            h.n_sample = 0;
            h
        },
        snapshots: vec![],
    };
    let empty_path = dir.path().join("empty.bin");
    write_dataset(&empty_path, &empty).unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--data",
        empty_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("no snapshots"));
}

#[test]
fn eval_rejects_zero_reference_forces() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = generate(dir.path());
    let cfg = config_with_data(dir.path(), &data, "");
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "sr",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let mut ds = read_dataset(&data).unwrap();
    for snap in &mut ds.snapshots {
        snap.forces.iter_mut().for_each(|f| *f = 0.0);
    }
    let zero_path = dir.path().join("zero.bin");
    write_dataset(&zero_path, &ds).unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--data",
        zero_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn bench_rejects_malformed_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(dir.path(), "bench.toml", BASE_1D);
    let out = run(&[
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--N",
        "64,ten",
        "--repeats",
        "1",
        "--out",
        dir.path().join("b").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("malformed N list"));
}

#[test]
fn bench_single_size_emits_normalized_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(dir.path(), "bench.toml", BASE_1D);
    let bdir = dir.path().join("b");
    let out = run(&[
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--N",
        "128",
        "--repeats",
        "1",
        "--out",
        bdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let csv = fs::read_to_string(bdir.join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "N,t_lrc_median,t_direct_median,lrc_normalized,direct_normalized"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "128");
    assert_eq!(row[3], "1");
    assert_eq!(row[4], "1");
    let dat = fs::read_to_string(bdir.join("bench.dat")).unwrap();
    assert!(dat.starts_with("# N "));
}

#[test]
fn threads_flag_and_env_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(dir.path(), "gen.toml", BASE_1D);
    let data = dir.path().join("t.bin");
    let out = run(&[
        "generate",
        "--threads",
        "2",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let out = bin()
        .env("LRC_THREADS", "not-a-number")
        .args([
            "generate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join("t2.bin").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("LRC_THREADS"));
}
