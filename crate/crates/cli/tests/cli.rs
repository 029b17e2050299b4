use std::path::Path;
use std::process::{Command, Output};

use vecforge_core::linalg::Matrix;
use vecforge_core::rank_alloc::RankAllocation;
use vecforge_core::tensor_store::{read_checkpoint, read_covariance, Container, Dtype, TensorRecord};

fn vecforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vecforge"))
        .args(args)
        .env("VECFORGE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vecforge(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn synth(dir: &Path, seed: &str) {
    ok(&["synth", "--out", dir.to_str().unwrap(), "--seed", seed, "--tasks", "2"]);
}

fn covs(dir: &Path) {
    for t in ["t0", "t1"] {
        ok(&[
            "cov",
            "--model",
            &p(dir, &format!("{t}.safetensors")),
            "--acts",
            &p(dir, "suite.json"),
            "--out",
            &p(dir, &format!("{t}.cov.safetensors")),
            "--samples",
            "1024",
            "--seed",
            "7",
        ]);
    }
}

const RECIPE_INPUTS: &str = r#"[
    {"checkpoint": "t0.safetensors", "covariance": "t0.cov.safetensors", "task_id": "t0"},
    {"checkpoint": "t1.safetensors", "covariance": "t1.cov.safetensors", "task_id": "t1"}]"#;

fn write_recipe(dir: &Path, name: &str, body: &str) -> String {
    let path = p(dir, name);
    std::fs::write(&path, format!(r#"{{{body}, "base": "base.safetensors", "inputs": {RECIPE_INPUTS}}}"#)).unwrap();
    path
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), "5");
    synth(b.path(), "5");
    for f in ["suite.json", "base.safetensors", "t0.safetensors", "t1.reference.safetensors"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn cov_from_suite_and_container() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "1");
    covs(d.path());
    let set = read_covariance(d.path().join("t0.cov.safetensors")).unwrap();
    let ck = read_checkpoint(d.path().join("t0.safetensors")).unwrap();
    assert_eq!(set.entries.len(), ck.linear_layers.len());
    for (layer, e) in &set.entries {
        let cols = ck.tensors[layer].shape()[1];
        assert_eq!(e.matrix.shape(), (cols, cols));
        assert_eq!(e.sample_count, 1024);
    }
    let first = std::fs::read(d.path().join("t0.cov.safetensors")).unwrap();
    covs(d.path());
    assert_eq!(std::fs::read(d.path().join("t0.cov.safetensors")).unwrap(), first);

    // Activation container path.
    let mut c = Container::default();
    let m = |rows: usize, cols: usize, k: usize| Matrix::from_fn(rows, cols, |i, j| ((i * 7 + j * 3 + k) % 5) as f64 - 2.0);
    c.tensors.insert("fc1.acts.0".into(), TensorRecord::from_matrix(&m(32, 40, 0), Dtype::F32));
    c.tensors.insert("fc1.acts.1".into(), TensorRecord::from_matrix(&m(32, 24, 1), Dtype::F32));
    c.tensors.insert("fc2.acts.0".into(), TensorRecord::from_matrix(&m(48, 64, 2), Dtype::F32));
    c.write(d.path().join("acts.safetensors")).unwrap();
    ok(&[
        "cov",
        "--model",
        &p(d.path(), "t0.safetensors"),
        "--acts",
        &p(d.path(), "acts.safetensors"),
        "--out",
        &p(d.path(), "c.safetensors"),
        "--samples",
        "50",
    ]);
    let set = read_covariance(d.path().join("c.safetensors")).unwrap();
    assert_eq!(set.entries["fc1"].sample_count, 50);
    assert_eq!(set.entries["fc2"].sample_count, 50);
    assert_eq!(set.task_id, "t0");
}

#[test]
fn cov_with_zero_samples_exits_2() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "1");
    let out = vecforge(&[
        "cov",
        "--model",
        &p(d.path(), "t0.safetensors"),
        "--acts",
        &p(d.path(), "suite.json"),
        "--out",
        &p(d.path(), "x"),
        "--samples",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("level=error"));
}

#[test]
fn alloc_budgets() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "2");
    covs(d.path());
    let models = format!("{},{}", p(d.path(), "t0.safetensors"), p(d.path(), "t1.safetensors"));
    let cs = format!("{},{}", p(d.path(), "t0.cov.safetensors"), p(d.path(), "t1.cov.safetensors"));
    let out = p(d.path(), "a.txt");
    let stdout = ok(&["alloc", "--models", &models, "--covs", &cs, "--rho", "1.0", "--out", &out]);
    let a = RankAllocation::from_text(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(a.ranks.iter().all(|r| r == &a.full_ranks));
    assert_eq!(stdout.lines().count(), 2);
    ok(&["alloc", "--models", &models, "--covs", &cs, "--rho", "0.875", "--gamma", "0.8125", "--out", &out]);
    let bad = vecforge(&["alloc", "--models", &models, "--covs", &cs, "--rho", "0.5", "--gamma", "0.9", "--out", &out]);
    assert_eq!(bad.status.code(), Some(2));
    let mismatch = vecforge(&["alloc", "--models", &models, "--covs", &p(d.path(), "t0.cov.safetensors"), "--out", &out]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn merge_outputs_and_reproducibility() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "3");
    covs(d.path());

    let zero = write_recipe(d.path(), "zero.json", r#""method": "task_arithmetic", "lambda": 0.0"#);
    ok(&["merge", "--recipe", &zero, "--out", &p(d.path(), "zero.safetensors")]);
    let base = read_checkpoint(d.path().join("base.safetensors")).unwrap();
    assert_eq!(read_checkpoint(d.path().join("zero.safetensors")).unwrap().tensors, base.tensors);

    let emr = write_recipe(d.path(), "emr.json", r#""method": "emr", "purification": {"rho": 0.75}"#);
    ok(&["merge", "--recipe", &emr, "--out", &p(d.path(), "m1.safetensors")]);
    for side in ["m1.safetensors.recipe.json", "m1.safetensors.emr.safetensors", "m1.safetensors.alloc.txt"] {
        assert!(d.path().join(side).is_file(), "{side}");
    }
    // The resolved recipe reproduces the run bit for bit.
    ok(&["merge", "--recipe", &p(d.path(), "m1.safetensors.recipe.json"), "--out", &p(d.path(), "m2.safetensors")]);
    for (a, b) in [("m1.safetensors", "m2.safetensors"), ("m1.safetensors.emr.safetensors", "m2.safetensors.emr.safetensors")] {
        assert_eq!(std::fs::read(d.path().join(a)).unwrap(), std::fs::read(d.path().join(b)).unwrap());
    }
    let resolved = std::fs::read_to_string(d.path().join("m1.safetensors.recipe.json")).unwrap();
    for key in ["\"lambda\"", "\"gamma\"", "\"seed\"", "\"decomposer\""] {
        assert!(resolved.contains(key), "{key}");
    }
}

#[test]
fn merge_single_average_is_the_finetuned_model() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "4");
    let path = p(d.path(), "avg.json");
    std::fs::write(
        &path,
        r#"{"method": "average", "base": "base.safetensors", "inputs": [{"checkpoint": "t1.safetensors", "task_id": "t1"}]}"#,
    )
    .unwrap();
    ok(&["merge", "--recipe", &path, "--out", &p(d.path(), "avg.safetensors")]);
    let got = read_checkpoint(d.path().join("avg.safetensors")).unwrap();
    let want = read_checkpoint(d.path().join("t1.safetensors")).unwrap();
    for (name, t) in &want.tensors {
        let diff = got.tensors[name]
            .to_f64_vec()
            .iter()
            .zip(t.to_f64_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{name}");
    }
}

#[test]
fn merge_errors_map_to_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let bad = p(d.path(), "bad.json");
    std::fs::write(&bad, r#"{"method": "ties", "lambda": 5, "inputs": [], "base": "b"}"#).unwrap();
    let out = vecforge(&["merge", "--recipe", &bad, "--out", &p(d.path(), "x")]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lambda 5") && stderr.contains("inputs is empty"), "{stderr}");
    let missing = vecforge(&["merge", "--recipe", &p(d.path(), "none.json"), "--out", &p(d.path(), "x")]);
    assert_eq!(missing.status.code(), Some(4));
    let usage = vecforge(&["merge"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn eval_and_fig3() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "6");
    let suite = p(d.path(), "suite.json");
    let csv = ok(&["eval", "--suite", &suite, "--model", &p(d.path(), "t0.reference.safetensors"), "--task", "t0"]);
    assert_eq!(csv, "task,score\nt0,1\n");

    let rows = ok(&["fig3", "--suite", &suite, "--ranks", "16,32", "--decomposers", "co_svd,plain_svd", "--n-eval", "1000"]);
    let mut lines = rows.lines();
    assert_eq!(lines.next(), Some("decomposer,rank,task,score,seed"));
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), 2 * 2 * 2);
    for task in ["t0", "t1"] {
        let unpruned = ok(&["eval", "--suite", &suite, "--model", &p(d.path(), &format!("{task}.safetensors")), "--task", task, "--n-eval", "1000"]);
        let score = unpruned.lines().nth(1).unwrap().split(',').nth(1).unwrap();
        for line in body.iter().filter(|l| l.contains(",32,") && l.contains(&format!(",{task},"))) {
            let got: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
            assert!((got - score.parse::<f64>().unwrap()).abs() <= 1e-3, "{line} vs {score}");
        }
    }
}
