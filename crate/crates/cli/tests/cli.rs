use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use si_core::importance::CalibSet;
use si_core::masking::{masks_from_tensor_file, SparsityPattern};
use si_core::model::{Model, TensorFile};
use si_core::reparam::Transforms;
use si_core::tensor::max_relative_discrepancy;

fn sitool(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sitool"))
        .args(args)
        .current_dir(dir)
        .env_remove("SI_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = sitool(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr_line(out: &Output) -> String {
    let s = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(s.lines().count(), 1, "expected one stderr line, got {s:?}");
    s.trim_end().to_string()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn row<'a>(rows: &'a [Vec<String>], label: &str) -> &'a [String] {
    rows.iter().find(|r| r[0] == label).unwrap_or_else(|| panic!("no {label} row"))
}

#[test]
fn zero_rate_prune_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["make-toy", "--out-dir", "toy"], d);
    ok(&["prune", "--model", "toy/model.sif", "--pattern", "0.0", "--out-dir", "p"], d);
    assert_eq!(fs::read(d.join("toy/model.sif")).unwrap(), fs::read(d.join("p/pruned.sif")).unwrap());
}

#[test]
fn induce_then_eval_improves_distortion() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["make-toy", "--out-dir", "toy"], d);
    let common = ["--model", "toy/model.sif", "--calib", "toy/calib.sif", "--seed", "0"];
    ok(&[&["induce", "--out-dir", "ind"][..], &common].concat(), d);
    ok(&[&["eval", "--out-dir", "ev"][..], &common].concat(), d);

    let rows = csv_rows(&d.join("ev/distortion.csv"));
    assert_eq!(rows[0], ["layer", "frob_no_si", "frob_si", "rel_no_si", "rel_si", "ratio"]);
    let ratio: f64 = row(&rows, "TOTAL")[5].parse().unwrap();
    assert!(ratio < 1.0, "ratio {ratio}");

    // Every artifact loads back, and the absorbed model computes the dense function.
    let model = Model::load(d.join("toy/model.sif")).unwrap();
    let absorbed = Model::load(d.join("ind/absorbed.sif")).unwrap();
    let calib = TensorFile::load(d.join("toy/calib.sif")).unwrap();
    let x = CalibSet::new(calib.get("calib").unwrap().to_matrix().unwrap());
    let err = max_relative_discrepancy(&model.forward(x.x()).unwrap(), &absorbed.forward(x.x()).unwrap()).unwrap();
    assert!(err < 1e-4, "absorbed model drifted by {err}");
    let t = Transforms::from_tensor_file(&TensorFile::load(d.join("ind/transforms.sif")).unwrap()).unwrap();
    assert!(!t.is_identity());
    let masks = masks_from_tensor_file(&TensorFile::load(d.join("ind/masks.sif")).unwrap()).unwrap();
    let half = SparsityPattern::unstructured(0.5).unwrap();
    assert!(masks.values().all(|m| m.satisfies(&half)));
    let trace = csv_rows(&d.join("ind/trace.csv"));
    assert_eq!(trace[0], ["stage", "layer", "step", "objective"]);
    assert!(trace.len() > 1);
    let hist = csv_rows(&d.join("ev/histograms.csv"));
    assert_eq!(hist[0], ["label", "bin_low", "bin_high", "count"]);
    assert!(hist.iter().any(|r| r[0] == "blk0.fc2/si"));
}

#[test]
fn outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = |out: &str| {
        vec!["induce", "--toy", "1,8,16", "--calib-synth", "32", "--si", "both", "--seed", "3", "--out-dir", out]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>()
    };
    let run = |out: &str, threads: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sitool"));
        cmd.args(args(out)).current_dir(d).env_remove("SI_THREADS");
        if let Some(n) = threads {
            cmd.env("SI_THREADS", n);
        }
        assert!(cmd.output().unwrap().status.success());
    };
    run("a", None);
    run("b", None);
    run("c", Some("1"));
    for f in ["absorbed.sif", "transforms.sif", "masks.sif", "trace.csv", "induce_meta.txt"] {
        let a = fs::read(d.join("a").join(f)).unwrap();
        assert_eq!(a, fs::read(d.join("b").join(f)).unwrap(), "{f} differs between runs");
        assert_eq!(a, fs::read(d.join("c").join(f)).unwrap(), "{f} depends on thread count");
    }
}

#[test]
fn bench_table_shape() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("b.cfg"), "bench.d_in = 256\nbench.n_samples = 32\nbench.iters = 8\n").unwrap();
    ok(&["bench", "--config", "b.cfg", "--out-dir", "b"], d);
    let rows = csv_rows(&d.join("b/bench.csv"));
    assert_eq!(rows[0], ["method", "update_time_s", "avg_time_per_iter_s", "speedup"]);
    assert_eq!(rows[1][0], "classical");
    assert_eq!(rows[2][0], "fast");
    assert_eq!(rows.len(), 3);
    for r in &rows[1..] {
        assert!(r[1..].iter().all(|v| v.parse::<f64>().unwrap() >= 0.0));
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.cfg"), "toy = 1,8,16\npattern = 2:4\nmetric = magnitude\n").unwrap();
    ok(&["prune", "--config", "run.cfg", "--out-dir", "nm"], d);
    ok(&["prune", "--config", "run.cfg", "--pattern", "0.25", "--out-dir", "u"], d);
    let nm = csv_rows(&d.join("nm/sparsity.csv"));
    assert_eq!(nm[0], ["layer", "zeros", "total", "rate", "pattern_ok"]);
    assert!(nm[1..].iter().all(|r| r[3] == "0.5" && r[4] == "true"));
    let u = csv_rows(&d.join("u/sparsity.csv"));
    assert!(u[1..].iter().all(|r| r[3] == "0.25" && r[4] == "true"));
}

#[test]
fn errors_are_single_machine_readable_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = sitool(&["induce", "--lr", "fast"], d);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error kind=config key=si.lr "));

    fs::write(d.join("bad.cfg"), "pattern = 0.5\nsi.lambdaa = 1\n").unwrap();
    let out = sitool(&["prune", "--config", "bad.cfg"], d);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error kind=config key=si.lambdaa "));

    let out = sitool(&["prune", "--pattern", "3:2"], d);
    assert!(stderr_line(&out).starts_with("error kind=config key=pattern "));

    let out = sitool(&["induce", "--si", "off"], d);
    assert!(stderr_line(&out).starts_with("error kind=config key=si.stage "));

    let out = sitool(&["prune", "--model", "missing.sif"], d);
    assert!(stderr_line(&out).starts_with("error kind=io "));

    fs::write(d.join("junk.sif"), b"SIF2\0\0\0\0").unwrap();
    let out = sitool(&["prune", "--model", "junk.sif"], d);
    assert!(stderr_line(&out).starts_with("error kind=format "));

    ok(&["make-toy", "--toy", "1,8,16", "--out-dir", "t8"], d);
    let out = sitool(&["prune", "--model", "t8/model.sif", "--pattern", "2:3"], d);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error kind=pattern "));

    let out = Command::new(env!("CARGO_BIN_EXE_sitool"))
        .args(["bench"])
        .current_dir(d)
        .env("SI_THREADS", "zero")
        .output()
        .unwrap();
    assert!(stderr_line(&out).starts_with("error kind=config key=SI_THREADS "));
}
