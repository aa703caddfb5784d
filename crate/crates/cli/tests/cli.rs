use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_sparsescape");

fn idx(magic_type: u8, dims: &[u32], data: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, magic_type, dims.len() as u8];
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(data);
    b
}

/// 28x28 images whose label decides which horizontal band is lit, plus a little per-sample texture.
fn write_split(dir: &Path, stem: &str, n: usize, offset: usize) {
    let mut images = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = ((i + offset) % 10) as u8;
        labels.push(label);
        for r in 0..28 {
            for c in 0..28 {
                let band = r / 3 == label as usize;
                let noise = ((i * 31 + r * 7 + c * 13) % 40) as u8;
                images.push(if band { 200 + noise / 2 } else { noise });
            }
        }
    }
    fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), idx(0x08, &[n as u32, 28, 28], &images)).unwrap();
    fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), idx(0x08, &[n as u32], &labels)).unwrap();
}

fn dataset(dir: &Path) -> PathBuf {
    let d = dir.join("data");
    fs::create_dir_all(&d).unwrap();
    write_split(&d, "train", 300, 0);
    write_split(&d, "t10k", 100, 3);
    d
}

fn run<S: AsRef<std::ffi::OsStr>>(data: &Path, args: &[S]) -> Output {
    Command::new(BIN)
        .env_remove("SPARSESCAPE_DATA")
        .arg("--threads")
        .arg("1")
        .arg("--data")
        .arg(data)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

const SMALL: [&str; 6] = ["--set", "train.epochs=2", "--set", "train.batch_size=20", "--set", "train.learning_rate=0.05"];

fn small(head: &[&str]) -> Vec<String> {
    head.iter().chain(SMALL.iter()).map(|s| s.to_string()).collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn full_pipeline_writes_declared_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let p = |s: &str| tmp.path().join(s).display().to_string();

    ok(&run(&data, &small(&["train", "-o", &p("dense")])));
    let m = manifest(&tmp.path().join("dense"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["train"]["epochs"], 2);
    for rec in m["outputs"].as_array().unwrap() {
        let bytes = fs::read(tmp.path().join("dense").join(rec["path"].as_str().unwrap())).unwrap();
        assert_eq!(rec["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
    assert!(m["summary"]["final_test_accuracy"].as_f64().unwrap() > 0.5);

    let dense_final = p("dense/final.ssck");
    let dense_init = p("dense/init.ssck");
    ok(&run(&data, &small(&["prune", "-o", &p("os"), "--method", "oneshot", "--trained", &dense_final, "--fraction", "0.8"])));
    assert!((manifest(&tmp.path().join("os"))["summary"]["compression_weights"].as_f64().unwrap() - 0.8).abs() < 1e-3);

    let gradual = small(&[
        "prune", "-o", &p("gr"), "--method", "gradual", "--init", &dense_final,
        "--set", "prune.schedule.interval_steps=3", "--set", "prune.schedule.target=0.8",
        "--set", "prune.schedule.finetune_epochs=1", "--set", "prune.schedule.tolerance=1.0",
    ]);
    ok(&run(&data, &gradual));
    let traj = fs::read_to_string(tmp.path().join("gr/trajectory.csv")).unwrap();
    let comp: Vec<f64> = traj.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(comp.windows(2).all(|w| w[1] >= w[0]));

    ok(&run(&data, &small(&["retrain", "-o", &p("rw"), "--mask", &p("os/mask.ssmk"), "--init", &dense_init, "--strategy", "rewind"])));
    ok(&run(&data, &small(&["retrain", "-o", &p("rs"), "--mask", &p("os/mask.ssmk"), "--init", &dense_init, "--strategy", "random-structure"])));
    assert_ne!(fs::read(p("rs/mask.ssmk")).unwrap(), fs::read(p("os/mask.ssmk")).unwrap());

    let plane = small(&[
        "plane", "-o", &p("pl"), "--a", &p("gr/final.ssck"), "--b", &p("rw/final.ssck"),
        "--set", "plane.steps=3", "--set", "plane.fields=[\"train_loss\",\"test_error\",\"psp_entropy_2\"]",
        "--set", "psp.pairs_per_layer=50",
    ]);
    ok(&run(&data, &plane));
    for f in ["grid_train_loss.csv", "grid_test_error.png", "grid_psp_entropy_2.csv", "plane.json"] {
        assert!(tmp.path().join("pl").join(f).exists(), "{f}");
    }
    let grid = fs::read_to_string(tmp.path().join("pl/grid_train_loss.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 9);

    ok(&run(&data, &small(&["hessian", "-o", &p("h"), "--checkpoint", &dense_final, "--set", "hessian.k=2", "--set", "hessian.subset=64"])));
    let eig = fs::read_to_string(tmp.path().join("h/eigenvalues.csv")).unwrap();
    assert_eq!(eig.lines().count(), 3);

    ok(&run(&data, &small(&["psp", "-o", &p("psp"), "--checkpoint", &dense_final, "--set", "psp.pairs_per_layer=50"])));
    let h1 = fs::read_to_string(tmp.path().join("psp/entropy_order1.csv")).unwrap();
    assert!(h1.starts_with("layer,neuron,class,H\n"));

    let analyze = small(&[
        "analyze", "-o", &p("an"), "--gradual", &p("gr/final.ssck"), "--oneshot", &p("rw/final.ssck"),
        "--set", "hessian.k=1", "--set", "hessian.subset=64", "--set", "psp.pairs_per_layer=50",
    ]);
    ok(&run(&data, &analyze));
    let a = fs::read_to_string(tmp.path().join("an/analysis.csv")).unwrap();
    for key in ["test_accuracy", "lambda_1", "psp_l2", "entropy_1", "entropy_2"] {
        assert!(a.lines().any(|l| l.starts_with(&format!("{key},"))), "{key}");
    }

    ok(&run(&data, &["report", "-o", &p("rep"), &p("dense"), &p("gr"), &p("an")]));
    let rep = fs::read_to_string(tmp.path().join("rep/report.csv")).unwrap();
    assert!(rep.lines().any(|l| l.contains("final_test_accuracy")));
}

#[test]
fn threads_one_is_byte_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let mut digests = Vec::new();
    for rep in ["a", "b"] {
        let dir = tmp.path().join(rep);
        let d = |s: &str| dir.join(s).display().to_string();
        ok(&run(&data, &small(&["train", "-o", &d("t")])));
        ok(&run(&data, &small(&["prune", "-o", &d("p"), "--trained", &d("t/final.ssck"), "--fraction", "0.5"])));
        ok(&run(&data, &small(&["psp", "-o", &d("s"), "--checkpoint", &d("t/final.ssck"), "--set", "psp.pairs_per_layer=40"])));
        let mut files = Vec::new();
        for f in ["t/init.ssck", "t/final.ssck", "t/metrics.csv", "p/mask.ssmk", "s/entropy_order2.csv", "s/psp_l2.csv"] {
            files.push(fs::read(dir.join(f)).unwrap());
        }
        digests.push(files);
    }
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn config_and_io_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let out = tmp.path().join("o").display().to_string();
    let bad_key = run(&data, &["train", "-o", &out, "--set", "train.epoch=1"]);
    assert_eq!(bad_key.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("epoch"));

    let missing = run(&tmp.path().join("nowhere"), &["train", "-o", &out]);
    assert_eq!(missing.status.code(), Some(2));

    let no_ckpt = run(&data, &["hessian", "-o", &out, "--checkpoint", "/nonexistent.ssck"]);
    assert_eq!(no_ckpt.status.code(), Some(2));

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "model = \"lenet300\"\n[train]\nepochs = \"many\"\n").unwrap();
    let bad_file = run(&data, &["train", "-o", &out, "-c", cfg.to_str().unwrap()]);
    assert_eq!(bad_file.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_one_and_keeps_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let out = tmp.path().join("div");
    let o = run(&data, &["train", "-o", out.to_str().unwrap(), "--set", "train.epochs=3", "--set", "train.learning_rate=1e6"]);
    assert_eq!(o.status.code(), Some(1), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("manifest.json").exists());
    assert!(out.join("init.ssck").exists());
}

#[test]
fn config_file_and_overrides_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, "[train]\nepochs = 5\nbatch_size = 50\n[data]\ntrain_limit = 100\n").unwrap();
    let out = tmp.path().join("o");
    ok(&run(&data, &["train", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap(), "--set", "train.epochs=1"]));
    let m = manifest(&out);
    assert_eq!(m["config"]["train"]["epochs"], 1);
    assert_eq!(m["config"]["train"]["batch_size"], 50);
    assert_eq!(m["config"]["data"]["train_limit"], 100);
    assert_eq!(m["inputs"][0]["path"], cfg.display().to_string());
}
