//! Command-line contracts, exercised through the built binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use l2gnet::data::{generate, load_dataset, save_dataset, GenConfig};
use l2gnet::segmodel::{model_from_checkpoint, Checkpoint};

fn l2g(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l2g"))
        .args(args)
        .current_dir(dir)
        .env("L2G_THREADS", "1")
        .output()
        .expect("spawn l2g")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, name: &str, count: usize, seed: u64) -> PathBuf {
    let (c, s) = (count.to_string(), seed.to_string());
    let o = l2g(&["gen-data", "--classes", "3", "--count", &c, "--hw", "32", "--seed", &s, "--out", name], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join(name)
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const SMOKE: &str = r#"{"train_data": "train.l2gs", "val_data": "val.l2gs", "output_dir": "out",
  "epochs": 1, "batch_size": 4, "model": {"codebook_size": 16}}"#;

fn smoke_run(dir: &Path) {
    gen(dir, "train.l2gs", 8, 1);
    gen(dir, "val.l2gs", 4, 2);
    write_config(dir, "run.json", SMOKE);
    let o = l2g(&["train", "--config", "run.json"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn gen_data_writes_a_loadable_reproducible_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = gen(dir.path(), "a.l2gs", 8, 7);
    let ds = load_dataset(&p).unwrap();
    assert_eq!(ds.len(), 8);
    assert_eq!(ds.manifest.split, "a");
    let first = fs::read(&p).unwrap();
    gen(dir.path(), "a.l2gs", 8, 7);
    assert_eq!(fs::read(&p).unwrap(), first);
}

#[test]
fn gen_data_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = l2g(&["gen-data", "--hw", "4", "--out", "x.l2gs"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("too small"), "{}", stderr(&o));
    let o = l2g(&["gen-data", "--count", "2", "--out", "missing/dir/x.l2gs"], dir.path());
    assert_eq!(code(&o), 2);
    let o = l2g(&["gen-data", "--bogus-flag"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn train_smoke_then_resume_continues_the_epoch_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    smoke_run(d);
    assert!(d.join("out/checkpoint.l2gc").is_file());
    let log = read_csv(&d.join("out/train_log.csv"));
    assert_eq!(log[0], ["epoch", "train_loss", "val_dsc_mean", "val_hd_mean", "wall_seconds"]);
    assert_eq!(log.len(), 2);
    assert_eq!(log[1][0], "1");

    fs::copy(d.join("out/checkpoint.l2gc"), d.join("e1.l2gc")).unwrap();
    let o = l2g(&["train", "--config", "run.json", "--resume", "e1.l2gc"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = read_csv(&d.join("out/train_log.csv"));
    assert_eq!(log.len(), 3);
    assert_eq!(log[2][0], "2");
    let ckpt = Checkpoint::load(&d.join("out/checkpoint.l2gc")).unwrap();
    assert_eq!(ckpt.header.epoch, 2);
}

#[test]
fn invalid_configs_exit_with_usage_code_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "train.l2gs", 2, 1);
    write_config(d, "bad.json", r#"{"train_data": "train.l2gs", "epochz": 1}"#);
    let o = l2g(&["train", "--config", "bad.json"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));

    write_config(d, "nested.json", r#"{"train_data": "train.l2gs", "model": {"sinkhorn_iterations": 5}}"#);
    let o = l2g(&["train", "--config", "nested.json"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("sinkhorn_iterations"));

    write_config(d, "nodata.json", r#"{"train_data": "absent.l2gs"}"#);
    let o = l2g(&["train", "--config", "nodata.json"], d);
    assert_eq!(code(&o), 2);
    assert!(!d.join("run").exists(), "no work before path validation");

    write_config(d, "strategy.json", r#"{"train_data": "train.l2gs", "model": {"merge": "concat"}}"#);
    let o = l2g(&["train", "--config", "strategy.json"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("residual"), "alternatives listed: {}", stderr(&o));
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "train.l2gs", 4, 1);
    write_config(d, "run.json", r#"{"train_data": "train.l2gs", "epochs": 3, "lr": 1e200, "batch_size": 2}"#);
    let o = l2g(&["train", "--config", "run.json"], d);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn eval_is_deterministic_and_consistent_with_the_training_log() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "train.l2gs", 8, 1);
    write_config(
        d,
        "run.json",
        r#"{"train_data": "train.l2gs", "val_data": "train.l2gs", "output_dir": "out", "epochs": 2, "batch_size": 4}"#,
    );
    assert_eq!(code(&l2g(&["train", "--config", "run.json"], d)), 0);
    let logged: f64 = read_csv(&d.join("out/train_log.csv"))[2][2].parse().unwrap();

    let run = |name: &str| {
        let o = l2g(&["eval", "--ckpt", "out/checkpoint.l2gc", "--data", "train.l2gs", "--out", name], d);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("DSC"));
        fs::read(d.join(name)).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));
    let rows = read_csv(&d.join("a.csv"));
    let last = rows.last().unwrap();
    assert_eq!(last[0], "mean");
    let dsc: f64 = last[1].parse().unwrap();
    assert!(dsc >= logged - 0.02, "{dsc} vs logged {logged}");
}

#[test]
fn eval_marks_distance_undefined_for_an_absent_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    smoke_run(d);
    let mut ds = generate(&GenConfig::new(3, 3, 32, 5), "noclass").unwrap();
    for s in &mut ds.samples {
        s.labels.iter_mut().filter(|l| **l == 2).for_each(|l| *l = 0);
    }
    save_dataset(&ds, &d.join("noclass.l2gs")).unwrap();
    let o = l2g(&["eval", "--ckpt", "out/checkpoint.l2gc", "--data", "noclass.l2gs", "--out", "m.csv"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_csv(&d.join("m.csv"));
    let hd2 = rows[0].iter().position(|h| h == "hd_2").unwrap();
    let dsc2 = rows[0].iter().position(|h| h == "dsc_2").unwrap();
    for r in &rows[1..rows.len() - 1] {
        let pred_has_class = r[dsc2] != "1";
        if !pred_has_class {
            assert_eq!(r[hd2], "undefined");
        }
        assert!(r[hd2] == "undefined", "gt mask is empty so HD is undefined: {r:?}");
    }
}

#[test]
fn eval_shape_mismatch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    smoke_run(d);
    let o = l2g(&["gen-data", "--count", "2", "--hw", "16", "--out", "small.l2gs"], d);
    assert_eq!(code(&o), 0);
    let o = l2g(&["eval", "--ckpt", "out/checkpoint.l2gc", "--data", "small.l2gs"], d);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    for seed in ["0", "1"] {
        let o = l2g(&["gradcheck", "--scale", "tiny", "--seed", seed], dir.path());
        assert_eq!(code(&o), 0, "{}", stdout(&o));
        assert_eq!(stdout(&o).matches("PASS").count(), 3);
    }
    let o = l2g(&["gradcheck", "--inject-fault"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn inspect_dumps_consistent_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    smoke_run(d);
    let o = l2g(&["inspect", "--ckpt", "out/checkpoint.l2gc", "--data", "val.l2gs", "--sample", "1", "--out", "insp"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let model = model_from_checkpoint(&Checkpoint::load(&d.join("out/checkpoint.l2gc")).unwrap()).unwrap();
    let cfg = &model.config;
    let n = cfg.codes();

    for r in 0..cfg.references {
        let plan = read_csv(&d.join(format!("insp/plan_ref{r}.csv")));
        assert_eq!(plan.len(), n);
        let vals: Vec<Vec<f64>> = plan.iter().map(|row| row.iter().map(|v| v.parse().unwrap()).collect()).collect();
        for row in &vals {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0 / n as f64).abs() < 0.05 / n as f64, "row sum {s}");
        }
        for j in 0..cfg.bins {
            let s: f64 = vals.iter().map(|row| row[j]).sum();
            assert!((s - 1.0 / cfg.bins as f64).abs() < 1e-12);
        }
    }
    let usage = read_csv(&d.join("insp/usage.csv"));
    let total: usize = usage[1..].iter().map(|r| r[1].parse::<usize>().unwrap()).sum();
    assert_eq!(total, n);
    let positions = read_csv(&d.join("insp/positions.csv"));
    assert_eq!((positions.len(), positions[0].len()), (n, cfg.bins));

    let ds = load_dataset(&d.join("val.l2gs")).unwrap();
    let expected = model.predict(&ds.samples[1].image).unwrap();
    let grid: Vec<u8> = read_csv(&d.join("insp/prediction.csv"))
        .iter()
        .flatten()
        .map(|v| v.parse::<f64>().unwrap() as u8)
        .collect();
    assert_eq!(grid, expected);

    let o = l2g(&["inspect", "--ckpt", "out/checkpoint.l2gc", "--data", "val.l2gs", "--sample", "99", "--out", "x"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_reports_residuals_and_timings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = l2g(&["bench", "--sizes", "1", "--bins", "1", "--repeats", "1", "--out", "trivial.csv"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_csv(&d.join("trivial.csv"));
    assert_eq!(rows[0], ["n", "t", "epsilon", "iterations", "seconds", "marginal_residual"]);
    assert_eq!(rows[1][5].parse::<f64>().unwrap(), 0.0);

    let o = l2g(&["bench", "--sizes", "128", "--iters", "1,10,200", "--repeats", "1", "--out", "it.csv"], d);
    assert_eq!(code(&o), 0);
    let res: Vec<f64> = read_csv(&d.join("it.csv"))[1..].iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(res.windows(2).all(|w| w[1] <= w[0]), "{res:?}");

    let o = l2g(&["bench", "--sizes", "0"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn deterministic_training_reproduces_every_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "train.l2gs", 6, 3);
    let body = |out: &str| {
        format!(r#"{{"train_data": "train.l2gs", "val_data": "train.l2gs", "output_dir": "{out}", "epochs": 2, "batch_size": 3}}"#)
    };
    for out in ["r1", "r2"] {
        write_config(d, &format!("{out}.json"), &body(out));
        let o = l2g(&["--deterministic", "train", "--config", &format!("{out}.json")], d);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(d.join("r1/checkpoint.l2gc")).unwrap(), fs::read(d.join("r2/checkpoint.l2gc")).unwrap());
    // wall_seconds is a measurement; every other column must match
    let strip = |p: &str| -> Vec<Vec<String>> {
        read_csv(&d.join(p)).into_iter().map(|mut r| {
            r.pop();
            r
        }).collect()
    };
    assert_eq!(strip("r1/train_log.csv"), strip("r2/train_log.csv"));
}
