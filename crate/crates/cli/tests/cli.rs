use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use densealign::embedspace::read_embedding_file;
use densealign::synthworld::Dataset;
use tempfile::TempDir;

const TINY_SPACE: &[&str] = &["--h", "4", "--w", "4", "--d-img", "8", "--n-reg", "2", "--soft-tokens", "3", "--d-cond", "8"];
const TINY_MODEL: &[&str] = &["--d-model", "16", "--n-blocks", "1", "--n-heads", "2", "--batch-size", "4"];

fn run(args: &[&str]) -> Output {
    run_env(args, &[])
}

fn run_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_densealign"));
    cmd.args(args).env_remove("GAP_SEED").env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
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

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_dataset(dir: &Path, name: &str, n: usize, flavor: &str) -> PathBuf {
    let out = dir.join(name);
    let n = n.to_string();
    let mut args = vec!["gen-data", "--n", &n, "--seed", "3", "--flavor", flavor, "--out", s(&out)];
    args.extend_from_slice(TINY_SPACE);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn tiny_checkpoint(dir: &Path, steps: usize) -> (PathBuf, PathBuf) {
    let data = tiny_dataset(dir, "d.gapd", 32, "pretrain");
    let ckpt = dir.join("c.gapc");
    let steps = steps.to_string();
    let mut args = vec!["train", "--data", s(&data), "--out", s(&ckpt), "--steps", &steps, "--seed", "1"];
    args.extend_from_slice(TINY_MODEL);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (data, ckpt)
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn gen_data_writes_requested_records() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d.gapd");
    let o = run(&["gen-data", "--n", "100", "--seed", "1", "--flavor", "pretrain", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("100"));
    assert_eq!(Dataset::read(&out).unwrap().len(), 100);
}

#[test]
fn gen_data_usage_errors() {
    let o = run(&["gen-data", "--n", "10", "--seed", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"));
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d.gapd");
    assert_eq!(code(&run(&["gen-data", "--n", "10", "--flavor", "bogus", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["gen-data", "--n", "ten", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
}

#[test]
fn finetune_flavor_is_single_object() {
    let dir = TempDir::new().unwrap();
    let d = Dataset::read(tiny_dataset(dir.path(), "f.gapd", 20, "finetune")).unwrap();
    for r in &d.records {
        assert_eq!(r.tokens.tokens.iter().filter(|&&t| t == densealign::synthworld::TOK_SEP).count(), 0);
    }
}

#[test]
fn config_file_with_flag_override() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out = dir.path().join("d.gapd");
    fs::write(&cfg, format!(r#"{{"n": 7, "seed": 4, "flavor": "finetune", "out": "{}"}}"#, s(&out))).unwrap();
    let o = run(&["--config", s(&cfg), "gen-data", "--n", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let d = Dataset::read(&out).unwrap();
    assert_eq!(d.len(), 5);
    assert_eq!(d.flavor, densealign::synthworld::Flavor::Finetune);

    fs::write(&cfg, r#"{"n": 7, "colour": "red"}"#).unwrap();
    assert_eq!(code(&run(&["--config", s(&cfg), "gen-data", "--out", s(&out)])), 2);
    fs::write(&cfg, r#"{"n": [1, 2]}"#).unwrap();
    assert_eq!(code(&run(&["--config", s(&cfg), "gen-data", "--out", s(&out)])), 2);
    fs::write(&cfg, "not json").unwrap();
    assert_eq!(code(&run(&["--config", s(&cfg), "gen-data", "--out", s(&out)])), 2);
}

#[test]
fn seed_env_sets_the_default_seed() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(code(&run_env(&["gen-data", "--n", "6", "--out", s(&a)], &[("GAP_SEED", "42")])), 0);
    assert_eq!(code(&run(&["gen-data", "--n", "6", "--seed", "42", "--out", s(&b)])), 0);
    assert_eq!(code(&run_env(&["gen-data", "--n", "6", "--seed", "41", "--out", s(&c)], &[("GAP_SEED", "42")])), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(code(&run_env(&["gen-data", "--n", "6", "--out", s(&a)], &[("GAP_SEED", "x")])), 2);
}

#[test]
fn train_writes_trace_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let data = tiny_dataset(dir.path(), "d.gapd", 32, "pretrain");
    let mut traces = Vec::new();
    for name in ["a", "b"] {
        let ckpt = dir.path().join(format!("{name}.gapc"));
        let trace = dir.path().join(format!("{name}.csv"));
        let mut args = vec!["train", "--data", s(&data), "--out", s(&ckpt), "--steps", "100", "--seed", "9", "--trace", s(&trace)];
        args.extend_from_slice(TINY_MODEL);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let text = fs::read_to_string(&trace).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,loss,lr,loss_patch,loss_cls,loss_reg");
        assert_eq!(csv_rows(&text).len(), 100);
        traces.push(text);
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn train_default_trace_path() {
    let dir = TempDir::new().unwrap();
    tiny_checkpoint(dir.path(), 3);
    let trace = dir.path().join("c.gapc.trace.csv");
    assert_eq!(csv_rows(&fs::read_to_string(trace).unwrap()).len(), 3);
}

#[test]
fn finetune_requires_init_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = tiny_dataset(dir.path(), "f.gapd", 8, "finetune");
    let o = run(&["train", "--stage", "finetune", "--data", s(&data), "--out", s(&dir.path().join("x.gapc"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&run(&["train", "--stage", "sideways", "--data", s(&data), "--out", "x"])), 2);
}

#[test]
fn finetune_from_checkpoint() {
    let dir = TempDir::new().unwrap();
    let (_, ckpt) = tiny_checkpoint(dir.path(), 5);
    let data = tiny_dataset(dir.path(), "f.gapd", 8, "finetune");
    let out = dir.path().join("ft.gapc");
    let o = run(&["train", "--stage", "finetune", "--init-ckpt", s(&ckpt), "--data", s(&data), "--out", s(&out), "--steps", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.exists());
}

#[test]
fn divergence_exits_one_naming_last_good_step() {
    let dir = TempDir::new().unwrap();
    let data = tiny_dataset(dir.path(), "d.gapd", 16, "pretrain");
    let ckpt = dir.path().join("c.gapc");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&ckpt), "--steps", "50", "--lr-max", "1e30", "--lr-min", "1e30"];
    args.extend_from_slice(TINY_MODEL);
    let o = run(&args);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("last good step"), "{}", stderr(&o));
    assert!(ckpt.exists());
}

#[test]
fn missing_dataset_is_runtime_error() {
    let dir = TempDir::new().unwrap();
    let o = run(&["train", "--data", s(&dir.path().join("none.gapd")), "--out", s(&dir.path().join("c.gapc"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn sample_eval_retrieve_pipeline() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = tiny_checkpoint(dir.path(), 5);
    let gen = dir.path().join("gen.gape");
    let gt = dir.path().join("gt.gape");
    let o = run(&["sample", "--ckpt", s(&ckpt), "--data", s(&data), "--limit", "5", "--steps", "4", "--rng-seed", "2", "--out", s(&gen), "--gt-out", s(&gt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_embedding_file(&gen).unwrap().len(), 5);
    assert_eq!(read_embedding_file(&gt).unwrap().len(), 5);

    let again = dir.path().join("again.gape");
    let o = run(&["sample", "--ckpt", s(&ckpt), "--data", s(&data), "--limit", "5", "--steps", "4", "--rng-seed", "2", "--out", s(&again)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&gen).unwrap(), fs::read(&again).unwrap());

    let o = run(&["sample", "--ckpt", s(&ckpt), "--data", s(&data), "--steps", "0", "--out", s(&again)]);
    assert_eq!(code(&o), 2);
    let o = run(&["sample", "--ckpt", s(&ckpt), "--out", s(&again)]);
    assert_eq!(code(&o), 2);
    let o = run(&["sample", "--ckpt", s(&data), "--data", s(&data), "--out", s(&again)]);
    assert_eq!(code(&o), 1);

    // Identical files score perfectly.
    let o = run(&["eval", "--gen", s(&gt), "--gt", s(&gt), "--fd", "--kd"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().next().unwrap(), "metric,component,value,count");
    let rows = csv_rows(&text);
    let mut seen = Vec::new();
    for r in &rows {
        let v: f64 = r[2].parse().unwrap();
        match r[0].as_str() {
            "cosine" | "norm_ratio" => assert!((v - 1.0).abs() < 1e-6, "{r:?}"),
            "mse" => assert_eq!(v, 0.0),
            "fd" | "kd" => assert!(v.abs() < 1e-6, "{r:?}"),
            other => panic!("unexpected metric {other}"),
        }
        assert_eq!(r[3], "5");
        seen.push((r[0].clone(), r[1].clone()));
    }
    for c in ["patch", "cls", "reg"] {
        for m in ["cosine", "mse", "norm_ratio"] {
            assert!(seen.contains(&(m.to_string(), c.to_string())), "{m} {c}");
        }
    }

    let report = dir.path().join("report.csv");
    let o = run(&["eval", "--gen", s(&gen), "--gt", s(&gt), "--out", s(&report)]);
    assert_eq!(code(&o), 0);
    assert_eq!(csv_rows(&fs::read_to_string(&report).unwrap()).len(), 9);

    let three = dir.path().join("three.gape");
    let o = run(&["sample", "--ckpt", s(&ckpt), "--data", s(&data), "--limit", "3", "--steps", "2", "--out", s(&three)]);
    assert_eq!(code(&o), 0);
    assert_eq!(code(&run(&["eval", "--gen", s(&three), "--gt", s(&gt)])), 1);

    // Retrieval against itself.
    let o = run(&["retrieve", "--queries", s(&gt), "--db", s(&gt), "--k", "1,3,5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows.len(), 6);
    for mode in ["cls", "pooled_patch"] {
        let r: Vec<f64> = rows.iter().filter(|r| r[0] == mode).map(|r| r[2].parse().unwrap()).collect();
        assert_eq!(r[0], 100.0);
        assert!(r.windows(2).all(|w| w[0] <= w[1]));
    }
    let o = run(&["retrieve", "--queries", s(&gen), "--db", s(&gt), "--mode", "cls"]);
    assert_eq!(code(&o), 2, "default k = 10 exceeds a database of 5");
    let o = run(&["retrieve", "--queries", s(&gen), "--db", s(&gt), "--mode", "cls", "--k", "1,2,5"]);
    assert_eq!(code(&o), 0);
    let r: Vec<f64> = csv_rows(&stdout(&o)).iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(r.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(r[2], 100.0);

    let ids = dir.path().join("ids.txt");
    fs::write(&ids, "4\n3\n2\n1\n0\n").unwrap();
    let o = run(&["retrieve", "--queries", s(&gt), "--db", s(&gt), "--ids", s(&ids), "--mode", "cls", "--k", "1"]);
    assert_eq!(code(&o), 0);
    let r: f64 = csv_rows(&stdout(&o))[0][2].parse().unwrap();
    assert!(r <= 20.0);
}

#[test]
fn sample_from_scene_seeds() {
    let dir = TempDir::new().unwrap();
    let (_, ckpt) = tiny_checkpoint(dir.path(), 2);
    let out = dir.path().join("s.gape");
    let gt = dir.path().join("g.gape");
    let o = run(&["sample", "--ckpt", s(&ckpt), "--scene-seeds", "1,2,3,4,5", "--steps", "3", "--out", s(&out), "--gt-out", s(&gt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_embedding_file(&out).unwrap().len(), 5);
    assert_eq!(read_embedding_file(&gt).unwrap().len(), 5);
}

#[test]
fn retrieve_corrupt_database_is_runtime_error() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = tiny_checkpoint(dir.path(), 2);
    let q = dir.path().join("q.gape");
    assert_eq!(code(&run(&["sample", "--ckpt", s(&ckpt), "--data", s(&data), "--limit", "2", "--steps", "2", "--out", s(&q)])), 0);
    let bad = dir.path().join("bad.gape");
    let bytes = fs::read(&q).unwrap();
    fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(code(&run(&["retrieve", "--queries", s(&q), "--db", s(&bad), "--k", "1"])), 1);
    assert_eq!(code(&run(&["eval", "--gen", s(&q), "--gt", s(&bad)])), 1);
}

#[test]
fn select_view_prefers_the_visible_face() {
    let dir = TempDir::new().unwrap();
    let mesh = dir.path().join("tri.obj");
    fs::write(&mesh, "v 0 -0.5 -0.5\nv 0 0.5 -0.5\nv 0 0 0.6\nf 1 2 3\n").unwrap();
    let o = run(&["select-view", "--mesh", s(&mesh), "--seed", "1", "--points", "300"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows.len(), 4);
    let chosen: Vec<&Vec<String>> = rows.iter().filter(|r| r[2] == "1").collect();
    assert_eq!(chosen.len(), 1);
    assert_eq!(chosen[0][0], "0");

    let flat = dir.path().join("flat.obj");
    fs::write(&flat, "v 0 0 0\nv 1 1 1\nv 2 2 2\nf 1 2 3\n").unwrap();
    assert_eq!(code(&run(&["select-view", "--mesh", s(&flat)])), 1);
}
