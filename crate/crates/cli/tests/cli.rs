use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_clap-pretrain");

const TINY: &str = r#"
seed = 2
epochs = 2
steps_per_epoch = 2
n_lidar = 16
n_pixels = 4
n_samples = 8
warmup = 1

[scenes]
count = 2
objects = 2

[grid]
dims = [8, 8, 4]
"#;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("CLAP_SEED")
        .output()
        .expect("binary runs")
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), TINY).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let dir = tiny_dir();
    let o = run(&["pretrain", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_1() {
    let dir = tiny_dir();
    for args in [
        &["pretrain", "--config", "c.toml", "--mode", "bogus", "--out", "o"][..],
        &["pretrain", "--config", "c.toml", "--lr", "-1", "--out", "o"],
        &["pretrain", "--config", "c.toml", "--set", "no_such_key=1", "--out", "o"],
        &["pretrain", "--config", "missing.toml", "--out", "o"],
        &["probe", "--ckpt", "nothing_here"],
    ] {
        let o = run(args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn numerical_abort_exits_2() {
    let dir = tiny_dir();
    let o = run(&["pretrain", "--config", "c.toml", "--set", "h0=1e308", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}

#[test]
fn gen_scene_writes_sensor_files() {
    let dir = tiny_dir();
    let o = run(&["gen-scene", "--seed", "4", "--objects", "3", "--out", "s"], dir.path());
    assert!(o.status.success());
    for f in ["scene.json", "cloud.ply", "cloud_gt.csv", "calib.json", "cam0.ppm", "cam1_gt.csv"] {
        assert!(dir.path().join("s").join(f).exists(), "{f}");
    }
}

#[test]
fn pretrain_then_inspect() {
    let dir = tiny_dir();
    let o = run(&["pretrain", "--config", "c.toml", "--mode", "full", "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = dir.path().join("run");
    for f in ["train_log.csv", "ckpt_epoch001.json", "ckpt_epoch002.bin", "config.toml"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.lines().nth(1).unwrap().ends_with("uniform"));
    assert!(log.lines().nth(3).unwrap().ends_with("curvature"));

    let o = run(
        &["probe", "--ckpt", "run/ckpt_epoch002", "--iterations", "20", "--train-scenes", "1", "--test-scenes", "1"],
        dir.path(),
    );
    assert!(o.status.success());
    let table = stdout(&o);
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["metric", "value"]);
    assert!(rows.iter().all(|r| r.len() == 2));
    let acc: f64 = rows[1][1].parse().unwrap();
    assert_eq!(rows[1][0], "accuracy");
    assert!((0.0..=1.0).contains(&acc));
    let again = run(
        &["probe", "--ckpt", "run/ckpt_epoch002.json", "--iterations", "20", "--train-scenes", "1", "--test-scenes", "1"],
        dir.path(),
    );
    assert_eq!(stdout(&again), table);

    let o = run(&["render-debug", "--ckpt", "run/ckpt_epoch002", "--scene", "9", "--out", "dbg", "--dump-tape"], dir.path());
    assert!(o.status.success());
    for f in ["view0_depth.ppm", "view1_rgb.ppm", "view0_opacity.ppm", "tape.json"] {
        assert!(dir.path().join("dbg").join(f).exists(), "{f}");
    }
    let tape = std::fs::read_to_string(dir.path().join("dbg/tape.json")).unwrap();
    assert!(tape.trim_start().starts_with('[') && tape.contains("\"op\""));

    for (cmd, file) in [("export-curvature", "heat.ply"), ("export-protos", "protos.ply")] {
        let o = run(&[cmd, "--ckpt", "run/ckpt_epoch002", "--scene", "9", "--out", file], dir.path());
        assert!(o.status.success(), "{cmd}");
        let ply = std::fs::read_to_string(dir.path().join(file)).unwrap();
        assert!(ply.starts_with("ply\n") && ply.contains("property uchar red"));
    }
}

#[test]
fn resume_continues_a_stopped_run() {
    let dir = tiny_dir();
    let full = run(&["pretrain", "--config", "c.toml", "--out", "a"], dir.path());
    assert!(full.status.success());
    let short = run(&["pretrain", "--config", "c.toml", "--epochs", "1", "--out", "b"], dir.path());
    assert!(short.status.success());
    // a one-epoch run has its own schedule, so only the shared first step matches
    let a = std::fs::read_to_string(dir.path().join("a/train_log.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b/train_log.csv")).unwrap();
    assert_eq!(a.lines().nth(1), b.lines().nth(1));

    let o = run(&["pretrain", "--resume", "a/ckpt_epoch001", "--out", "c"], dir.path());
    assert!(o.status.success());
    let c = std::fs::read_to_string(dir.path().join("c/train_log.csv")).unwrap();
    let tail: Vec<&str> = a.lines().skip(3).collect();
    assert_eq!(c.lines().skip(1).collect::<Vec<_>>(), tail);
}

#[test]
fn seed_variable_changes_the_run() {
    let dir = tiny_dir();
    let seeded = |seed: &str, out: &str| {
        let o = Command::new(BIN)
            .args(["pretrain", "--config", "c.toml", "--epochs", "1", "--out", out])
            .current_dir(dir.path())
            .env("CLAP_SEED", seed)
            .output()
            .unwrap();
        assert!(o.status.success());
        std::fs::read_to_string(dir.path().join(out).join("config.toml")).unwrap()
    };
    assert!(seeded("77", "x").contains("seed = 77"));
    let o = Command::new(BIN)
        .args(["pretrain", "--config", "c.toml", "--out", "y"])
        .current_dir(dir.path())
        .env("CLAP_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn selfcheck_passes() {
    let dir = tiny_dir();
    let o = run(&["selfcheck", "--scratch", "sc"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS ")).count(), 6);
}
