//! Exit criteria, one line each. Pass criterion numbers to run a subset,
//! e.g. `cargo test --release --test acceptance -- 3 5`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use clap_core::curvsample::CurvatureWeights;
use clap_core::protolearn::{mean_prototype_cosine, PROTO_PARAM};
use clap_core::selfcheck::{self, gradient_suite, summarize, GRAD_LOSSES};
use clap_core::synthscene::{simulate_lidar, SceneSample};
use clap_core::trainer::{
    ablation_mode, init_params, linear_probe, range_error, scene_field, AblationMode, ProbeConfig, TrainConfig,
    Trainer, LOG_FILE,
};
use clap_core::Result;

const BIN: &str = env!("CARGO_BIN_EXE_clap-pretrain");

struct Outcome {
    passed: bool,
    detail: String,
    limit: Option<Duration>,
}

fn outcome(passed: bool, detail: String, limit_s: Option<u64>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail,
        limit: limit_s.map(Duration::from_secs),
    })
}

fn gradients() -> Result<Outcome> {
    let mut ok = true;
    let mut parts = Vec::new();
    let suite = gradient_suite(0, 10)?;
    for (loss, checks) in &suite {
        let (share, worst) = summarize(checks, 1e-4);
        ok &= share >= 0.99 && worst <= 1e-3;
        parts.push(format!("{loss} {:.1}%/{worst:.1e}", 100.0 * share));
    }
    ok &= suite.len() == GRAD_LOSSES.len();
    let n = suite.first().map_or(0, |s| s.1.len());
    outcome(ok, format!("{n} coords per loss: {}", parts.join(" ")), Some(60))
}

fn curvature() -> Result<Outcome> {
    let (oracle, oracle_detail) = selfcheck::curvature_oracle()?;
    let mut cfg = ablation_mode(&TrainConfig::default(), AblationMode::JointUniform)?;
    cfg.scenes.count = 1;
    cfg.epochs = 1;
    cfg.steps_per_epoch = Some(500);
    cfg.n_lidar = 128;
    cfg.n_pixels = 32;
    let sample = SceneSample::capture(0, selfcheck::sphere_on_plane()?, &cfg.rig)?;
    let mut t = Trainer::with_scenes(cfg.clone(), vec![sample.clone()])?;
    t.run_epoch()?;
    let field = scene_field(&t.params, &sample, &cfg, Some(&t.eval_mask(0)?))?;
    let w = CurvatureWeights::compute(
        &field,
        &sample.cloud,
        &sample.frames,
        cfg.curvature_mode,
        0,
        cfg.k_gaus,
        cfg.sigma_blur,
    )?;
    let mean_of = |on_sphere: bool| {
        let v: Vec<f64> = (0..sample.cloud.len())
            .filter(|&i| (sample.cloud.primitive_id[i] == 1) == on_sphere)
            .map(|i| w.points[i])
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let ratio = mean_of(true) / mean_of(false);
    outcome(
        oracle && ratio >= 2.0,
        format!("{oracle_detail}; trained sphere:plane weight ratio {ratio:.2}"),
        Some(300),
    )
}

fn rendering() -> Result<Outcome> {
    let (ok, detail) = selfcheck::rendering_fixture()?;
    outcome(ok, detail, None)
}

fn field_fitting() -> Result<Outcome> {
    let mut cfg = ablation_mode(&TrainConfig::default(), AblationMode::JointUniform)?;
    cfg.scenes.count = 1;
    cfg.epochs = 1;
    cfg.steps_per_epoch = Some(2000);
    cfg.n_lidar = 128;
    cfg.n_pixels = 32;
    let mut t = Trainer::new(cfg.clone())?;
    // rays interleaved with the training azimuths
    let mut spec = cfg.rig.lidar.clone();
    spec.azimuth_offset_deg = 180.0 / spec.azimuth_steps as f64;
    let held = simulate_lidar(&t.scenes[0].scene, &spec);
    let mask = t.eval_mask(0)?;
    let e0 = range_error(&t.params, &t.scenes[0], &held, &cfg, Some(&mask))?;
    t.run_epoch()?;
    let e1 = range_error(&t.params, &t.scenes[0], &held, &cfg, Some(&mask))?;
    outcome(
        e1 <= 0.5 * e0,
        format!("held-out |r - r~| {e0:.3} -> {e1:.3} m ({:.0}% lower) on {} rays", 100.0 * (1.0 - e1 / e0), held.len()),
        Some(600),
    )
}

fn prototypes() -> Result<Outcome> {
    let (ok, detail) = selfcheck::prototype_fixture()?;
    outcome(ok, detail, None)
}

fn collapse_run(w_gmm: f64) -> Result<f64> {
    let mut cfg = TrainConfig::default();
    cfg.scenes.count = 4;
    cfg.lr = 3e-2;
    cfg.epochs = 10;
    cfg.steps_per_epoch = Some(20);
    cfg.curvature_sampling = false;
    cfg.n_lidar = 16;
    cfg.n_pixels = 8;
    cfg.n_samples = 8;
    cfg.proto.n_k = 32;
    cfg.proto.w_em = 1.0;
    cfg.proto.w_gmm = w_gmm;
    let mut t = Trainer::new(cfg)?;
    for _ in 0..10 {
        t.run_epoch()?;
    }
    Ok(mean_prototype_cosine(t.params.get(PROTO_PARAM)?))
}

fn anti_collapse() -> Result<Outcome> {
    let with = collapse_run(0.1)?;
    let without = collapse_run(0.0)?;
    outcome(
        with < 0.5 && without > 0.9,
        format!("mean off-diagonal cosine after 200 steps: w_GMM=0.1 {with:.3} (< 0.5), w_GMM=0 {without:.3} (> 0.9)"),
        Some(300),
    )
}

fn pretrain_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.seed = seed;
    c.epochs = 8;
    c.steps_per_epoch = Some(100);
    c.n_lidar = 128;
    c.n_pixels = 32;
    c
}

fn pretraining_benefit() -> Result<Outcome> {
    let modes = [AblationMode::Full, AblationMode::JointCurvature, AblationMode::JointUniform];
    let probe = ProbeConfig::default();
    let mut acc = [[0.0; 3]; 4];
    for (s, seed) in [0u64, 1, 2].into_iter().enumerate() {
        let base = pretrain_config(seed);
        acc[3][s] = linear_probe(&init_params(&base)?, &base, &probe)?.accuracy;
        for (m, mode) in modes.iter().enumerate() {
            let cfg = ablation_mode(&base, *mode)?;
            let mut t = Trainer::new(cfg.clone())?;
            while t.epoch < cfg.epochs {
                t.run_epoch()?;
            }
            acc[m][s] = linear_probe(&t.params, &cfg, &probe)?.accuracy;
        }
    }
    let mean: Vec<f64> = acc.iter().map(|a| a.iter().sum::<f64>() / 3.0).collect();
    let (full, jc, ju, random) = (mean[0], mean[1], mean[2], mean[3]);
    let ok = full >= jc && jc >= ju && full - random >= 0.02;
    let fmt = |a: &[f64; 3]| format!("{:.4}/{:.4}/{:.4}", a[0], a[1], a[2]);
    outcome(
        ok,
        format!(
            "seed-mean accuracy full {full:.4} joint-curvature {jc:.4} joint-uniform {ju:.4} random {random:.4} \
             (gap {:+.2} pts); per seed full {} jc {} ju {} random {}",
            100.0 * (full - random),
            fmt(&acc[0]),
            fmt(&acc[1]),
            fmt(&acc[2]),
            fmt(&acc[3])
        ),
        Some(3600),
    )
}

fn pretrain(args: &[&str], dir: &Path) -> bool {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("CLAP_SEED")
        .status()
        .is_ok_and(|s| s.success())
}

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    let toml = "seed = 11\nepochs = 3\nsteps_per_epoch = 4\nwarmup = 1\nn_lidar = 64\nn_pixels = 16\n\
                n_samples = 16\n[scenes]\ncount = 3\n";
    std::fs::write(d.join("c.toml"), toml)?;
    let ran = pretrain(&["pretrain", "--config", "c.toml", "--mode", "full", "--out", "a"], d)
        && pretrain(&["pretrain", "--config", "c.toml", "--mode", "full", "--out", "b"], d)
        && pretrain(&["pretrain", "--resume", "a/ckpt_epoch001", "--out", "c"], d);
    if !ran {
        return outcome(false, "a pretrain invocation failed".into(), None);
    }
    let read = |p: &str| std::fs::read(d.join(p));
    let logs_equal = read(&format!("a/{LOG_FILE}"))? == read(&format!("b/{LOG_FILE}"))?;
    let a_log = std::fs::read_to_string(d.join("a").join(LOG_FILE))?;
    let c_log = std::fs::read_to_string(d.join("c").join(LOG_FILE))?;
    let tail: Vec<&str> = a_log.lines().skip(5).collect();
    let resumed_rows: Vec<&str> = c_log.lines().skip(1).collect();
    let trajectory = !tail.is_empty() && tail == resumed_rows;
    let final_ckpt = read("a/ckpt_epoch003.bin")? == read("c/ckpt_epoch003.bin")?
        && read("a/ckpt_epoch003.json")? == read("c/ckpt_epoch003.json")?;
    outcome(
        logs_equal && trajectory && final_ckpt,
        format!(
            "identical logs {logs_equal}; resumed rows match {trajectory} ({} rows); final checkpoint identical {final_ckpt}",
            resumed_rows.len()
        ),
        None,
    )
}

type Criterion = (usize, &'static str, fn() -> Result<Outcome>);

const CRITERIA: [Criterion; 8] = [
    (1, "gradient suite", gradients),
    (2, "curvature oracle", curvature),
    (3, "rendering fixture", rendering),
    (4, "field fitting", field_fitting),
    (5, "prototype losses", prototypes),
    (6, "anti-collapse", anti_collapse),
    (7, "pre-training benefit", pretraining_benefit),
    (8, "determinism", determinism),
];

fn main() {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, name, run) in CRITERIA {
        if !picked.is_empty() && !picked.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        let (passed, detail) = match result {
            Ok(o) => {
                let in_time = o.limit.is_none_or(|l| took <= l);
                let mut d = o.detail;
                if !in_time {
                    d += &format!("; over the {}s budget", o.limit.map_or(0, |l| l.as_secs()));
                }
                (o.passed && in_time, d)
            }
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "criterion {n} {name}: {} ({detail}) [{:.1}s]",
            if passed { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        if !passed {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
