use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clap_core::diffengine::ParamSet;
use clap_core::selfcheck;
use clap_core::synthscene::SceneSample;
use clap_core::trainer::{
    ablation_mode, export_curvature, export_prototypes, export_views, init_params, linear_probe, loss_tape_json,
    resume, train, AblationMode, Checkpoint, ProbeConfig, TrainConfig,
};
use clap_core::{Error, Result};

/// Desk-scale joint LiDAR/camera pre-training.
#[derive(Parser, Debug)]
#[command(name = "clap-pretrain", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate one synthetic scene with its sensor data.
    GenScene {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        objects: usize,
        #[arg(long)]
        out: PathBuf,
        /// Config supplying the rig and world bounds.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Pre-train, writing the log and one checkpoint per epoch under --out.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// separate | joint-uniform | joint-curvature | full
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint (path with or without extension).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe of frozen fused features; prints a CSV table.
    Probe {
        /// Checkpoint to evaluate.
        #[arg(long, required_unless_present = "random")]
        ckpt: Option<PathBuf>,
        /// Evaluate freshly initialized parameters of the config instead.
        #[arg(long)]
        random: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        train_scenes: Option<usize>,
        #[arg(long)]
        test_scenes: Option<usize>,
    },
    /// Render the learned field through the rig cameras.
    RenderDebug {
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene seed.
        #[arg(long)]
        scene: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the tape of one loss evaluation as JSON.
        #[arg(long)]
        dump_tape: bool,
    },
    /// LiDAR points coloured blue→red by curvature weight.
    ExportCurvature {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// LiDAR points coloured by the prototype assigned to their cell.
    ExportProtos {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant suite.
    Selfcheck {
        /// Directory for the temporary training runs.
        #[arg(long)]
        scratch: Option<PathBuf>,
    },
}

/// Config file plus overrides. Precedence: file, then `CLAP_SEED`, then flags.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set proto.n_k=32` (value in TOML syntax).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut table: toml::Table = toml::from_str(&text).map_err(Error::from)?;
        for kv in &self.set {
            set_key(&mut table, kv)?;
        }
        let mut cfg = TrainConfig::from_toml(&table.to_string())?;
        cfg.apply_env()?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.steps_per_epoch {
            cfg.steps_per_epoch = Some(s);
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_key(table: &mut toml::Table, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{kv}` is not KEY=VALUE")))?;
    // bare words are taken as strings
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::invalid(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(&path.with_extension(""))?;
    ckpt.check_compatible()?;
    Ok(ckpt)
}

fn scene_of(cfg: &TrainConfig, seed: u64) -> Result<SceneSample> {
    SceneSample::generate(seed, cfg.scenes.objects, cfg.grid.bounds, &cfg.rig)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenScene {
            seed,
            objects,
            out,
            config,
            set,
        } => {
            let c = ConfigArgs {
                config,
                set,
                ..Default::default()
            }
            .load()?;
            let sample = SceneSample::generate(seed, objects, c.grid.bounds, &c.rig)?;
            sample.export(&out)?;
            println!("scene {seed}: {} objects, {} LiDAR returns -> {}", objects, sample.cloud.len(), out.display());
        }
        Cmd::Pretrain { cfg, mode, out, resume: from } => {
            let ckpt = match from {
                Some(stem) => resume(&stem.with_extension(""), &out)?,
                None => {
                    let mode: AblationMode = mode.parse()?;
                    let c = ablation_mode(&cfg.load()?, mode)?;
                    std::fs::create_dir_all(&out)?;
                    std::fs::write(out.join("config.toml"), c.to_toml()?)?;
                    train(&c, &out)?
                }
            };
            println!("trained {} epochs / {} steps -> {}", ckpt.epoch, ckpt.step, out.display());
        }
        Cmd::Probe {
            ckpt,
            random,
            cfg,
            iterations,
            train_scenes,
            test_scenes,
        } => {
            let (params, c): (ParamSet, TrainConfig) = match (&ckpt, random) {
                (Some(p), false) => {
                    let k = load_ckpt(p)?;
                    (k.params, k.config)
                }
                _ => {
                    let c = match &ckpt {
                        Some(p) => load_ckpt(p)?.config,
                        None => cfg.load()?,
                    };
                    (init_params(&c)?, c)
                }
            };
            let mut probe = ProbeConfig::default();
            if let Some(n) = iterations {
                probe.iterations = n;
            }
            if let Some(n) = train_scenes {
                probe.train.count = n;
            }
            if let Some(n) = test_scenes {
                probe.test.count = n;
            }
            print!("{}", linear_probe(&params, &c, &probe)?.to_csv());
        }
        Cmd::RenderDebug {
            ckpt,
            scene,
            out,
            dump_tape,
        } => {
            let k = load_ckpt(&ckpt)?;
            let sample = scene_of(&k.config, scene)?;
            let views = export_views(&k.params, &sample, &k.config, &out)?;
            if dump_tape {
                std::fs::write(out.join("tape.json"), loss_tape_json(&k.params, &sample, &k.config)?)?;
            }
            println!("{} views -> {}", views.len(), out.display());
        }
        Cmd::ExportCurvature { ckpt, scene, out } => {
            let k = load_ckpt(&ckpt)?;
            let w = export_curvature(&k.params, &scene_of(&k.config, scene)?, &k.config, &out)?;
            let mean = w.iter().sum::<f64>() / w.len().max(1) as f64;
            println!("{} points, mean weight {mean:.4} -> {}", w.len(), out.display());
        }
        Cmd::ExportProtos { ckpt, scene, out } => {
            let k = load_ckpt(&ckpt)?;
            let a = export_prototypes(&k.params, &scene_of(&k.config, scene)?, &k.config, &out)?;
            let mut used: Vec<usize> = a.iter().flatten().copied().collect();
            used.sort_unstable();
            used.dedup();
            println!("{} points, {} prototypes in use -> {}", a.len(), used.len(), out.display());
        }
        Cmd::Selfcheck { scratch } => {
            let tmp;
            let dir = match scratch {
                Some(d) => d,
                None => {
                    tmp = std::env::temp_dir().join(format!("clap-selfcheck-{}", std::process::id()));
                    tmp
                }
            };
            let checks = selfcheck::run_all(&dir);
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let _ = std::fs::remove_dir_all(&dir);
            selfcheck::require(&checks)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::NonFinite(_) => 2,
                _ => 1,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        super::Cli::command().debug_assert();
    }
}
