use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::model::{batch_gradient, depth_guided_maps, draw_scene, init_params, scene_field, StepStats};
use super::optim::{cosine_lr, Adam};
use crate::diffengine::ParamSet;
use crate::curvsample::{sampling_schedule, CurvatureWeights, SamplingMode};
use crate::encoders::{FusionInputs, MaskSpec};
use crate::error::{Error, Result};
use crate::protolearn::renormalize_prototypes;
use crate::synthscene::SceneSample;

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,epoch,L,L_rend,L_proto,L_EM,L_SwAV,L_GMM,lr,sampling-mode";

pub fn checkpoint_stem(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("ckpt_epoch{epoch:03}"))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub stats: StepStats,
    pub lr: f64,
    pub mode: SamplingMode,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let s = &self.stats;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step, self.epoch, s.l, s.l_rend, s.l_proto, s.l_em, s.l_swav, s.l_gmm, self.lr, self.mode
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return Err(Error::invalid(format!("log row has {} fields", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::invalid(format!("bad number `{}`", f[i])))
        };
        let int = |i: usize| -> Result<usize> {
            f[i].parse().map_err(|_| Error::invalid(format!("bad integer `{}`", f[i])))
        };
        let mode = match f[9] {
            "uniform" => SamplingMode::Uniform,
            "curvature" => SamplingMode::Curvature,
            m => return Err(Error::invalid(format!("bad sampling mode `{m}`"))),
        };
        Ok(LogRow {
            step: int(0)?,
            epoch: int(1)?,
            stats: StepStats {
                l: num(2)?,
                l_rend: num(3)?,
                l_proto: num(4)?,
                l_em: num(5)?,
                l_swav: num(6)?,
                l_gmm: num(7)?,
            },
            lr: num(8)?,
            mode,
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == LOG_HEADER => {}
        _ => return Err(Error::invalid(format!("{} lacks the log header", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(LogRow::parse).collect()
}

/// Training state: corpus, parameters, optimizer and per-epoch weight caches.
pub struct Trainer {
    pub config: TrainConfig,
    pub scenes: Vec<SceneSample>,
    uniform_maps: Vec<Vec<Vec<f64>>>,
    pub params: ParamSet,
    pub adam: Adam,
    pub epoch: usize,
    pub step: usize,
    curvature: Vec<Option<CurvatureWeights>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config)?;
        let adam = Adam::new(&params, config.beta1, config.beta2, config.adam_eps)?;
        Self::with_state(config, params, adam, 0, 0)
    }

    /// Trains on explicit scenes instead of the generated corpus; checkpoints
    /// of such a run only resume through this constructor again.
    pub fn with_scenes(config: TrainConfig, scenes: Vec<SceneSample>) -> Result<Self> {
        config.validate()?;
        if scenes.is_empty() {
            return Err(Error::invalid("no training scenes"));
        }
        let params = init_params(&config)?;
        let adam = Adam::new(&params, config.beta1, config.beta2, config.adam_eps)?;
        Self::assemble(config, scenes, params, adam, 0, 0)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.check_compatible()?;
        Self::with_state(ckpt.config, ckpt.params, ckpt.adam, ckpt.epoch, ckpt.step)
    }

    fn with_state(config: TrainConfig, params: ParamSet, adam: Adam, epoch: usize, step: usize) -> Result<Self> {
        let scenes = config.scenes.generate(&config.rig)?;
        Self::assemble(config, scenes, params, adam, epoch, step)
    }

    fn assemble(
        config: TrainConfig,
        scenes: Vec<SceneSample>,
        params: ParamSet,
        adam: Adam,
        epoch: usize,
        step: usize,
    ) -> Result<Self> {
        let uniform_maps = scenes
            .iter()
            .map(|s| depth_guided_maps(&s.cloud, &s.frames, &config))
            .collect::<Result<Vec<_>>>()?;
        let n = scenes.len();
        Ok(Trainer {
            config,
            scenes,
            uniform_maps,
            params,
            adam,
            epoch,
            step,
            curvature: vec![None; n],
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.config.clone(),
            config_hash: self.config.hash()?,
            epoch: self.epoch,
            step: self.step,
            params: self.params.clone(),
            adam: self.adam.clone(),
        })
    }

    pub fn sampling_mode(&self, epoch: usize) -> SamplingMode {
        if self.config.curvature_sampling {
            sampling_schedule(epoch, self.config.warmup)
        } else {
            SamplingMode::Uniform
        }
    }

    /// Mask used when evaluating a scene's field outside a training step.
    pub fn eval_mask(&self, salt: u64) -> Result<MaskSpec> {
        MaskSpec::new(self.config.mask_rate, self.config.seed ^ 0x9e37_79b9_7f4a_7c15 ^ salt)
    }

    fn refresh_curvature(&mut self, epoch: usize) -> Result<()> {
        for (i, sample) in self.scenes.iter().enumerate() {
            let mask = MaskSpec::new(self.config.mask_rate, self.config.seed ^ ((epoch as u64) << 20) ^ i as u64)?;
            let field = scene_field(&self.params, sample, &self.config, Some(&mask))?;
            self.curvature[i] = Some(CurvatureWeights::compute(
                &field,
                &sample.cloud,
                &sample.frames,
                self.config.curvature_mode,
                epoch,
                self.config.k_gaus,
                self.config.sigma_blur,
            )?);
        }
        Ok(())
    }

    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64 + 1);
        rng
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.scenes.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs one epoch and returns its log rows.
    pub fn run_epoch(&mut self) -> Result<Vec<LogRow>> {
        let epoch = self.epoch;
        let mode = self.sampling_mode(epoch);
        if mode == SamplingMode::Curvature {
            self.refresh_curvature(epoch)?;
        }
        let order = self.epoch_order(epoch);
        let per_epoch = self.config.steps_per_epoch();
        let total = self.config.total_steps();
        let bs = self.config.batch_size.min(self.scenes.len());
        let mut rows = Vec::with_capacity(per_epoch);
        for k in 0..per_epoch {
            let step = self.step;
            let mut rng = self.step_rng(step);
            let draws = (0..bs)
                .map(|j| {
                    let si = order[(k * bs + j) % order.len()];
                    let w = match mode {
                        SamplingMode::Curvature => self.curvature[si].as_ref(),
                        SamplingMode::Uniform => None,
                    };
                    draw_scene(&self.scenes[si], &self.uniform_maps[si], w, &self.config, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let fusion = match (self.config.separate_modalities, step % 2) {
                (false, _) => FusionInputs::Both,
                (true, 0) => FusionInputs::PointsOnly,
                (true, _) => FusionInputs::ImagesOnly,
            };
            let (stats, grads) = batch_gradient(&self.params, &draws, &self.config, fusion)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
                    e => e,
                })?;
            let lr = cosine_lr(self.config.lr, step, total);
            self.adam.step(&mut self.params, &grads, lr)?;
            renormalize_prototypes(&mut self.params)?;
            rows.push(LogRow {
                step,
                epoch,
                stats,
                lr,
                mode,
            });
            self.step += 1;
        }
        self.epoch += 1;
        Ok(rows)
    }

    /// Trains until `config.epochs`, appending to `out/train_log.csv` and
    /// writing a checkpoint after every epoch.
    pub fn run(&mut self, out: &Path) -> Result<Checkpoint> {
        self.run_until(out, self.config.epochs)
    }

    /// As [`Trainer::run`] but stops after `stop` epochs (the schedule still
    /// spans `config.epochs`), as if interrupted.
    pub fn run_until(&mut self, out: &Path, stop: usize) -> Result<Checkpoint> {
        std::fs::create_dir_all(out)?;
        let log_path = out.join(LOG_FILE);
        prepare_log(&log_path, self.step)?;
        while self.epoch < stop.min(self.config.epochs) {
            let rows = self.run_epoch()?;
            let mut f = OpenOptions::new().append(true).open(&log_path)?;
            for r in &rows {
                writeln!(f, "{}", r.to_csv())?;
            }
            let last = rows.last().expect("epoch has steps");
            log::info!(
                "epoch {} done: L={:.5} L_rend={:.5} L_proto={:.5} ({})",
                last.epoch,
                last.stats.l,
                last.stats.l_rend,
                last.stats.l_proto,
                last.mode
            );
            self.checkpoint()?.save(&checkpoint_stem(out, self.epoch))?;
        }
        self.checkpoint()
    }
}

/// Fresh log with header at step 0; otherwise keeps only rows before `step`.
fn prepare_log(path: &Path, step: usize) -> Result<()> {
    if step == 0 || !path.exists() {
        std::fs::write(path, format!("{LOG_HEADER}\n"))?;
        return Ok(());
    }
    let kept: Vec<LogRow> = read_log(path)?.into_iter().filter(|r| r.step < step).collect();
    let mut text = format!("{LOG_HEADER}\n");
    for r in kept {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Full run from scratch.
pub fn train(config: &TrainConfig, out: &Path) -> Result<Checkpoint> {
    Trainer::new(config.clone())?.run(out)
}

/// Continues a run from a checkpoint to its configured epoch count.
pub fn resume(stem: &Path, out: &Path) -> Result<Checkpoint> {
    Trainer::from_checkpoint(Checkpoint::load(stem)?)?.run(out)
}
