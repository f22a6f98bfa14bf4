use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffengine::DerivMode;
use crate::encoders::{EncoderDims, GridSpec};
use crate::error::{Error, Result};
use crate::protolearn::ProtoConfig;
use crate::renderer::SampleStrategy;
use crate::synthscene::{default_bounds, SceneSample, SensorRig};

pub const SEED_ENV: &str = "CLAP_SEED";

/// Procedurally generated scene corpus: seeds `first_seed .. first_seed + count`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSet {
    pub first_seed: u64,
    pub count: usize,
    pub objects: usize,
}

impl Default for SceneSet {
    fn default() -> Self {
        SceneSet {
            first_seed: 1000,
            count: 64,
            objects: 4,
        }
    }
}

impl SceneSet {
    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.count as u64).map(|i| self.first_seed + i)
    }

    pub fn generate(&self, rig: &SensorRig) -> Result<Vec<SceneSample>> {
        self.seeds()
            .map(|s| SceneSample::generate(s, self.objects, default_bounds(), rig))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub scenes: SceneSet,
    pub epochs: usize,
    /// Defaults to one pass over the scenes.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub w_r: f64,
    pub w_proto: f64,
    pub w_sur: f64,
    pub w_c: f64,
    pub proto: ProtoConfig,
    pub mask_rate: f64,
    pub n_lidar: usize,
    pub n_pixels: usize,
    pub n_samples: usize,
    pub sample_strategy: SampleStrategy,
    pub warmup: usize,
    /// When false every epoch samples uniformly.
    pub curvature_sampling: bool,
    pub curvature_mode: DerivMode,
    pub k_gaus: usize,
    pub sigma_blur: f64,
    /// Alternate point-only and image-only fusion inputs step by step.
    pub separate_modalities: bool,
    pub grid: GridSpec,
    pub encoder: EncoderDims,
    pub h0: f64,
    pub rig: SensorRig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            scenes: SceneSet::default(),
            epochs: 8,
            steps_per_epoch: None,
            batch_size: 1,
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            w_r: 2.0,
            w_proto: 1.0,
            w_sur: 0.05,
            w_c: 0.05,
            proto: ProtoConfig::default(),
            mask_rate: 0.9,
            n_lidar: 512,
            n_pixels: 256,
            n_samples: 32,
            sample_strategy: SampleStrategy::Stratified,
            warmup: 4,
            curvature_sampling: true,
            curvature_mode: DerivMode::JacobianFrobenius,
            k_gaus: 5,
            sigma_blur: 1.0,
            separate_modalities: false,
            grid: GridSpec::default(),
            encoder: EncoderDims::default(),
            h0: 5.0,
            rig: SensorRig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        let weights = [self.w_r, self.w_proto, self.w_sur, self.w_c];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("loss weights must be finite and non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0,1) and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return bad("mask rate must lie in [0,1)");
        }
        if self.scenes.count == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("need at least one scene, batch element and epoch");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive");
        }
        if self.n_lidar == 0 {
            return bad("at least one LiDAR ray per step is required");
        }
        if self.n_samples < 2 {
            return bad("need at least two samples per ray");
        }
        if self.k_gaus % 2 == 0 || !(self.sigma_blur > 0.0) {
            return bad("blur kernel size must be odd and sigma positive");
        }
        if !(self.h0 > 0.0) {
            return bad("initial sharpness must be positive");
        }
        if self.rig.cameras.is_empty() {
            return bad("the rig needs at least one camera");
        }
        self.grid.validate()?;
        self.proto.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| self.scenes.count.div_ceil(self.batch_size))
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Reads a TOML file and applies the `CLAP_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::from_toml(&std::fs::read_to_string(path)?)?;
        c.apply_env()?;
        Ok(c)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        let digest = Sha256::digest(json.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Rendering only, one modality at a time.
    Separate,
    /// Joint encoders, uniform sampling, no prototypes.
    JointUniform,
    /// Joint encoders with curvature sampling, no prototypes.
    JointCurvature,
    #[default]
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Separate,
        AblationMode::JointUniform,
        AblationMode::JointCurvature,
        AblationMode::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Separate => "separate",
            AblationMode::JointUniform => "joint-uniform",
            AblationMode::JointCurvature => "joint-curvature",
            AblationMode::Full => "full",
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation mode `{s}`")))
    }
}

/// The config a given ablation trains with.
pub fn ablation_mode(config: &TrainConfig, mode: AblationMode) -> Result<TrainConfig> {
    config.validate()?;
    let mut c = config.clone();
    match mode {
        AblationMode::Full => {}
        AblationMode::JointCurvature => c.w_proto = 0.0,
        AblationMode::JointUniform => {
            c.w_proto = 0.0;
            c.curvature_sampling = false;
        }
        AblationMode::Separate => {
            c.w_proto = 0.0;
            c.curvature_sampling = false;
            c.separate_modalities = true;
        }
    }
    Ok(c)
}
