use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::losses::PldmCoefficients;
use crate::numerics::derive_seed;
use crate::planner::{CemConfig, PlanEvalConfig};
use crate::sigreg::EppsPulleyConfig;
use crate::train::{LossKind, Objective, TrainConfig};
use crate::worldmodel::WorldModelConfig;

use super::{from_flat_text, to_flat_text};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub episodes: usize,
    /// Low-level step cap per episode.
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { episodes: 2000, max_steps: 500, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub probe_split_seed: u64,
    /// Trajectories used by the probe and straightening suites; 0 uses all.
    pub max_episodes: usize,
    pub voe_trials: usize,
    pub voe_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { probe: ProbeConfig::default(), probe_split_seed: 0, max_episodes: 200, voe_trials: 30, voe_seed: 0 }
    }
}

/// Everything one run needs, serialized as flat `section.key = value` text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub loss: LossKind,
    pub model_seed: u64,
    pub dataset: DatasetConfig,
    pub env: EnvConfig,
    pub model: WorldModelConfig,
    pub train: TrainConfig,
    pub epps_pulley: EppsPulleyConfig,
    pub pldm: PldmCoefficients,
    pub cem: CemConfig,
    pub plan_eval: PlanEvalConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs/default".into(),
            loss: LossKind::Lewm,
            model_seed: 0,
            dataset: DatasetConfig::default(),
            env: EnvConfig::default(),
            model: WorldModelConfig::default(),
            train: TrainConfig::default(),
            epps_pulley: EppsPulleyConfig::default(),
            pldm: PldmCoefficients::default(),
            cem: CemConfig::default(),
            plan_eval: PlanEvalConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Largest seed the text format can hold (its integers are signed 64-bit).
pub const MAX_SEED: u64 = i64::MAX as u64;

fn stream_seed(global: u64, stream: u64) -> u64 {
    derive_seed(global, stream) >> 1
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = from_flat_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> Result<String> {
        to_flat_text(self)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Sets the global seed and re-derives every component seed from it.
    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        if seed > MAX_SEED {
            return Err(Error::Config(format!("seed must be at most {MAX_SEED}")));
        }
        self.seed = seed;
        self.dataset.seed = stream_seed(seed, 0);
        self.model_seed = stream_seed(seed, 1);
        self.train.seed = stream_seed(seed, 2);
        self.cem.seed = stream_seed(seed, 3);
        self.plan_eval.seed = stream_seed(seed, 4);
        self.eval.probe_split_seed = stream_seed(seed, 5);
        self.eval.voe_seed = stream_seed(seed, 6);
        Ok(self)
    }

    pub fn objective(&self) -> Objective {
        Objective { kind: self.loss, epps_pulley: self.epps_pulley.clone(), pldm: self.pldm.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.epps_pulley.validate()?;
        self.pldm.validate()?;
        self.cem.validate()?;
        if self.env.obs_len() != self.model.obs_len() || self.env.frame_skip != self.model.frame_skip {
            return Err(Error::Config(format!(
                "env renders {}x{} frames with frame_skip {}, model expects {}x{}x{} with frame_skip {}",
                self.env.render_size,
                self.env.render_size,
                self.env.frame_skip,
                self.model.obs_height,
                self.model.obs_width,
                self.model.obs_channels,
                self.model.frame_skip
            )));
        }
        Ok(())
    }
}
