//! End-to-end training of encoder and predictor on sub-trajectory windows.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::Dataset;
use crate::error::{Error, Result};
use crate::losses::{lewm_loss, pldm_loss, EmbeddingBatch, PldmCoefficients};
use crate::numerics::{derive_seed, Adam, AdamConfig, DenseArray, Graph, SeededRng, Var};
use crate::sigreg::{sample_directions, DirectionSet, EppsPulleyConfig};
use crate::worldmodel::{save_checkpoint, Mode, WorldModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Lewm,
    Pldm,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Lewm => "lewm",
            LossKind::Pldm => "pldm",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lewm" => Ok(LossKind::Lewm),
            "pldm" => Ok(LossKind::Pldm),
            other => Err(Error::Config(format!("unknown loss `{other}`, expected lewm or pldm"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of SIGReg in the two-term objective.
    pub lambda_loss: f64,
    pub num_projections: usize,
    /// Reuse one direction set for every step instead of resampling.
    pub freeze_directions: bool,
    pub batch_size: usize,
    pub sub_traj_len: usize,
    pub epochs: usize,
    /// Overrides `epochs` when positive.
    pub max_steps: usize,
    pub seed: u64,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_loss: 0.1,
            num_projections: 1024,
            freeze_directions: false,
            batch_size: 128,
            sub_traj_len: 4,
            epochs: 1,
            max_steps: 0,
            seed: 0,
            checkpoint_every: 0,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_loss >= 0.0) || !self.lambda_loss.is_finite() {
            return Err(Error::Config(format!("lambda_loss must be >= 0, got {}", self.lambda_loss)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.sub_traj_len < 2 {
            return Err(Error::Config("sub_traj_len must be at least 2".into()));
        }
        if self.num_projections == 0 {
            return Err(Error::Config("num_projections must be positive".into()));
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return Err(Error::Config("either epochs or max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Which objective to optimize and its settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub kind: LossKind,
    pub epps_pulley: EppsPulleyConfig,
    pub pldm: PldmCoefficients,
}

impl Objective {
    pub fn lewm() -> Self {
        Self { kind: LossKind::Lewm, epps_pulley: EppsPulleyConfig::default(), pldm: PldmCoefficients::default() }
    }

    pub fn pldm() -> Self {
        Self { kind: LossKind::Pldm, ..Self::lewm() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepLoss {
    Lewm { total: f64, pred: f64, sigreg: f64 },
    Pldm { total: f64, pred: f64, var: f64, cov: f64, time_sim: f64, time_var: f64, time_cov: f64, idm: f64 },
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        match *self {
            StepLoss::Lewm { total, .. } | StepLoss::Pldm { total, .. } => total,
        }
    }

    pub fn pred(&self) -> f64 {
        match *self {
            StepLoss::Lewm { pred, .. } | StepLoss::Pldm { pred, .. } => pred,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    fn values(&self) -> Vec<f64> {
        match *self {
            StepLoss::Lewm { total, pred, sigreg } => vec![total, pred, sigreg],
            StepLoss::Pldm { total, pred, var, cov, time_sim, time_var, time_cov, idm } => {
                vec![total, pred, var, cov, time_sim, time_var, time_cov, idm]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub loss: StepLoss,
}

/// Start positions of every full window, as (trajectory, first frame).
fn window_index(dataset: &Dataset, len: usize) -> Vec<(usize, usize)> {
    let mut out = vec![];
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        if traj.len() >= len {
            out.extend((0..=traj.len() - len).map(|s| (i, s)));
        }
    }
    out
}

pub struct Trainer<'a> {
    model: WorldModel,
    dataset: &'a Dataset,
    cfg: TrainConfig,
    objective: Objective,
    optimizer: Adam,
    windows: Vec<(usize, usize)>,
    frozen_dirs: Option<DirectionSet>,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: WorldModel, dataset: &'a Dataset, cfg: TrainConfig, objective: Objective) -> Result<Self> {
        cfg.validate()?;
        objective.epps_pulley.validate()?;
        if objective.kind == LossKind::Pldm {
            objective.pldm.validate()?;
        }
        let mc = model.config();
        if mc.history_len >= cfg.sub_traj_len {
            return Err(Error::Config(format!(
                "sub_traj_len {} leaves no prediction target for history {}",
                cfg.sub_traj_len, mc.history_len
            )));
        }
        let env = &dataset.config;
        if env.obs_len() != mc.obs_len() || env.frame_skip != mc.frame_skip || mc.action_dim != 2 {
            return Err(Error::Config(format!(
                "dataset ({} pixels, frame_skip {}) does not match model ({} pixels, frame_skip {}, action_dim {})",
                env.obs_len(),
                env.frame_skip,
                mc.obs_len(),
                mc.frame_skip,
                mc.action_dim
            )));
        }
        let windows = window_index(dataset, cfg.sub_traj_len);
        if windows.is_empty() {
            return Err(Error::invalid(format!("no trajectory has {} frames", cfg.sub_traj_len)));
        }
        let frozen_dirs = if cfg.freeze_directions {
            Some(sample_directions(cfg.num_projections, mc.embed_dim, derive_seed(cfg.seed, u64::MAX))?)
        } else {
            None
        };
        let optimizer = Adam::new(cfg.optimizer.clone(), model.params());
        Ok(Self { model, dataset, cfg, objective, optimizer, windows, frozen_dirs, step: 0 })
    }

    pub fn model(&self) -> &WorldModel {
        &self.model
    }

    pub fn into_model(self) -> WorldModel {
        self.model
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.windows.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        if self.cfg.max_steps > 0 {
            self.cfg.max_steps as u64
        } else {
            self.cfg.epochs as u64 * self.steps_per_epoch()
        }
    }

    /// Directions used at a given step.
    pub fn directions(&self, step: u64) -> Result<DirectionSet> {
        match &self.frozen_dirs {
            Some(d) => Ok(d.clone()),
            None => sample_directions(
                self.cfg.num_projections,
                self.model.config().embed_dim,
                derive_seed(self.cfg.seed, 2 * step + 1),
            ),
        }
    }

    /// Windows of the batch drawn at `step`, uniform over all windows.
    pub fn batch_windows(&self, step: u64) -> Vec<(usize, usize)> {
        let mut rng = SeededRng::new(derive_seed(self.cfg.seed, 2 * step));
        (0..self.cfg.batch_size).map(|_| self.windows[rng.below(self.windows.len())]).collect()
    }

    /// One optimizer step; returns the logged components.
    pub fn step(&mut self) -> Result<LogRow> {
        let step = self.step;
        let windows = self.batch_windows(step);
        let (t_len, b) = (self.cfg.sub_traj_len, windows.len());
        let n = self.model.config().history_len;
        let env = &self.dataset.config;

        // rows are step-major: frame t of sample i sits at row t * B + i
        let mut frames = Vec::with_capacity(t_len * b);
        for t in 0..t_len {
            for &(ti, s) in &windows {
                frames.push(self.dataset.trajectories[ti].observation(s + t));
            }
        }
        let mut blocks = Vec::with_capacity(t_len - 1);
        for t in 0..t_len - 1 {
            let rows: Vec<Vec<f64>> = windows
                .iter()
                .map(|&(ti, s)| self.dataset.trajectories[ti].normalized_block(s + t, env))
                .collect();
            blocks.push(DenseArray::from_rows(&rows)?);
        }

        let mut g = Graph::new();
        let obs = g.constant(DenseArray::from_rows(&frames)?);
        let (z_all, enc_moments) = self.model.encode_node(&mut g, obs, Mode::Train)?;
        let steps: Vec<Var> = (0..t_len).map(|t| g.slice_rows(z_all, t * b, (t + 1) * b)).collect::<std::result::Result<_, _>>()?;

        // teacher forcing: predict steps n..T from the true previous embeddings
        let p = t_len - n;
        let history: Vec<Var> = (0..n)
            .map(|j| g.concat_rows(&steps[j..j + p]))
            .collect::<std::result::Result<_, _>>()?;
        let action_rows: Vec<Var> = (n - 1..t_len - 1).map(|t| g.constant(blocks[t].clone())).collect();
        let actions = g.concat_rows(&action_rows)?;
        let (pred_all, pred_moments) = self.model.predict_node(&mut g, &history, actions, Mode::Train)?;
        let predicted: Vec<Var> =
            (0..p).map(|k| g.slice_rows(pred_all, k * b, (k + 1) * b)).collect::<std::result::Result<_, _>>()?;
        let batch = EmbeddingBatch { steps, predicted };

        let (loss_var, loss) = match self.objective.kind {
            LossKind::Lewm => {
                let dirs = self.directions(step)?;
                let terms = lewm_loss(&mut g, &batch, &dirs, &self.objective.epps_pulley, self.cfg.lambda_loss)?;
                let v = terms.values(&g);
                (terms.total, StepLoss::Lewm { total: v.total, pred: v.pred, sigreg: v.sigreg })
            }
            LossKind::Pldm => {
                let acts: Vec<Var> = blocks.iter().map(|a| g.constant(a.clone())).collect();
                let terms = pldm_loss(&mut g, &batch, &acts, &self.model, &self.objective.pldm)?;
                let v = terms.values(&g);
                (
                    terms.total,
                    StepLoss::Pldm {
                        total: v.total,
                        pred: v.pred,
                        var: v.var,
                        cov: v.cov,
                        time_sim: v.time_sim,
                        time_var: v.time_var,
                        time_cov: v.time_cov,
                        idm: v.idm,
                    },
                )
            }
        };
        if !loss.is_finite() {
            return Err(Error::invalid(format!("non-finite loss at step {step}")));
        }
        let grads = g.backward(loss_var)?.param_grads(&g, self.model.params());
        self.optimizer.step(self.model.params_mut(), &grads)?;
        if let Some(m) = enc_moments {
            self.model.update_encoder_stats(&m);
        }
        if let Some(m) = pred_moments {
            self.model.update_predictor_stats(&m);
        }
        self.step += 1;
        Ok(LogRow { step, epoch: step / self.steps_per_epoch(), loss })
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    /// (steps completed, path) for every checkpoint written.
    pub checkpoints: Vec<(u64, PathBuf)>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:07}.ckpt"))
}

/// Runs the configured number of steps. With an output directory, writes
/// periodic checkpoints (named by steps completed, including step 0) and
/// the final one.
pub fn train(
    model: WorldModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    objective: &Objective,
    checkpoint_dir: Option<&Path>,
) -> Result<(WorldModel, TrainReport)> {
    let mut trainer = Trainer::new(model, dataset, cfg.clone(), objective.clone())?;
    let total = trainer.total_steps();
    let mut report = TrainReport { log: Vec::with_capacity(total as usize), checkpoints: vec![] };
    let save = |trainer: &Trainer, report: &mut TrainReport| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let path = checkpoint_path(dir, trainer.steps_done());
            save_checkpoint(trainer.model(), &path)?;
            report.checkpoints.push((trainer.steps_done(), path));
        }
        Ok(())
    };
    if cfg.checkpoint_every > 0 {
        save(&trainer, &mut report)?;
    }
    while trainer.steps_done() < total {
        report.log.push(trainer.step()?);
        let done = trainer.steps_done();
        if done == total || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0) {
            save(&trainer, &mut report)?;
        }
    }
    Ok((trainer.into_model(), report))
}

pub fn write_train_log(path: impl AsRef<Path>, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    match log.first().map(|r| r.loss) {
        Some(StepLoss::Pldm { .. }) => w.write_record([
            "step", "epoch", "total", "pred", "var", "cov", "time_sim", "time_var", "time_cov", "idm",
        ])?,
        _ => w.write_record(["step", "epoch", "total", "pred", "sigreg"])?,
    }
    for row in log {
        let mut rec = vec![row.step.to_string(), row.epoch.to_string()];
        rec.extend(row.loss.values().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Trailing moving average with the given window (shorter at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_dataset, EnvConfig};
    use crate::worldmodel::{load_checkpoint, WorldModelConfig};

    fn setup() -> (Dataset, WorldModel) {
        let env = EnvConfig { render_size: 8, ..EnvConfig::default() };
        let ds = generate_dataset(&env, 6, 100, 3).unwrap();
        let cfg = WorldModelConfig {
            obs_height: 8,
            obs_width: 8,
            embed_dim: 4,
            encoder_hidden: vec![16],
            predictor_hidden: vec![16],
            ..WorldModelConfig::default()
        };
        (ds, WorldModel::new(cfg, 1).unwrap())
    }

    fn bytes(m: &WorldModel) -> Vec<u8> {
        let mut out = vec![];
        crate::worldmodel::write_checkpoint(m, &mut out).unwrap();
        out
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { batch_size: 8, num_projections: 16, max_steps: 6, ..TrainConfig::default() }
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, model) = setup();
        let (a, ra) = train(model.clone(), &ds, &small_cfg(), &Objective::lewm(), None).unwrap();
        let (b, rb) = train(model, &ds, &small_cfg(), &Objective::lewm(), None).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(ra.log, rb.log);
        assert_eq!(ra.log.len(), 6);
        assert!(ra.log.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn training_changes_parameters_and_stats() {
        let (ds, model) = setup();
        let (trained, _) = train(model.clone(), &ds, &small_cfg(), &Objective::lewm(), None).unwrap();
        assert_ne!(trained.params().values(), model.params().values());
        assert_ne!(trained.encoder_stats, model.encoder_stats);
    }

    #[test]
    fn pldm_objective_runs() {
        let (ds, model) = setup();
        let (_, r) = train(model, &ds, &small_cfg(), &Objective::pldm(), None).unwrap();
        assert!(matches!(r.log[0].loss, StepLoss::Pldm { .. }));
        assert!(r.log.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let (ds, _) = setup();
        let model = WorldModel::new(WorldModelConfig::default(), 0).unwrap();
        assert!(Trainer::new(model, &ds, small_cfg(), Objective::lewm()).is_err());
    }

    #[test]
    fn bad_config_is_rejected() {
        let (ds, model) = setup();
        let cfg = TrainConfig { lambda_loss: -1.0, ..small_cfg() };
        assert!(Trainer::new(model.clone(), &ds, cfg, Objective::lewm()).is_err());
        let cfg = TrainConfig { sub_traj_len: 1, ..small_cfg() };
        assert!(Trainer::new(model, &ds, cfg, Objective::lewm()).is_err());
    }

    #[test]
    fn directions_resample_unless_frozen() {
        let (ds, model) = setup();
        let t = Trainer::new(model.clone(), &ds, small_cfg(), Objective::lewm()).unwrap();
        assert_ne!(t.directions(0).unwrap(), t.directions(1).unwrap());
        assert_eq!(t.directions(3).unwrap(), t.directions(3).unwrap());
        let cfg = TrainConfig { freeze_directions: true, ..small_cfg() };
        let t = Trainer::new(model, &ds, cfg, Objective::lewm()).unwrap();
        assert_eq!(t.directions(0).unwrap(), t.directions(1).unwrap());
    }

    #[test]
    fn checkpoints_and_log_are_written() {
        let (ds, model) = setup();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { checkpoint_every: 3, ..small_cfg() };
        let (trained, r) = train(model, &ds, &cfg, &Objective::lewm(), Some(dir.path())).unwrap();
        let steps: Vec<u64> = r.checkpoints.iter().map(|c| c.0).collect();
        assert_eq!(steps, vec![0, 3, 6]);
        let reloaded = load_checkpoint(&r.checkpoints[2].1).unwrap();
        let obs = DenseArray::from_rows(&[ds.trajectories[0].observation(0), ds.trajectories[0].observation(1)]).unwrap();
        assert_eq!(reloaded.encode_eval(&obs).unwrap(), trained.encode_eval(&obs).unwrap());

        let log = dir.path().join("log.csv");
        write_train_log(&log, &r.log).unwrap();
        let text = std::fs::read_to_string(&log).unwrap();
        assert!(text.starts_with("step,epoch,total,pred,sigreg\n"));
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
