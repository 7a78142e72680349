use crate::env::{perturb, Dataset, EnvConfig, Perturbation, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, DenseArray, SeededRng};
use crate::worldmodel::WorldModel;

use super::stats::{paired_t_test, TTest};

/// Frames after the perturbation (inclusive) whose surprise is maximized.
pub const SURPRISE_WINDOW: usize = 3;

/// Encoder plus one-step predictor, as surprise needs them.
pub trait LatentDynamics {
    fn history_len(&self) -> usize;
    fn encode_batch(&self, obs: &DenseArray) -> Result<DenseArray>;
    /// `history` holds `history_len` batches, oldest first.
    fn predict_batch(&self, history: &[DenseArray], actions: &DenseArray) -> Result<DenseArray>;
}

impl LatentDynamics for WorldModel {
    fn history_len(&self) -> usize {
        self.config().history_len
    }

    fn encode_batch(&self, obs: &DenseArray) -> Result<DenseArray> {
        self.encode_eval(obs)
    }

    fn predict_batch(&self, history: &[DenseArray], actions: &DenseArray) -> Result<DenseArray> {
        self.predict_eval(history, actions)
    }
}

/// Per-frame surprise of one trajectory. Entry `k` belongs to frame
/// `start + k`; frames before `start` have no full history.
#[derive(Clone, Debug, PartialEq)]
pub struct SurpriseCurve {
    pub start: usize,
    pub values: Vec<f64>,
}

impl SurpriseCurve {
    pub fn at(&self, t: usize) -> Option<f64> {
        t.checked_sub(self.start).and_then(|k| self.values.get(k).copied())
    }

    /// Max over frames `[t, t + len)` that exist in the curve.
    pub fn window_max(&self, t: usize, len: usize) -> Option<f64> {
        (t..t + len).filter_map(|s| self.at(s)).reduce(f64::max)
    }
}

/// Squared latent error of the one-step prediction for every frame with a
/// full history, all frames batched through the model at once.
pub fn surprise_series(
    model: &impl LatentDynamics,
    traj: &Trajectory,
    env: &EnvConfig,
) -> Result<SurpriseCurve> {
    let n = model.history_len();
    let t_len = traj.len();
    if t_len < n + 2 {
        return Err(Error::invalid(format!(
            "trajectory of {t_len} frames is too short for history {n}"
        )));
    }
    let frames: Vec<Vec<f64>> = (0..t_len).map(|t| traj.observation(t)).collect();
    let z = model.encode_batch(&DenseArray::from_rows(&frames)?)?;
    let targets: Vec<usize> = (n..t_len).collect();
    let history: Vec<DenseArray> = (0..n)
        .map(|j| {
            let rows: Vec<Vec<f64>> = targets.iter().map(|&t| z.row(t - n + j).to_vec()).collect();
            DenseArray::from_rows(&rows)
        })
        .collect::<std::result::Result<_, _>>()?;
    let blocks: Vec<Vec<f64>> = targets.iter().map(|&t| traj.normalized_block(t - 1, env)).collect();
    let pred = model.predict_batch(&history, &DenseArray::from_rows(&blocks)?)?;
    let values = targets
        .iter()
        .enumerate()
        .map(|(k, &t)| pred.row(k).iter().zip(z.row(t)).map(|(p, a)| (p - a) * (p - a)).sum())
        .collect();
    Ok(SurpriseCurve { start: n, values })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoeTrial {
    pub kind: Perturbation,
    pub trial: usize,
    pub trajectory: usize,
    pub t_perturb: usize,
    pub window_max_unperturbed: f64,
    pub window_max_perturbed: f64,
}

/// Matched curves of one trial, for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct SurpriseSeries {
    pub t_perturb: usize,
    pub unperturbed: SurpriseCurve,
    pub perturbed: Vec<(Perturbation, SurpriseCurve)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoeReport {
    pub trials: Vec<VoeTrial>,
    pub tests: Vec<(Perturbation, TTest)>,
    pub example: SurpriseSeries,
}

impl VoeReport {
    pub fn test(&self, kind: Perturbation) -> Option<&TTest> {
        self.tests.iter().find(|(k, _)| *k == kind).map(|(_, t)| t)
    }
}

pub fn perturbation_name(kind: Perturbation) -> &'static str {
    match kind {
        Perturbation::Recolor => "recolor",
        Perturbation::Teleport => "teleport",
    }
}

/// Violation-of-expectation test. Each trial draws a trajectory and a
/// perturbation frame, builds one perturbed copy per kind, and compares
/// surprise maxima over the window after the perturbation.
pub fn voe_test(
    model: &impl LatentDynamics,
    dataset: &Dataset,
    n_trials: usize,
    kinds: &[Perturbation],
    seed: u64,
) -> Result<VoeReport> {
    if n_trials < 10 {
        return Err(Error::invalid(format!("voe needs at least 10 trials, got {n_trials}")));
    }
    if kinds.is_empty() {
        return Err(Error::invalid("no perturbation kinds requested"));
    }
    let n = model.history_len();
    // t_p >= max(2, n + 1) so the frame before it has a prediction, and the
    // whole window must fit inside the trajectory
    let lo = (n + 1).max(2);
    let eligible: Vec<usize> = (0..dataset.trajectories.len())
        .filter(|&i| dataset.trajectories[i].len() > lo + SURPRISE_WINDOW)
        .collect();
    if eligible.is_empty() {
        return Err(Error::invalid("no trajectory is long enough for the surprise window"));
    }
    let env = &dataset.config;
    let mut trials = vec![];
    let mut example = None;
    for trial in 0..n_trials {
        let mut rng = SeededRng::new(derive_seed(seed, trial as u64));
        let ti = eligible[rng.below(eligible.len())];
        let traj = &dataset.trajectories[ti];
        let hi = traj.len() - SURPRISE_WINDOW;
        let t_p = lo + rng.below(hi - lo + 1);
        let base = surprise_series(model, traj, env)?;
        let base_max = base.window_max(t_p, SURPRISE_WINDOW).unwrap_or(0.0);
        let mut curves = vec![];
        for &kind in kinds {
            let changed = perturb(traj, kind, t_p, env, &mut rng)?;
            let curve = surprise_series(model, &changed, env)?;
            trials.push(VoeTrial {
                kind,
                trial,
                trajectory: ti,
                t_perturb: t_p,
                window_max_unperturbed: base_max,
                window_max_perturbed: curve.window_max(t_p, SURPRISE_WINDOW).unwrap_or(0.0),
            });
            curves.push((kind, curve));
        }
        if example.is_none() {
            example = Some(SurpriseSeries { t_perturb: t_p, unperturbed: base, perturbed: curves });
        }
    }
    let mut tests = vec![];
    for &kind in kinds {
        let (treated, control): (Vec<f64>, Vec<f64>) = trials
            .iter()
            .filter(|t| t.kind == kind)
            .map(|t| (t.window_max_perturbed, t.window_max_unperturbed))
            .unzip();
        tests.push((kind, paired_t_test(&treated, &control)?));
    }
    Ok(VoeReport { trials, tests, example: example.expect("at least one trial") })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_dataset, run_episode};
    use crate::worldmodel::WorldModelConfig;

    fn small_model() -> WorldModel {
        let cfg = WorldModelConfig {
            embed_dim: 8,
            encoder_hidden: vec![32],
            predictor_hidden: vec![16],
            ..WorldModelConfig::default()
        };
        WorldModel::new(cfg, 3).unwrap()
    }

    /// Real encoder, predictor that looks up the recorded next latent.
    struct Oracle<'a> {
        model: &'a WorldModel,
        latents: DenseArray,
    }

    impl LatentDynamics for Oracle<'_> {
        fn history_len(&self) -> usize {
            1
        }
        fn encode_batch(&self, obs: &DenseArray) -> Result<DenseArray> {
            self.model.encode_eval(obs)
        }
        fn predict_batch(&self, history: &[DenseArray], _: &DenseArray) -> Result<DenseArray> {
            let h = &history[0];
            let rows: Vec<Vec<f64>> = (0..h.rows())
                .map(|r| {
                    let t = (0..self.latents.rows()).find(|&t| self.latents.row(t) == h.row(r)).unwrap();
                    self.latents.row(t + 1).to_vec()
                })
                .collect();
            DenseArray::from_rows(&rows).map_err(Into::into)
        }
    }

    #[test]
    fn oracle_predictor_has_no_surprise() {
        let env = EnvConfig::default();
        let model = small_model();
        let traj = run_episode(&env, 200, 5);
        let frames: Vec<Vec<f64>> = (0..traj.len()).map(|t| traj.observation(t)).collect();
        let latents = model.encode_eval(&DenseArray::from_rows(&frames).unwrap()).unwrap();
        let oracle = Oracle { model: &model, latents };
        let s = surprise_series(&oracle, &traj, &env).unwrap();
        assert_eq!(s.values.len(), traj.len() - 1);
        assert!(s.values.iter().all(|&v| v < 1e-20));
    }

    #[test]
    fn prefix_is_unchanged_by_perturbation() {
        let env = EnvConfig::default();
        let model = small_model();
        let traj = run_episode(&env, 200, 9);
        let t_p = 10;
        let base = surprise_series(&model, &traj, &env).unwrap();
        for kind in [Perturbation::Recolor, Perturbation::Teleport] {
            let changed = perturb(&traj, kind, t_p, &env, &mut SeededRng::new(1)).unwrap();
            let s = surprise_series(&model, &changed, &env).unwrap();
            assert_eq!(s.values.len(), base.values.len());
            for t in 1..t_p {
                assert_eq!(s.at(t).unwrap().to_bits(), base.at(t).unwrap().to_bits());
            }
            assert!(s.values.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn short_trajectories_error() {
        let env = EnvConfig::default();
        let model = small_model();
        let mut traj = run_episode(&env, 200, 9);
        traj.states.truncate(2);
        traj.frames.truncate(2);
        traj.action_blocks.truncate(1);
        assert!(surprise_series(&model, &traj, &env).is_err());
    }

    #[test]
    fn voe_runs_and_reports_valid_p_values() {
        let env = EnvConfig::default();
        let ds = generate_dataset(&env, 6, 60, 2).unwrap();
        let model = small_model();
        let kinds = [Perturbation::Recolor, Perturbation::Teleport];
        let r = voe_test(&model, &ds, 10, &kinds, 4).unwrap();
        assert_eq!(r.trials.len(), 20);
        for (_, t) in &r.tests {
            assert!((0.0..=1.0).contains(&t.p));
        }
        assert!(voe_test(&model, &ds, 9, &kinds, 4).is_err());
        let again = voe_test(&model, &ds, 10, &kinds, 4).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn window_max_respects_bounds() {
        let c = SurpriseCurve { start: 1, values: vec![1.0, 5.0, 2.0, 3.0] };
        assert_eq!(c.window_max(2, 3), Some(5.0));
        assert_eq!(c.window_max(3, 3), Some(3.0));
        assert_eq!(c.window_max(0, 1), None);
    }
}
