//! Cross-entropy-method planning in latent space and the receding-horizon
//! control loop around it.
//!
//! Actions are handled in normalized units: one unit equals the
//! environment's `max_step`, so the default bounds `[-1, 1]` cover the full
//! action range.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{self, EnvConfig, RoomWorldState};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, DenseArray, SeededRng};
use crate::worldmodel::{LatentState, WorldModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub n_samples: usize,
    pub n_iters: usize,
    pub n_elites: usize,
    pub init_std: f64,
    pub horizon: usize,
    pub action_low: f64,
    pub action_high: f64,
    pub std_floor: f64,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            n_samples: 300,
            n_iters: 10,
            n_elites: 30,
            init_std: 1.0,
            horizon: 5,
            action_low: -1.0,
            action_high: 1.0,
            std_floor: 1e-3,
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_elites == 0 || self.n_elites > self.n_samples {
            return Err(Error::Config("need 1 <= n_elites <= n_samples".into()));
        }
        if self.horizon == 0 || self.n_iters == 0 {
            return Err(Error::Config("horizon and n_iters must be positive".into()));
        }
        if !(self.init_std > 0.0) || !(self.std_floor > 0.0) {
            return Err(Error::Config("init_std and std_floor must be positive".into()));
        }
        if !(self.action_low < self.action_high) {
            return Err(Error::Config("action_low must be below action_high".into()));
        }
        Ok(())
    }
}

/// Scores a batch of candidate sequences, one flattened sequence per row.
pub trait BatchCost {
    fn batch_cost(&self, candidates: &DenseArray) -> Result<Vec<f64>>;
}

impl<F: Fn(&[f64]) -> f64> BatchCost for F {
    fn batch_cost(&self, candidates: &DenseArray) -> Result<Vec<f64>> {
        Ok((0..candidates.rows()).map(|r| self(candidates.row(r))).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub best_cost: f64,
    pub mean_cost: f64,
    pub elite_cost_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    /// `horizon` blocks of `block_dim` normalized actions.
    pub best_actions: Vec<Vec<f64>>,
    pub best_cost: f64,
    /// Lowest cost sampled in each iteration.
    pub cost_trace: Vec<f64>,
    pub iterations: Vec<IterationStats>,
}

/// Diagonal-Gaussian CEM over `horizon x block_dim` action sequences.
pub fn cem(cost: &impl BatchCost, block_dim: usize, cfg: &CemConfig) -> Result<PlanResult> {
    cfg.validate()?;
    if block_dim == 0 {
        return Err(Error::invalid("block_dim must be positive"));
    }
    let dim = cfg.horizon * block_dim;
    let mut rng = SeededRng::new(cfg.seed);
    let mut mean = vec![0.0; dim];
    let mut std = vec![cfg.init_std; dim];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut cost_trace = Vec::with_capacity(cfg.n_iters);
    let mut iterations = Vec::with_capacity(cfg.n_iters);
    let mut cands = DenseArray::zeros(&[cfg.n_samples, dim]);

    for it in 0..cfg.n_iters {
        for r in 0..cfg.n_samples {
            let row = cands.row_mut(r);
            for j in 0..dim {
                row[j] = (mean[j] + std[j] * rng.normal()).clamp(cfg.action_low, cfg.action_high);
            }
        }
        let costs = cost.batch_cost(&cands)?;
        if costs.len() != cfg.n_samples {
            return Err(Error::invalid(format!(
                "cost function returned {} values for {} candidates",
                costs.len(),
                cfg.n_samples
            )));
        }
        if let Some(i) = costs.iter().position(|c| !c.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite cost {} for candidate {i} in iteration {it}",
                costs[i]
            )));
        }
        let mut order: Vec<usize> = (0..cfg.n_samples).collect();
        order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
        let elites = &order[..cfg.n_elites];

        let top = elites[0];
        if best.as_ref().map_or(true, |(c, _)| costs[top] < *c) {
            best = Some((costs[top], cands.row(top).to_vec()));
        }
        let k = cfg.n_elites as f64;
        for j in 0..dim {
            let m = elites.iter().map(|&e| cands.get(e, j)).sum::<f64>() / k;
            let v = elites.iter().map(|&e| (cands.get(e, j) - m).powi(2)).sum::<f64>() / k;
            mean[j] = m;
            std[j] = v.sqrt().max(cfg.std_floor);
        }
        cost_trace.push(costs[top]);
        iterations.push(IterationStats {
            iteration: it,
            best_cost: costs[top],
            mean_cost: costs.iter().sum::<f64>() / costs.len() as f64,
            elite_cost_mean: elites.iter().map(|&e| costs[e]).sum::<f64>() / k,
        });
    }
    let (best_cost, flat) = best.expect("at least one iteration");
    Ok(PlanResult {
        best_actions: flat.chunks(block_dim).map(<[f64]>::to_vec).collect(),
        best_cost,
        cost_trace,
        iterations,
    })
}

/// Squared Euclidean distance between two latent states.
pub fn goal_cost(z_final: &LatentState, z_goal: &LatentState) -> Result<f64> {
    if z_final.0.len() != z_goal.0.len() {
        return Err(Error::Shape(format!(
            "latent sizes {} and {} differ",
            z_final.0.len(),
            z_goal.0.len()
        )));
    }
    Ok(z_final.0.iter().zip(&z_goal.0).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Terminal goal-matching cost of whole candidate batches under a frozen model.
pub struct LatentGoalCost<'a> {
    model: &'a WorldModel,
    start: LatentState,
    goal: LatentState,
    horizon: usize,
}

impl<'a> LatentGoalCost<'a> {
    pub fn new(model: &'a WorldModel, start: LatentState, goal: LatentState, horizon: usize) -> Self {
        Self { model, start, goal, horizon }
    }
}

impl BatchCost for LatentGoalCost<'_> {
    fn batch_cost(&self, candidates: &DenseArray) -> Result<Vec<f64>> {
        let n = candidates.rows();
        let k = self.model.config().block_dim();
        if candidates.cols() != self.horizon * k {
            return Err(Error::Shape(format!(
                "candidates have {} columns, expected {}",
                candidates.cols(),
                self.horizon * k
            )));
        }
        let d = self.start.0.len();
        let mut z0 = DenseArray::zeros(&[n, d]);
        for r in 0..n {
            z0.row_mut(r).copy_from_slice(&self.start.0);
        }
        let history = vec![z0; self.model.config().history_len];
        let actions: Vec<DenseArray> = (0..self.horizon)
            .map(|h| {
                let mut a = DenseArray::zeros(&[n, k]);
                for r in 0..n {
                    a.row_mut(r).copy_from_slice(&candidates.row(r)[h * k..(h + 1) * k]);
                }
                a
            })
            .collect();
        let last = self.model.rollout(&history, &actions)?.pop().unwrap();
        Ok((0..n)
            .map(|r| last.row(r).iter().zip(&self.goal.0).map(|(a, b)| (a - b).powi(2)).sum())
            .collect())
    }
}

/// Encodes both observations and optimizes the terminal latent distance.
pub fn plan(model: &WorldModel, obs_init: &[f64], obs_goal: &[f64], cfg: &CemConfig) -> Result<PlanResult> {
    let start = model.encode_one(obs_init)?;
    let goal = model.encode_one(obs_goal)?;
    let cost = LatentGoalCost::new(model, start, goal, cfg.horizon);
    cem(&cost, model.config().block_dim(), cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub success: bool,
    pub steps_used: usize,
    pub plans: usize,
    /// State after every executed low-level step, starting with the initial state.
    pub states: Vec<RoomWorldState>,
    pub plan_results: Vec<PlanResult>,
}

/// Receding-horizon control: plan, execute `exec_blocks` blocks (0 means the
/// whole horizon), repeat until success or the step budget runs out.
pub fn mpc_episode(
    model: &WorldModel,
    env_cfg: &EnvConfig,
    start: &RoomWorldState,
    cem_cfg: &CemConfig,
    budget: usize,
    exec_blocks: usize,
) -> Result<EpisodeRecord> {
    let mcfg = model.config();
    if mcfg.frame_skip != env_cfg.frame_skip || mcfg.obs_len() != env_cfg.obs_len() || mcfg.action_dim != 2 {
        return Err(Error::Config("model and environment configs disagree".into()));
    }
    let exec = if exec_blocks == 0 { cem_cfg.horizon } else { exec_blocks.min(cem_cfg.horizon) };
    let goal_state = RoomWorldState { agent: start.goal, ..*start };
    let goal_obs = env::observe(&goal_state, env_cfg);

    let mut state = *start;
    let mut states = vec![state];
    let mut steps = 0;
    let mut plan_results = vec![];
    let mut success = state.reached_goal(env_cfg);
    'outer: while !success && steps < budget {
        let cfg = CemConfig {
            seed: derive_seed(cem_cfg.seed, plan_results.len() as u64),
            ..cem_cfg.clone()
        };
        let result = plan(model, &env::observe(&state, env_cfg), &goal_obs, &cfg)?;
        let blocks = result.best_actions[..exec].to_vec();
        plan_results.push(result);
        for block in &blocks {
            for a in block.chunks_exact(2) {
                if steps >= budget {
                    break 'outer;
                }
                let raw = [a[0] * env_cfg.max_step, a[1] * env_cfg.max_step];
                state = env::step(&state, raw, env_cfg);
                states.push(state);
                steps += 1;
                if state.reached_goal(env_cfg) {
                    success = true;
                    break 'outer;
                }
            }
        }
    }
    Ok(EpisodeRecord {
        success,
        steps_used: steps,
        plans: plan_results.len(),
        states,
        plan_results,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanEvalConfig {
    pub episodes: usize,
    /// Low-level steps between the start and goal states on the source trajectory.
    pub goal_offset_steps: usize,
    pub budget: usize,
    /// Blocks executed per plan; 0 executes the whole horizon.
    pub exec_blocks: usize,
    pub seed: u64,
}

impl Default for PlanEvalConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            goal_offset_steps: 100,
            budget: 150,
            exec_blocks: 0,
            seed: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanEvalReport {
    pub success_rate: f64,
    pub std_error: f64,
    pub successes: usize,
    pub episodes: Vec<EpisodeRecord>,
}

/// Start/goal pairs: a random frame of a fresh heuristic episode and the
/// frame `goal_offset_steps` later on the same episode.
pub fn sample_start_goal(env_cfg: &EnvConfig, pe: &PlanEvalConfig, index: usize) -> RoomWorldState {
    let offset = (pe.goal_offset_steps / env_cfg.frame_skip).max(1);
    let mut attempt = 0u64;
    loop {
        let seed = derive_seed(derive_seed(pe.seed, index as u64), attempt);
        attempt += 1;
        // long cap so the heuristic can still be mid-route at the goal frame
        let traj = env::run_episode(env_cfg, 3 * pe.goal_offset_steps + 200, seed);
        if traj.len() <= offset {
            continue;
        }
        let mut rng = SeededRng::new(seed ^ 0x5eed);
        let t0 = rng.below(traj.len() - offset);
        let goal = traj.states[t0 + offset].agent;
        return RoomWorldState { goal, ..traj.states[t0] };
    }
}

pub fn plan_eval(
    model: &WorldModel,
    env_cfg: &EnvConfig,
    cem_cfg: &CemConfig,
    pe: &PlanEvalConfig,
) -> Result<PlanEvalReport> {
    if pe.episodes == 0 {
        return Err(Error::invalid("plan evaluation needs at least one episode"));
    }
    let mut episodes = Vec::with_capacity(pe.episodes);
    for i in 0..pe.episodes {
        let start = sample_start_goal(env_cfg, pe, i);
        let cfg = CemConfig { seed: derive_seed(cem_cfg.seed, i as u64), ..cem_cfg.clone() };
        let mut rec = mpc_episode(model, env_cfg, &start, &cfg, pe.budget, pe.exec_blocks)?;
        rec.plan_results.clear();
        episodes.push(rec);
    }
    let successes = episodes.iter().filter(|e| e.success).count();
    let n = episodes.len() as f64;
    let p = successes as f64 / n;
    Ok(PlanEvalReport {
        success_rate: p,
        std_error: (p * (1.0 - p) / n).sqrt(),
        successes,
        episodes,
    })
}

/// One row per CEM iteration of every plan.
pub fn write_plan_trace(path: impl AsRef<Path>, plans: &[PlanResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["plan", "iteration", "best_cost", "mean_cost", "elite_cost_mean"])?;
    for (p, r) in plans.iter().enumerate() {
        for it in &r.iterations {
            w.write_record([
                p.to_string(),
                it.iteration.to_string(),
                it.best_cost.to_string(),
                it.mean_cost.to_string(),
                it.elite_cost_mean.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
