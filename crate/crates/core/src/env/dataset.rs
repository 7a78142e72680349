use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{
    dist, heuristic_policy, is_valid_position, quantize, render, sample_position, step, EnvConfig,
    Room, RoomWorldState, AGENT_SHADES,
};
use crate::config::{from_flat_text, to_flat_text};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, SeededRng};

const MAGIC: &[u8; 8] = b"LWMDATA\0";
const VERSION: u32 = 1;

/// One recorded episode. Frame `t` shows `states[t]`; `action_blocks[t]`
/// holds the `frame_skip` low-level actions (x, y interleaved) that lead
/// from `states[t]` to `states[t + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<RoomWorldState>,
    pub frames: Vec<Vec<u8>>,
    pub action_blocks: Vec<Vec<f32>>,
    pub episode_seed: u64,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Frame `t` as pixel values in `[0, 1]`.
    pub fn observation(&self, t: usize) -> Vec<f64> {
        super::dequantize(&self.frames[t])
    }

    /// Action block `t` in units of `max_step`.
    pub fn normalized_block(&self, t: usize, cfg: &EnvConfig) -> Vec<f64> {
        self.action_blocks[t].iter().map(|&a| a as f64 / cfg.max_step).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: EnvConfig,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn mean_steps(&self) -> f64 {
        let fs = self.config.frame_skip as f64;
        let total: usize = self.trajectories.iter().map(|t| t.action_blocks.len()).sum();
        total as f64 * fs / self.trajectories.len().max(1) as f64
    }

    pub fn success_rate(&self) -> f64 {
        let n = self.trajectories.iter().filter(|t| t.success).count();
        n as f64 / self.trajectories.len().max(1) as f64
    }
}

/// Start and goal in opposite rooms, both drawn from `rng`.
pub fn sample_task(cfg: &EnvConfig, rng: &mut SeededRng) -> RoomWorldState {
    let (start_room, goal_room) = if rng.uniform() < 0.5 {
        (Room::Left, Room::Right)
    } else {
        (Room::Right, Room::Left)
    };
    let agent = sample_position(start_room, cfg, rng);
    let goal = sample_position(goal_room, cfg, rng);
    RoomWorldState { agent, goal, color_idx: 0 }
}

fn exec_block(state: &RoomWorldState, block: &[f32], cfg: &EnvConfig) -> RoomWorldState {
    block
        .chunks_exact(2)
        .fold(*state, |s, a| step(&s, [a[0] as f64, a[1] as f64], cfg))
}

/// Runs the heuristic policy for up to `max_steps` low-level steps, stopping
/// at the first block boundary inside the success radius.
pub fn run_episode(cfg: &EnvConfig, max_steps: usize, seed: u64) -> Trajectory {
    let mut rng = SeededRng::new(seed);
    let mut state = sample_task(cfg, &mut rng);
    let n_blocks = max_steps / cfg.frame_skip;
    let mut states = vec![state];
    let mut frames = vec![quantize(&render(&state, cfg))];
    let mut blocks = vec![];
    let mut success = state.reached_goal(cfg);
    while !success && blocks.len() < n_blocks {
        let mut block = Vec::with_capacity(2 * cfg.frame_skip);
        for _ in 0..cfg.frame_skip {
            let a = heuristic_policy(&state, cfg, &mut rng);
            let a32 = [a[0] as f32, a[1] as f32];
            state = step(&state, [a32[0] as f64, a32[1] as f64], cfg);
            block.extend_from_slice(&a32);
        }
        blocks.push(block);
        states.push(state);
        frames.push(quantize(&render(&state, cfg)));
        success = state.reached_goal(cfg);
    }
    Trajectory {
        states,
        frames,
        action_blocks: blocks,
        episode_seed: seed,
        success,
    }
}

pub fn generate_dataset(cfg: &EnvConfig, n_episodes: usize, max_steps: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be at least 1"));
    }
    let trajectories = (0..n_episodes)
        .map(|i| run_episode(cfg, max_steps, derive_seed(seed, i as u64)))
        .collect();
    Ok(Dataset {
        config: cfg.clone(),
        seed,
        trajectories,
    })
}

/// States reached by replaying the stored action blocks from the first state.
pub fn replay(traj: &Trajectory, cfg: &EnvConfig) -> Vec<RoomWorldState> {
    let mut out = vec![traj.states[0]];
    for b in &traj.action_blocks {
        let next = exec_block(out.last().unwrap(), b, cfg);
        out.push(next);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    /// Agent shade changes from the perturbation frame on.
    Recolor,
    /// Agent jumps to a random far-away position, then replays the original actions.
    Teleport,
}

pub fn perturb(
    traj: &Trajectory,
    kind: Perturbation,
    t_perturb: usize,
    cfg: &EnvConfig,
    rng: &mut SeededRng,
) -> Result<Trajectory> {
    let t_len = traj.len();
    if !(t_perturb > 1 && t_perturb < t_len) {
        return Err(Error::invalid(format!(
            "perturbation frame {t_perturb} outside (1, {t_len})"
        )));
    }
    let mut out = traj.clone();
    match kind {
        Perturbation::Recolor => {
            let new_idx = (traj.states[t_perturb].color_idx + 1) % AGENT_SHADES.len();
            for t in t_perturb..t_len {
                out.states[t].color_idx = new_idx;
            }
        }
        Perturbation::Teleport => {
            let prev = traj.states[t_perturb - 1].agent;
            let min_jump = cfg.max_block_displacement();
            let r = cfg.agent_radius;
            let target = loop {
                let p = [rng.uniform_range(r, 1.0 - r), rng.uniform_range(r, 1.0 - r)];
                if is_valid_position(p, cfg) && dist(p, prev) > min_jump {
                    break p;
                }
            };
            out.states[t_perturb].agent = target;
            for t in t_perturb + 1..t_len {
                out.states[t] = exec_block(&out.states[t - 1], &traj.action_blocks[t - 1], cfg);
            }
        }
    }
    for t in t_perturb..t_len {
        out.frames[t] = quantize(&render(&out.states[t], cfg));
    }
    Ok(out)
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(get(r)?))
}

pub fn write_dataset(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let cfg = to_flat_text(&ds.config)?;
    put_u32(w, cfg.len() as u32)?;
    w.write_all(cfg.as_bytes())?;
    put_u64(w, ds.seed)?;
    put_u32(w, ds.trajectories.len() as u32)?;
    let pixels = ds.config.obs_len();
    let block = 2 * ds.config.frame_skip;
    for t in &ds.trajectories {
        if t.frames.len() != t.len() || t.action_blocks.len() + 1 != t.len() {
            return Err(Error::Format("trajectory lengths are inconsistent".into()));
        }
        put_u64(w, t.episode_seed)?;
        put_u32(w, t.len() as u32)?;
        w.write_all(&[t.success as u8])?;
        for s in &t.states {
            for v in [s.agent[0], s.agent[1], s.goal[0], s.goal[1], s.color_idx as f64] {
                put_f64(w, v)?;
            }
        }
        for f in &t.frames {
            if f.len() != pixels {
                return Err(Error::Format("frame size does not match config".into()));
            }
            w.write_all(f)?;
        }
        for b in &t.action_blocks {
            if b.len() != block {
                return Err(Error::Format("action block size does not match config".into()));
            }
            for a in b {
                w.write_all(&a.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset> {
    if &get::<8>(r)? != MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = get_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(Error::Format("config block too large".into()));
    }
    let mut text = vec![0u8; n];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|_| Error::Format("config is not utf-8".into()))?;
    let config: EnvConfig = from_flat_text(&text)?;
    config.validate()?;
    let seed = get_u64(r)?;
    let count = get_u32(r)? as usize;
    let pixels = config.obs_len();
    let block = 2 * config.frame_skip;
    let mut trajectories = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let episode_seed = get_u64(r)?;
        let len = get_u32(r)? as usize;
        if len == 0 || len > 1 << 24 {
            return Err(Error::Format(format!("bad trajectory length {len}")));
        }
        let success = get::<1>(r)?[0] != 0;
        let mut states = Vec::with_capacity(len);
        for _ in 0..len {
            let v: Vec<f64> = (0..5).map(|_| get_f64(r)).collect::<Result<_>>()?;
            states.push(RoomWorldState {
                agent: [v[0], v[1]],
                goal: [v[2], v[3]],
                color_idx: v[4] as usize,
            });
        }
        let mut frames = Vec::with_capacity(len);
        for _ in 0..len {
            let mut f = vec![0u8; pixels];
            r.read_exact(&mut f)?;
            frames.push(f);
        }
        let mut action_blocks = Vec::with_capacity(len - 1);
        for _ in 0..len - 1 {
            let b: Vec<f32> = (0..block)
                .map(|_| get::<4>(r).map(f32::from_le_bytes))
                .collect::<Result<_>>()?;
            action_blocks.push(b);
        }
        trajectories.push(Trajectory {
            states,
            frames,
            action_blocks,
            episode_seed,
            success,
        });
    }
    Ok(Dataset {
        config,
        seed,
        trajectories,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_reproduces_stored_states() {
        let cfg = EnvConfig::default();
        let ds = generate_dataset(&cfg, 20, 300, 4).unwrap();
        for t in &ds.trajectories {
            let states = replay(t, &cfg);
            assert_eq!(states.len(), t.len());
            for (a, b) in states.iter().zip(&t.states) {
                assert!(dist(a.agent, b.agent) <= 1e-12);
            }
            assert_eq!(t.frames.len(), t.len());
        }
    }

    #[test]
    fn frame_skip_one_gives_single_action_blocks() {
        let cfg = EnvConfig { frame_skip: 1, ..EnvConfig::default() };
        let t = run_episode(&cfg, 50, 9);
        assert!(t.action_blocks.iter().all(|b| b.len() == 2));
    }

    #[test]
    fn episodes_are_seeded() {
        let cfg = EnvConfig::default();
        assert_eq!(run_episode(&cfg, 300, 1), run_episode(&cfg, 300, 1));
        assert_ne!(run_episode(&cfg, 300, 1), run_episode(&cfg, 300, 2));
    }

    #[test]
    fn heuristic_reaches_goal_and_matches_episode_length() {
        let cfg = EnvConfig::default();
        let ds = generate_dataset(&cfg, 200, 300, 11).unwrap();
        assert!(ds.success_rate() >= 0.95, "success {}", ds.success_rate());
        let mean = ds.mean_steps();
        assert!((82.0..=102.0).contains(&mean), "mean length {mean}");
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = EnvConfig::default();
        let ds = generate_dataset(&cfg, 5, 100, 2).unwrap();
        let mut buf = vec![];
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), ds);
        let mut bad = buf.clone();
        bad[3] = 0;
        assert!(read_dataset(&mut bad.as_slice()).is_err());
        assert!(read_dataset(&mut &buf[..buf.len() - 1]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        save_dataset(&ds, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), ds);
    }

    fn long_episode(cfg: &EnvConfig) -> Trajectory {
        (0..)
            .map(|s| run_episode(cfg, 300, s))
            .find(|t| t.len() >= 10)
            .unwrap()
    }

    #[test]
    fn recolor_keeps_positions_and_prefix() {
        let cfg = EnvConfig::default();
        let t = long_episode(&cfg);
        let mut rng = SeededRng::new(0);
        let p = perturb(&t, Perturbation::Recolor, 5, &cfg, &mut rng).unwrap();
        for k in 0..t.len() {
            assert_eq!(p.states[k].agent, t.states[k].agent);
        }
        assert_eq!(&p.frames[..5], &t.frames[..5]);
        assert_ne!(p.frames[5], t.frames[5]);
        assert_ne!(p.states[5].color_idx, t.states[5].color_idx);
    }

    #[test]
    fn teleport_jumps_further_than_one_block() {
        let cfg = EnvConfig::default();
        let t = long_episode(&cfg);
        for seed in 0..50 {
            let mut rng = SeededRng::new(seed);
            let p = perturb(&t, Perturbation::Teleport, 4, &cfg, &mut rng).unwrap();
            assert_eq!(&p.frames[..4], &t.frames[..4]);
            assert_eq!(&p.states[..4], &t.states[..4]);
            assert!(dist(p.states[4].agent, p.states[3].agent) > cfg.max_block_displacement());
            for s in &p.states {
                assert!(is_valid_position(s.agent, &cfg));
            }
        }
        let mut rng = SeededRng::new(0);
        assert!(perturb(&t, Perturbation::Teleport, 1, &cfg, &mut rng).is_err());
        assert!(perturb(&t, Perturbation::Teleport, t.len(), &cfg, &mut rng).is_err());
    }
}
