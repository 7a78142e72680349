//! Two rooms in the unit square, split by a vertical wall with one door.
//!
//! A point agent of fixed radius moves by bounded per-axis steps. Collisions
//! are resolved one axis at a time so the agent slides along walls.

mod dataset;

pub use dataset::{
    generate_dataset, load_dataset, perturb, read_dataset, replay, run_episode, sample_task, save_dataset,
    write_dataset, Dataset, Perturbation, Trajectory,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Agent gray levels indexed by color index; the wall is drawn at 1.0.
pub const AGENT_SHADES: [f64; 4] = [0.6, 0.3, 0.85, 0.45];

/// Supersampling grid per pixel axis.
const SUBSAMPLES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub wall_x: f64,
    pub wall_half_width: f64,
    pub door_center_y: f64,
    pub door_half_width: f64,
    pub agent_radius: f64,
    pub max_step: f64,
    pub render_size: usize,
    pub frame_skip: usize,
    pub success_radius: f64,
    /// Heuristic policy speed as a fraction of `max_step`.
    pub policy_speed: f64,
    /// Policy noise std as a fraction of `max_step`.
    pub noise_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            wall_x: 0.5,
            wall_half_width: 0.015,
            door_center_y: 0.5,
            door_half_width: 0.08,
            agent_radius: 0.03,
            max_step: 0.03,
            render_size: 32,
            frame_skip: 5,
            success_radius: 0.08,
            policy_speed: 0.27,
            noise_scale: 0.3,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.max_step > 0.0) {
            return bad("max_step must be positive");
        }
        if !(self.agent_radius > 0.0) || self.agent_radius >= self.door_half_width {
            return bad("agent_radius must be positive and smaller than the door half-width");
        }
        let lo = self.door_center_y - self.door_half_width;
        let hi = self.door_center_y + self.door_half_width;
        if !(lo > 0.0 && hi < 1.0) {
            return bad("door opening must lie strictly inside (0, 1)");
        }
        let (wl, wr) = self.blocked_x();
        if !(wl > self.agent_radius && wr < 1.0 - self.agent_radius) || self.wall_half_width < 0.0 {
            return bad("wall must leave room on both sides");
        }
        if self.render_size < 2 || self.frame_skip < 1 {
            return bad("render_size must be >= 2 and frame_skip >= 1");
        }
        if !(self.success_radius > 0.0) || !(self.policy_speed > 0.0) || !(self.noise_scale >= 0.0) {
            return bad("success_radius, policy_speed must be positive and noise_scale non-negative");
        }
        Ok(())
    }

    /// Range of agent-center x that overlaps the wall.
    pub fn blocked_x(&self) -> (f64, f64) {
        let m = self.wall_half_width + self.agent_radius;
        (self.wall_x - m, self.wall_x + m)
    }

    /// Range of agent-center y that fits through the door.
    pub fn door_band(&self) -> (f64, f64) {
        let m = self.door_half_width - self.agent_radius;
        (self.door_center_y - m, self.door_center_y + m)
    }

    pub fn obs_len(&self) -> usize {
        self.render_size * self.render_size
    }

    /// Largest distance one action block can move the agent.
    pub fn max_block_displacement(&self) -> f64 {
        self.frame_skip as f64 * self.max_step * std::f64::consts::SQRT_2
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoomWorldState {
    pub agent: [f64; 2],
    pub goal: [f64; 2],
    pub color_idx: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Room {
    Left,
    Right,
}

impl RoomWorldState {
    pub fn goal_distance(&self) -> f64 {
        dist(self.agent, self.goal)
    }

    pub fn reached_goal(&self, cfg: &EnvConfig) -> bool {
        self.goal_distance() <= cfg.success_radius
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn room_of(x: f64, cfg: &EnvConfig) -> Room {
    if x < cfg.wall_x {
        Room::Left
    } else {
        Room::Right
    }
}

/// Whether an agent centered at `p` is in a legal position.
pub fn is_valid_position(p: [f64; 2], cfg: &EnvConfig) -> bool {
    let r = cfg.agent_radius;
    let inside = p.iter().all(|&c| c >= r && c <= 1.0 - r);
    let (wl, wr) = cfg.blocked_x();
    let (bl, bh) = cfg.door_band();
    let in_wall = p[0] > wl && p[0] < wr;
    inside && (!in_wall || (p[1] >= bl && p[1] <= bh))
}

/// Uniform legal position inside one room.
pub fn sample_position(room: Room, cfg: &EnvConfig, rng: &mut SeededRng) -> [f64; 2] {
    let r = cfg.agent_radius;
    let (wl, wr) = cfg.blocked_x();
    let (x0, x1) = match room {
        Room::Left => (r, wl),
        Room::Right => (wr, 1.0 - r),
    };
    [rng.uniform_range(x0, x1), rng.uniform_range(r, 1.0 - r)]
}

pub fn clip_action(a: [f64; 2], cfg: &EnvConfig) -> [f64; 2] {
    a.map(|v| v.clamp(-cfg.max_step, cfg.max_step))
}

/// One low-level simulator step.
pub fn step(state: &RoomWorldState, action: [f64; 2], cfg: &EnvConfig) -> RoomWorldState {
    let a = clip_action(action, cfg);
    let r = cfg.agent_radius;
    let (wl, wr) = cfg.blocked_x();
    let (bl, bh) = cfg.door_band();
    let [x, y] = state.agent;

    let mut nx = (x + a[0]).clamp(r, 1.0 - r);
    let in_door = y >= bl && y <= bh;
    if !in_door {
        if x <= wl && nx > wl {
            nx = wl;
        } else if x >= wr && nx < wr {
            nx = wr;
        }
    }
    let mut ny = (y + a[1]).clamp(r, 1.0 - r);
    if nx > wl && nx < wr {
        ny = ny.clamp(bl, bh);
    }
    RoomWorldState {
        agent: [nx, ny],
        ..*state
    }
}

/// Grayscale frame in `[0, 1]`, row-major, row 0 at the top (y = 1).
pub fn render(state: &RoomWorldState, cfg: &EnvConfig) -> Vec<f64> {
    let s = cfg.render_size;
    let px = 1.0 / s as f64;
    let sub = SUBSAMPLES;
    let inv = 1.0 / (sub * sub) as f64;
    let shade = AGENT_SHADES[state.color_idx % AGENT_SHADES.len()];
    let [ax, ay] = state.agent;
    let r2 = cfg.agent_radius * cfg.agent_radius;
    let (door_lo, door_hi) = (
        cfg.door_center_y - cfg.door_half_width,
        cfg.door_center_y + cfg.door_half_width,
    );
    let mut frame = vec![0.0; s * s];
    for row in 0..s {
        for col in 0..s {
            let (mut wall, mut agent) = (0usize, 0usize);
            for i in 0..sub {
                let y = 1.0 - (row as f64 + (i as f64 + 0.5) / sub as f64) * px;
                for j in 0..sub {
                    let x = (col as f64 + (j as f64 + 0.5) / sub as f64) * px;
                    if (x - cfg.wall_x).abs() <= cfg.wall_half_width && !(y > door_lo && y < door_hi) {
                        wall += 1;
                    }
                    if (x - ax).powi(2) + (y - ay).powi(2) <= r2 {
                        agent += 1;
                    }
                }
            }
            frame[row * s + col] = (wall as f64 * inv).max(agent as f64 * inv * shade);
        }
    }
    frame
}

pub fn quantize(frame: &[f64]) -> Vec<u8> {
    frame.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn dequantize(pixels: &[u8]) -> Vec<f64> {
    pixels.iter().map(|&p| p as f64 / 255.0).collect()
}

/// Rendered frame at stored precision, as the model sees it.
pub fn observe(state: &RoomWorldState, cfg: &EnvConfig) -> Vec<f64> {
    dequantize(&quantize(&render(state, cfg)))
}

/// Pixel bounding box `(row0, row1, col0, col1)`, inclusive, of the agent disk.
pub fn agent_bbox(state: &RoomWorldState, cfg: &EnvConfig) -> (usize, usize, usize, usize) {
    let s = cfg.render_size as f64;
    let r = cfg.agent_radius;
    let [x, y] = state.agent;
    let clamp = |v: f64| (v.max(0.0) as usize).min(cfg.render_size - 1);
    (
        clamp(((1.0 - (y + r)) * s).floor()),
        clamp(((1.0 - (y - r)) * s).floor()),
        clamp(((x - r) * s).floor()),
        clamp(((x + r) * s).floor()),
    )
}

/// Noise-free heuristic action: head for the door while in the other room,
/// then for the goal. Capped at `policy_speed * max_step`.
pub fn heuristic_direction(state: &RoomWorldState, cfg: &EnvConfig) -> [f64; 2] {
    let (wl, wr) = cfg.blocked_x();
    let [x, y] = state.agent;
    let in_doorway = x > wl && x < wr;
    let target = if in_doorway || room_of(x, cfg) == room_of(state.goal[0], cfg) {
        state.goal
    } else {
        [cfg.wall_x, cfg.door_center_y]
    };
    let d = [target[0] - x, target[1] - y];
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let speed = cfg.policy_speed * cfg.max_step;
    if len <= speed {
        d
    } else {
        [d[0] * speed / len, d[1] * speed / len]
    }
}

pub fn heuristic_policy(state: &RoomWorldState, cfg: &EnvConfig, rng: &mut SeededRng) -> [f64; 2] {
    let base = heuristic_direction(state, cfg);
    let sd = cfg.noise_scale * cfg.max_step;
    clip_action([base[0] + sd * rng.normal(), base[1] + sd * rng.normal()], cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64, y: f64) -> RoomWorldState {
        RoomWorldState {
            agent: [x, y],
            goal: [0.8, 0.8],
            color_idx: 0,
        }
    }

    #[test]
    fn default_config_is_valid() {
        EnvConfig::default().validate().unwrap();
        let bad = EnvConfig { door_center_y: 0.95, ..EnvConfig::default() };
        assert!(bad.validate().is_err());
        assert!(EnvConfig { max_step: 0.0, ..EnvConfig::default() }.validate().is_err());
    }

    #[test]
    fn step_examples() {
        let cfg = EnvConfig::default();
        let s = at(0.2, 0.3);
        assert_eq!(step(&s, [0.0, 0.0], &cfg), s);
        let moved = step(&s, [0.02, 0.0], &cfg);
        assert_eq!(moved.agent, [0.2 + 0.02, 0.3]);
        // just left of a solid wall section
        let (wl, _) = cfg.blocked_x();
        let s = at(wl - 0.005, 0.2);
        let n = step(&s, [0.02, 0.01], &cfg);
        assert_eq!(n.agent, [wl, 0.2 + 0.01]);
        // through the door
        let s = at(wl - 0.005, 0.5);
        let n = step(&s, [0.02, 0.0], &cfg);
        assert_eq!(n.agent, [wl - 0.005 + 0.02, 0.5]);
        // actions beyond the bound are clipped
        let n = step(&at(0.2, 0.3), [1.0, -1.0], &cfg);
        assert!((n.agent[0] - 0.23).abs() < 1e-15 && (n.agent[1] - 0.27).abs() < 1e-15);
    }

    #[test]
    fn agent_never_leaves_the_map_or_enters_the_wall() {
        let cfg = EnvConfig::default();
        let mut rng = SeededRng::new(5);
        let mut s = at(0.2, 0.5);
        for k in 0..100_000 {
            let a = [rng.uniform_range(-0.05, 0.05), rng.uniform_range(-0.05, 0.05)];
            // bias toward the door every so often so crossings happen
            let a = if k % 7 == 0 { [a[0], (0.5 - s.agent[1]).clamp(-0.03, 0.03)] } else { a };
            s = step(&s, a, &cfg);
            assert!(is_valid_position(s.agent, &cfg), "{:?} at {k}", s.agent);
        }
    }

    #[test]
    fn render_examples() {
        let cfg = EnvConfig::default();
        let s = at(0.2, 0.3);
        let f = render(&s, &cfg);
        assert_eq!(f, render(&s, &cfg));
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
        let two_px = 2.0 / cfg.render_size as f64;
        assert_ne!(f, render(&at(0.2 + two_px, 0.3), &cfg));
        assert_ne!(f, render(&at(0.2, 0.3 + two_px), &cfg));
        // wall pixels lit, door gap dark
        let s32 = cfg.render_size;
        let col = (cfg.wall_x * s32 as f64) as usize;
        let row_of = |y: f64| ((1.0 - y) * s32 as f64) as usize;
        assert!(f[row_of(0.1) * s32 + col] > 0.0);
        assert_eq!(f[row_of(0.5) * s32 + col], 0.0);
    }

    #[test]
    fn recolor_changes_only_the_agent_box() {
        let cfg = EnvConfig::default();
        for (x, y) in [(0.2, 0.3), (0.77, 0.61), (0.5, 0.5), (0.04, 0.96)] {
            let a = at(x, y);
            let b = RoomWorldState { color_idx: 1, ..a };
            let (fa, fb) = (render(&a, &cfg), render(&b, &cfg));
            assert_ne!(fa, fb);
            let (r0, r1, c0, c1) = agent_bbox(&a, &cfg);
            for r in 0..cfg.render_size {
                for c in 0..cfg.render_size {
                    let i = r * cfg.render_size + c;
                    if !(r0..=r1).contains(&r) || !(c0..=c1).contains(&c) {
                        assert_eq!(fa[i], fb[i], "pixel ({r},{c}) outside box");
                    }
                }
            }
        }
    }

    fn unit(v: [f64; 2]) -> [f64; 2] {
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        [v[0] / n, v[1] / n]
    }

    #[test]
    fn policy_directions() {
        let cfg = EnvConfig { noise_scale: 0.0, ..EnvConfig::default() };
        let mut rng = SeededRng::new(0);
        let s = RoomWorldState { agent: [0.7, 0.2], goal: [0.85, 0.9], color_idx: 0 };
        let a = unit(heuristic_policy(&s, &cfg, &mut rng));
        let want = unit([0.15, 0.7]);
        assert!((a[0] - want[0]).abs() < 1e-12 && (a[1] - want[1]).abs() < 1e-12);
        let s = RoomWorldState { agent: [0.2, 0.2], goal: [0.85, 0.9], color_idx: 0 };
        let a = unit(heuristic_policy(&s, &cfg, &mut rng));
        let want = unit([cfg.wall_x - 0.2, cfg.door_center_y - 0.2]);
        assert!((a[0] - want[0]).abs() < 1e-12 && (a[1] - want[1]).abs() < 1e-12);
        let speed = (heuristic_direction(&s, &cfg).map(|v| v * v).iter().sum::<f64>()).sqrt();
        assert!((speed - cfg.policy_speed * cfg.max_step).abs() < 1e-15);
    }

    #[test]
    fn noisy_policy_mean_matches_noise_free_action() {
        let cfg = EnvConfig::default();
        let s = RoomWorldState { agent: [0.2, 0.2], goal: [0.85, 0.9], color_idx: 0 };
        let base = heuristic_direction(&s, &cfg);
        let mut rng = SeededRng::new(17);
        let n = 10_000;
        let (mut m, mut m2) = ([0.0; 2], [0.0; 2]);
        for _ in 0..n {
            let a = heuristic_policy(&s, &cfg, &mut rng);
            for k in 0..2 {
                m[k] += a[k];
                m2[k] += a[k] * a[k];
            }
        }
        for k in 0..2 {
            let mean = m[k] / n as f64;
            let var = m2[k] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - base[k]).abs() < 3.0 * se, "axis {k}: {mean} vs {}", base[k]);
        }
    }

    #[test]
    fn sampled_positions_are_valid() {
        let cfg = EnvConfig::default();
        let mut rng = SeededRng::new(3);
        for k in 0..10_000 {
            let room = if k % 2 == 0 { Room::Left } else { Room::Right };
            let p = sample_position(room, &cfg, &mut rng);
            assert!(is_valid_position(p, &cfg));
            assert_eq!(room_of(p[0], &cfg), room);
        }
    }
}
