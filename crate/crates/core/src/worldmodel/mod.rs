//! Desk-scale encoder / action-conditioned predictor pair.
//!
//! Both networks are fully connected with GELU activations and end in a
//! projector: one affine layer followed by per-feature batch standardization
//! with a learned scale and shift. In eval mode the projector uses running
//! statistics instead of batch statistics.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Graph, ParamId, ParamStore, SeededRng, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldModelConfig {
    pub obs_height: usize,
    pub obs_width: usize,
    pub obs_channels: usize,
    pub embed_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    pub history_len: usize,
    pub action_dim: usize,
    pub frame_skip: usize,
    /// Hidden widths of the inverse-dynamics head; empty disables it.
    pub idm_hidden: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            obs_height: 32,
            obs_width: 32,
            obs_channels: 1,
            embed_dim: 32,
            encoder_hidden: vec![256, 128],
            predictor_hidden: vec![128, 128],
            history_len: 1,
            action_dim: 2,
            frame_skip: 5,
            idm_hidden: vec![],
            bn_momentum: 0.1,
            bn_eps: 1e-8,
        }
    }
}

impl WorldModelConfig {
    pub fn obs_len(&self) -> usize {
        self.obs_height * self.obs_width * self.obs_channels
    }

    pub fn block_dim(&self) -> usize {
        self.action_dim * self.frame_skip
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        if self.history_len < 1 || self.frame_skip < 1 || self.action_dim < 1 {
            return Err(Error::Config(
                "history_len, frame_skip and action_dim must be positive".into(),
            ));
        }
        if self.obs_len() == 0 {
            return Err(Error::Config("observation size must be positive".into()));
        }
        if self.predictor_hidden.is_empty() {
            return Err(Error::Config("predictor needs at least one hidden layer".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::Config("bad batch-norm momentum or eps".into()));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A single latent embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState(pub Vec<f64>);

impl LatentState {
    pub fn as_row(&self) -> DenseArray {
        DenseArray::row_vector(self.0.clone())
    }

    pub fn from_row(a: &DenseArray, r: usize) -> Self {
        Self(a.row(r).to_vec())
    }
}

/// Exponential running mean / unbiased variance of projector inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }
}

/// Batch moments captured during a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let weight = store.add(format!("{name}.weight"), DenseArray::matrix(fan_in, fan_out, w));
        let bias = bias.then(|| store.add(format!("{name}.bias"), DenseArray::zeros(&[1, fan_out])));
        Self { weight, bias }
    }

    fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), DenseArray::zeros(&[fan_in, fan_out]));
        Self { weight, bias: None }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = g.param(store, b);
            y = g.add_row(y, b)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
struct Projector {
    linear: Linear,
    scale: ParamId,
    shift: ParamId,
}

impl Projector {
    fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, fan_in: usize, dim: usize) -> Self {
        let linear = Linear::new(store, rng, &format!("{name}.linear"), fan_in, dim, true);
        let scale = store.add(format!("{name}.bn.scale"), DenseArray::filled(&[1, dim], 1.0));
        let shift = store.add(format!("{name}.bn.shift"), DenseArray::zeros(&[1, dim]));
        Self { linear, scale, shift }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stats: &RunningStats,
        eps: f64,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let pre = self.linear.forward(g, store, x)?;
        let (normed, moments) = match mode {
            Mode::Train => {
                let v = g.value(pre);
                let n = v.rows();
                if n < 2 {
                    return Err(Error::DegenerateBatch(
                        "train-mode projector needs at least 2 samples".into(),
                    ));
                }
                let (mean, var) = crate::numerics::column_moments(v);
                let unbiased = var.iter().map(|s| s * n as f64 / (n - 1) as f64).collect();
                let normed = g.batch_standardize(pre, eps)?;
                (normed, Some(BatchMoments { mean, var: unbiased }))
            }
            Mode::Eval => {
                let neg_mean = g.constant(DenseArray::row_vector(
                    stats.mean.iter().map(|m| -m).collect(),
                ));
                let inv_std = g.constant(DenseArray::row_vector(
                    stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
                ));
                let centered = g.add_row(pre, neg_mean)?;
                (g.mul_row(centered, inv_std)?, None)
            }
        };
        let scale = g.param(store, self.scale);
        let shift = g.param(store, self.shift);
        let y = g.mul_row(normed, scale)?;
        Ok((g.add_row(y, shift)?, moments))
    }
}

/// Encoder, predictor and optional inverse-dynamics head with their weights.
#[derive(Clone, Debug)]
pub struct WorldModel {
    config: WorldModelConfig,
    params: ParamStore,
    encoder_layers: Vec<Linear>,
    encoder_proj: Projector,
    predictor_state_in: Linear,
    predictor_action_in: Linear,
    predictor_layers: Vec<Linear>,
    predictor_proj: Projector,
    idm_layers: Vec<Linear>,
    pub encoder_stats: RunningStats,
    pub predictor_stats: RunningStats,
}

impl WorldModel {
    pub fn new(config: WorldModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;

        let mut encoder_layers = vec![];
        let mut width = config.obs_len();
        for (i, &h) in config.encoder_hidden.iter().enumerate() {
            encoder_layers.push(Linear::new(&mut store, &mut rng, &format!("encoder.{i}"), width, h, true));
            width = h;
        }
        let encoder_proj = Projector::new(&mut store, &mut rng, "encoder.proj", width, d);

        let ph = &config.predictor_hidden;
        let predictor_state_in =
            Linear::new(&mut store, &mut rng, "predictor.state_in", d * config.history_len, ph[0], true);
        let predictor_action_in = Linear::zeros(&mut store, "predictor.action_in", config.block_dim(), ph[0]);
        let mut predictor_layers = vec![];
        for i in 1..ph.len() {
            predictor_layers.push(Linear::new(&mut store, &mut rng, &format!("predictor.{i}"), ph[i - 1], ph[i], true));
        }
        let predictor_proj = Projector::new(&mut store, &mut rng, "predictor.proj", *ph.last().unwrap(), d);

        let mut idm_layers = vec![];
        if !config.idm_hidden.is_empty() {
            let mut width = 2 * d;
            for (i, &h) in config.idm_hidden.iter().enumerate() {
                idm_layers.push(Linear::new(&mut store, &mut rng, &format!("idm.{i}"), width, h, true));
                width = h;
            }
            idm_layers.push(Linear::new(&mut store, &mut rng, "idm.out", width, config.block_dim(), true));
        }

        Ok(Self {
            encoder_stats: RunningStats::new(d),
            predictor_stats: RunningStats::new(d),
            config,
            params: store,
            encoder_layers,
            encoder_proj,
            predictor_state_in,
            predictor_action_in,
            predictor_layers,
            predictor_proj,
            idm_layers,
        })
    }

    pub fn config(&self) -> &WorldModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn has_idm(&self) -> bool {
        !self.idm_layers.is_empty()
    }

    fn check_obs(&self, obs: &DenseArray) -> Result<()> {
        if obs.cols() != self.config.obs_len() || obs.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "observations {:?}, expected rows of {} pixels",
                obs.shape(),
                self.config.obs_len()
            )));
        }
        Ok(())
    }

    /// Encoder applied to an `n x pixels` node.
    pub fn encode_node(&self, g: &mut Graph, obs: Var, mode: Mode) -> Result<(Var, Option<BatchMoments>)> {
        self.check_obs(g.value(obs))?;
        let mut x = obs;
        for layer in &self.encoder_layers {
            let h = layer.forward(g, &self.params, x)?;
            x = g.gelu(h)?;
        }
        self.encoder_proj
            .forward(g, &self.params, &self.encoder_stats, self.config.bn_eps, x, mode)
    }

    /// Predictor applied to `history_len` nodes of shape `n x d` (oldest
    /// first) and an `n x block_dim` action node.
    pub fn predict_node(
        &self,
        g: &mut Graph,
        history: &[Var],
        actions: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchMoments>)> {
        if history.len() != self.config.history_len {
            return Err(Error::invalid(format!(
                "predictor expects {} history steps, got {}",
                self.config.history_len,
                history.len()
            )));
        }
        let n = g.value(actions).rows();
        if g.value(actions).cols() != self.config.block_dim() {
            return Err(Error::Shape(format!(
                "action block has {} values, expected {}",
                g.value(actions).cols(),
                self.config.block_dim()
            )));
        }
        for &h in history {
            let v = g.value(h);
            if v.cols() != self.config.embed_dim || v.rows() != n {
                return Err(Error::Shape(format!(
                    "history entry {:?} does not match {} x {}",
                    v.shape(),
                    n,
                    self.config.embed_dim
                )));
            }
        }
        let z = if history.len() == 1 {
            history[0]
        } else {
            g.concat_cols(history)?
        };
        let hz = self.predictor_state_in.forward(g, &self.params, z)?;
        let ha = self.predictor_action_in.forward(g, &self.params, actions)?;
        let h = g.add(hz, ha)?;
        let mut x = g.gelu(h)?;
        for layer in &self.predictor_layers {
            let h = layer.forward(g, &self.params, x)?;
            x = g.gelu(h)?;
        }
        self.predictor_proj
            .forward(g, &self.params, &self.predictor_stats, self.config.bn_eps, x, mode)
    }

    /// Inverse-dynamics head `(z_t, z_{t+1}) -> action block`.
    pub fn idm_node(&self, g: &mut Graph, z_t: Var, z_next: Var) -> Result<Var> {
        if self.idm_layers.is_empty() {
            return Err(Error::Config("model was built without an inverse-dynamics head".into()));
        }
        let mut x = g.concat_cols(&[z_t, z_next])?;
        let last = self.idm_layers.len() - 1;
        for (i, layer) in self.idm_layers.iter().enumerate() {
            x = layer.forward(g, &self.params, x)?;
            if i < last {
                x = g.gelu(x)?;
            }
        }
        Ok(x)
    }

    pub fn update_encoder_stats(&mut self, m: &BatchMoments) {
        blend(&mut self.encoder_stats, m, self.config.bn_momentum);
    }

    pub fn update_predictor_stats(&mut self, m: &BatchMoments) {
        blend(&mut self.predictor_stats, m, self.config.bn_momentum);
    }

    /// Encodes `n x pixels` observations; train mode updates running stats.
    pub fn encode(&mut self, obs: &DenseArray, mode: Mode) -> Result<DenseArray> {
        let mut g = Graph::new();
        let o = g.constant(obs.clone());
        let (z, moments) = self.encode_node(&mut g, o, mode)?;
        if let Some(m) = moments {
            self.update_encoder_stats(&m);
        }
        Ok(g.value(z).clone())
    }

    pub fn encode_eval(&self, obs: &DenseArray) -> Result<DenseArray> {
        let mut g = Graph::new();
        let o = g.constant(obs.clone());
        let (z, _) = self.encode_node(&mut g, o, Mode::Eval)?;
        Ok(g.value(z).clone())
    }

    pub fn encode_one(&self, obs: &[f64]) -> Result<LatentState> {
        let z = self.encode_eval(&DenseArray::row_vector(obs.to_vec()))?;
        Ok(LatentState::from_row(&z, 0))
    }

    pub fn predict(&mut self, history: &[DenseArray], actions: &DenseArray, mode: Mode) -> Result<DenseArray> {
        let mut g = Graph::new();
        let h: Vec<Var> = history.iter().map(|a| g.constant(a.clone())).collect();
        let a = g.constant(actions.clone());
        let (z, moments) = self.predict_node(&mut g, &h, a, mode)?;
        if let Some(m) = moments {
            self.update_predictor_stats(&m);
        }
        Ok(g.value(z).clone())
    }

    pub fn predict_eval(&self, history: &[DenseArray], actions: &DenseArray) -> Result<DenseArray> {
        let mut g = Graph::new();
        let h: Vec<Var> = history.iter().map(|a| g.constant(a.clone())).collect();
        let a = g.constant(actions.clone());
        let (z, _) = self.predict_node(&mut g, &h, a, Mode::Eval)?;
        Ok(g.value(z).clone())
    }

    pub fn predict_one(&self, history: &[LatentState], action_block: &[f64]) -> Result<LatentState> {
        let h: Vec<DenseArray> = history.iter().map(LatentState::as_row).collect();
        let z = self.predict_eval(&h, &DenseArray::row_vector(action_block.to_vec()))?;
        Ok(LatentState::from_row(&z, 0))
    }

    /// Autoregressive eval-mode rollout. `history` holds `history_len`
    /// batches (`n x d`, oldest first); `actions` holds one `n x block_dim`
    /// batch per step. Returns one prediction batch per action step.
    pub fn rollout(&self, history: &[DenseArray], actions: &[DenseArray]) -> Result<Vec<DenseArray>> {
        if actions.is_empty() {
            return Err(Error::invalid("rollout horizon must be at least 1"));
        }
        let mut window: Vec<DenseArray> = history.to_vec();
        let mut out = Vec::with_capacity(actions.len());
        for a in actions {
            let next = self.predict_eval(&window, a)?;
            window.remove(0);
            window.push(next.clone());
            out.push(next);
        }
        Ok(out)
    }

    /// Single-trajectory rollout; the initial state fills the whole history.
    pub fn rollout_one(&self, init: &LatentState, action_blocks: &[Vec<f64>]) -> Result<Vec<LatentState>> {
        let history = vec![init.as_row(); self.config.history_len];
        let actions: Vec<DenseArray> = action_blocks
            .iter()
            .map(|a| DenseArray::row_vector(a.clone()))
            .collect();
        Ok(self
            .rollout(&history, &actions)?
            .iter()
            .map(|z| LatentState::from_row(z, 0))
            .collect())
    }
}

fn blend(stats: &mut RunningStats, m: &BatchMoments, momentum: f64) {
    for (r, b) in stats.mean.iter_mut().zip(&m.mean) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
    for (r, b) in stats.var.iter_mut().zip(&m.var) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    pub(crate) fn tiny_config() -> WorldModelConfig {
        WorldModelConfig {
            obs_height: 3,
            obs_width: 3,
            obs_channels: 1,
            embed_dim: 4,
            encoder_hidden: vec![5],
            predictor_hidden: vec![6],
            history_len: 1,
            action_dim: 2,
            frame_skip: 2,
            idm_hidden: vec![],
            bn_momentum: 0.1,
            bn_eps: 1e-8,
        }
    }

    fn random_obs(rng: &mut SeededRng, n: usize, len: usize) -> DenseArray {
        DenseArray::matrix(n, len, (0..n * len).map(|_| rng.uniform()).collect())
    }

    #[test]
    fn eval_encoding_is_deterministic() {
        let m = WorldModel::new(WorldModelConfig::default(), 1).unwrap();
        let mut rng = SeededRng::new(2);
        let o = random_obs(&mut rng, 1, 1024);
        let both = DenseArray::from_rows(&[o.row(0).to_vec(), o.row(0).to_vec()]).unwrap();
        let z = m.encode_eval(&both).unwrap();
        assert_eq!(z.row(0), z.row(1));
        assert_eq!(m.encode_eval(&both).unwrap(), z);
    }

    #[test]
    fn train_mode_standardizes_to_scale_and_shift() {
        let mut m = WorldModel::new(WorldModelConfig::default(), 3).unwrap();
        let scale = m.params().find("encoder.proj.bn.scale").unwrap();
        let shift = m.params().find("encoder.proj.bn.shift").unwrap();
        let d = m.config().embed_dim;
        m.params_mut().get_mut(scale).data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = 0.5 + 0.1 * i as f64);
        m.params_mut().get_mut(shift).data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = -1.0 + 0.05 * i as f64);
        let mut rng = SeededRng::new(4);
        let mut obs = random_obs(&mut rng, 16, 1024);
        for i in 0..16 {
            let level = i as f64 / 15.0;
            obs.row_mut(i).iter_mut().for_each(|x| *x = 255.0 * (level + 0.1 * *x));
        }
        let before = m.encoder_stats.clone();
        let z = m.encode(&obs, Mode::Train).unwrap();
        assert_ne!(before, m.encoder_stats, "running stats must move in train mode");
        for j in 0..d {
            let col: Vec<f64> = (0..16).map(|i| z.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0).sqrt();
            assert!((mean - m.params().get(shift).data()[j]).abs() < 1e-6);
            assert!((std - m.params().get(scale).data()[j]).abs() < 1e-6);
        }
        let frozen = m.encoder_stats.clone();
        m.encode(&obs, Mode::Eval).unwrap();
        assert_eq!(frozen, m.encoder_stats);
    }

    #[test]
    fn wrong_observation_shape_is_rejected() {
        let m = WorldModel::new(WorldModelConfig::default(), 1).unwrap();
        assert!(m.encode_eval(&DenseArray::zeros(&[2, 100])).is_err());
    }

    #[test]
    fn zero_action_weights_ignore_actions() {
        let mut m = WorldModel::new(tiny_config(), 5).unwrap();
        let z = LatentState(vec![0.3, -0.2, 0.1, 0.9]);
        let a0 = vec![0.0; 4];
        let a1 = vec![1.0; 4];
        assert_eq!(m.predict_one(&[z.clone()], &a0).unwrap(), m.predict_one(&[z.clone()], &a1).unwrap());
        let aid = m.params().find("predictor.action_in.weight").unwrap();
        m.params_mut().get_mut(aid).data_mut()[0] = 0.5;
        assert_ne!(m.predict_one(&[z.clone()], &a0).unwrap(), m.predict_one(&[z], &a1).unwrap());
    }

    #[test]
    fn predict_checks_history_length() {
        let m = WorldModel::new(tiny_config(), 5).unwrap();
        let z = LatentState(vec![0.0; 4]);
        assert!(m.predict_one(&[z.clone(), z], &[0.0; 4]).is_err());
    }

    fn perturbed_model(seed: u64) -> WorldModel {
        let mut m = WorldModel::new(tiny_config(), seed).unwrap();
        let mut rng = SeededRng::new(seed + 100);
        for v in m.params_mut().values_mut() {
            for x in v.data_mut() {
                *x += 0.3 * rng.normal();
            }
        }
        m.predictor_stats.mean = vec![0.1, -0.1, 0.2, 0.0];
        m.predictor_stats.var = vec![0.5, 1.5, 1.0, 2.0];
        m
    }

    #[test]
    fn rollout_examples() {
        let m = perturbed_model(9);
        let z0 = LatentState(vec![0.2, 0.1, -0.4, 0.3]);
        let acts: Vec<Vec<f64>> = (0..3).map(|k| vec![0.1 * k as f64, -0.2, 0.3, 0.05]).collect();
        let one = m.rollout_one(&z0, &acts[..1]).unwrap();
        assert_eq!(one[0], m.predict_one(&[z0.clone()], &acts[0]).unwrap());
        let three = m.rollout_one(&z0, &acts).unwrap();
        let two = m.rollout_one(&z0, &acts[..2]).unwrap();
        assert_eq!(&three[..2], &two[..]);
        let mut changed = acts.clone();
        changed[2] = vec![1.0, 1.0, 1.0, 1.0];
        let alt = m.rollout_one(&z0, &changed).unwrap();
        assert_eq!(&alt[..2], &three[..2]);
        assert_ne!(alt[2], three[2]);
        assert!(m.rollout_one(&z0, &[]).is_err());
        // eval purity
        assert_eq!(m.rollout_one(&z0, &acts).unwrap(), three);
    }

    #[test]
    fn encoder_and_predictor_pass_grad_check() {
        let m = perturbed_model(21);
        let mut rng = SeededRng::new(3);
        let obs = random_obs(&mut rng, 6, 9);
        let acts = DenseArray::matrix(6, 4, rng.normal_vec(24));
        for mode in [Mode::Train, Mode::Eval] {
            let err = grad_check(m.params(), 1e-5, |g, store| {
                let mut local = m.clone();
                *local.params_mut() = store.clone();
                let o = g.constant(obs.clone());
                let (z, _) = local.encode_node(g, o, mode)?;
                let a = g.constant(acts.clone());
                let (zh, _) = local.predict_node(g, &[z], a, mode)?;
                let sq = g.square(zh)?;
                let s1 = g.sum(sq)?;
                let zz = g.square(z)?;
                let s2 = g.sum(zz)?;
                let t = g.add(s1, s2)?;
                Ok::<_, Error>(t)
            })
            .unwrap();
            assert!(err < 1e-4, "{mode:?}: {err}");
        }
    }
}
