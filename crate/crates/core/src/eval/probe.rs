use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, DenseArray, Graph, ParamId, ParamStore, SeededRng, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Linear,
    Nonlinear,
}

impl ProbeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Nonlinear => "nonlinear",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub ridge: f64,
    pub test_fraction: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Share of the training split held back to pick the nonlinear probe's epoch.
    pub validation_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-6,
            test_fraction: 0.2,
            hidden: 64,
            epochs: 300,
            learning_rate: 1e-3,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub kind: ProbeKind,
    pub target_name: String,
    pub mse: f64,
    pub mse_std: f64,
    pub pearson_r: f64,
}

/// A fitted probe: affine map plus, for the nonlinear kind, a one-hidden-layer residual.
#[derive(Clone, Debug)]
pub struct Probe {
    /// `(d + 1) x k`, last row is the bias.
    linear: DenseArray,
    residual: Option<Residual>,
}

#[derive(Clone, Debug)]
struct Residual {
    params: ParamStore,
    in_mean: Vec<f64>,
    in_scale: Vec<f64>,
}

impl Probe {
    pub fn predict(&self, x: &DenseArray) -> Result<DenseArray> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, self.residual.as_ref().map(|r| &r.params))?;
        Ok(g.value(out).clone())
    }

    fn forward(&self, g: &mut Graph, x: Var, params: Option<&ParamStore>) -> Result<Var> {
        let d = g.value(x).cols();
        let k = self.linear.cols();
        let w = g.constant(self.linear.slice_rows(0, d));
        let b = g.constant(self.linear.slice_rows(d, d + 1));
        let lin = g.matmul(x, w)?;
        let lin = g.add_row(lin, b)?;
        let (Some(res), Some(store)) = (&self.residual, params) else {
            return Ok(lin);
        };
        let shift = g.constant(DenseArray::row_vector(res.in_mean.iter().map(|m| -m).collect()));
        let scale = g.constant(DenseArray::row_vector(res.in_scale.clone()));
        let xs = g.add_row(x, shift)?;
        let xs = g.mul_row(xs, scale)?;
        let [w1, b1, w2, b2] = [0, 1, 2, 3].map(|i| g.param(store, ParamId(i)));
        let h = g.matmul(xs, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h)?;
        let r = g.matmul(h, w2)?;
        let r = g.add_row(r, b2)?;
        debug_assert_eq!(g.value(r).cols(), k);
        Ok(g.add(lin, r)?)
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("pearson needs two equal-length samples of size >= 2"));
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateBatch("correlation undefined for a constant sample".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn rows(a: &DenseArray, idx: &[usize]) -> DenseArray {
    let mut out = DenseArray::zeros(&[idx.len(), a.cols()]);
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(a.row(i));
    }
    out
}

fn ridge(x: &DenseArray, y: &DenseArray, lambda: f64) -> Result<DenseArray> {
    let (n, d, k) = (x.rows(), x.cols(), y.cols());
    let xa = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x.get(i, j) } else { 1.0 });
    let ym = DMatrix::from_fn(n, k, |i, j| y.get(i, j));
    let mut gram = xa.transpose() * &xa;
    for j in 0..=d {
        gram[(j, j)] += lambda;
    }
    let rhs = xa.transpose() * ym;
    let sol = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::DegenerateBatch("ridge system is singular".into()))?,
    };
    Ok(DenseArray::matrix(d + 1, k, (0..d + 1).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| sol[(i, j)]).collect()))
}

fn mse(pred: &DenseArray, y: &DenseArray) -> f64 {
    pred.zip_map(y, |a, b| (a - b) * (a - b)).mean()
}

fn evaluate(kind: ProbeKind, name: &str, pred: &DenseArray, y: &DenseArray) -> Result<ProbeResult> {
    let (n, k) = (y.rows(), y.cols());
    let per_sample: Vec<f64> = (0..n)
        .map(|i| (0..k).map(|j| (pred.get(i, j) - y.get(i, j)).powi(2)).sum::<f64>() / k as f64)
        .collect();
    let m = per_sample.iter().sum::<f64>() / n as f64;
    let sd = (per_sample.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut r = 0.0;
    for j in 0..k {
        let a: Vec<f64> = (0..n).map(|i| pred.get(i, j)).collect();
        let b: Vec<f64> = (0..n).map(|i| y.get(i, j)).collect();
        r += pearson(&a, &b)?;
    }
    Ok(ProbeResult {
        kind,
        target_name: name.to_string(),
        mse: m,
        mse_std: sd,
        pearson_r: r / k as f64,
    })
}

/// Seeded train/test split of `0..n`.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).shuffle(&mut idx);
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    (train, test)
}

/// Fits a probe from embeddings (`n x d`) to targets (`n x k`) and scores
/// it on the held-out split.
pub fn fit_probe(
    embeddings: &DenseArray,
    targets: &DenseArray,
    target_name: &str,
    kind: ProbeKind,
    split_seed: u64,
    cfg: &ProbeConfig,
) -> Result<(Probe, ProbeResult)> {
    let n = embeddings.rows();
    if n < 20 {
        return Err(Error::invalid(format!("probe needs at least 20 samples, got {n}")));
    }
    if targets.rows() != n {
        return Err(Error::Shape(format!("{} embeddings for {} targets", n, targets.rows())));
    }
    for j in 0..targets.cols() {
        let first = targets.get(0, j);
        if (0..n).all(|i| targets.get(i, j) == first) {
            return Err(Error::DegenerateBatch(format!("target column {j} has zero variance")));
        }
    }
    let (train, test) = split_indices(n, cfg.test_fraction, split_seed);
    let (xt, yt) = (rows(embeddings, &train), rows(targets, &train));
    let (xs, ys) = (rows(embeddings, &test), rows(targets, &test));

    let probe = match kind {
        ProbeKind::Linear => Probe {
            linear: ridge(&xt, &yt, cfg.ridge)?,
            residual: None,
        },
        ProbeKind::Nonlinear => fit_nonlinear(&xt, &yt, split_seed, cfg)?,
    };
    let result = evaluate(kind, target_name, &probe.predict(&xs)?, &ys)?;
    Ok((probe, result))
}

fn fit_nonlinear(x: &DenseArray, y: &DenseArray, seed: u64, cfg: &ProbeConfig) -> Result<Probe> {
    let (n, d, k) = (x.rows(), x.cols(), y.cols());
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::new(seed ^ 0x9e37_79b9);
    rng.shuffle(&mut idx);
    let (xv, yv) = (rows(x, &idx[..n_val]), rows(y, &idx[..n_val]));
    let (xf, yf) = (rows(x, &idx[n_val..]), rows(y, &idx[n_val..]));

    let linear = ridge(&xf, &yf, cfg.ridge)?;
    let (mut in_mean, mut in_scale) = (vec![0.0; d], vec![1.0; d]);
    for j in 0..d {
        let col: Vec<f64> = (0..xf.rows()).map(|i| xf.get(i, j)).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        in_mean[j] = m;
        in_scale[j] = if s > 1e-12 { 1.0 / s } else { 1.0 };
    }
    let h = cfg.hidden;
    let mut params = ParamStore::new();
    let bound = 1.0 / (d as f64).sqrt();
    params.add("w1", DenseArray::matrix(d, h, (0..d * h).map(|_| rng.uniform_range(-bound, bound)).collect()));
    params.add("b1", DenseArray::zeros(&[1, h]));
    // zero output weights: training starts exactly at the ridge solution
    params.add("w2", DenseArray::zeros(&[h, k]));
    params.add("b2", DenseArray::zeros(&[1, k]));
    let mut probe = Probe {
        linear,
        residual: Some(Residual { params: params.clone(), in_mean, in_scale }),
    };

    let mut opt = Adam::new(AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() }, &params);
    let mut best = (mse(&probe.predict(&xv)?, &yv), params.clone());
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let xin = g.constant(xf.clone());
        let target = g.constant(yf.clone());
        let out = probe.forward(&mut g, xin, Some(&params))?;
        let diff = g.sub(out, target)?;
        let sq = g.square(diff)?;
        let loss = g.mean(sq)?;
        let grads = g.backward(loss)?.param_grads(&g, &params);
        opt.step(&mut params, &grads)?;
        probe.residual.as_mut().unwrap().params = params.clone();
        let val = mse(&probe.predict(&xv)?, &yv);
        if val < best.0 {
            best = (val, params.clone());
        }
    }
    probe.residual.as_mut().unwrap().params = best.1;
    Ok(probe)
}
