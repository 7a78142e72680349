//! Sketched isotropic Gaussian regularizer.
//!
//! Embeddings are projected onto random unit directions and each projection
//! is scored with the Epps–Pulley statistic: the weighted squared distance
//! between its empirical characteristic function and `exp(-t^2 / 2)`,
//! integrated with the trapezoid rule on a fixed knot grid. The regularizer is
//! the mean score over directions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, DenseArray, Graph, NumericsError, SeededRng, Var};

/// `M` unit directions in `R^d`, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet {
    directions: DenseArray,
    seed: u64,
}

impl DirectionSet {
    pub fn from_array(directions: DenseArray, seed: u64) -> Result<Self> {
        for m in 0..directions.rows() {
            let norm = directions.row(m).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("direction {m} has norm {norm}")));
            }
        }
        Ok(Self { directions, seed })
    }

    pub fn count(&self) -> usize {
        self.directions.rows()
    }

    pub fn dim(&self) -> usize {
        self.directions.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn as_array(&self) -> &DenseArray {
        &self.directions
    }

    pub fn direction(&self, m: usize) -> &[f64] {
        self.directions.row(m)
    }
}

/// Draws `count` directions uniformly on the unit sphere in `R^dim`
/// (normalized standard-normal vectors).
pub fn sample_directions(count: usize, dim: usize, seed: u64) -> Result<DirectionSet> {
    if dim == 0 {
        return Err(Error::invalid("direction dimension must be positive"));
    }
    if count == 0 {
        return Err(Error::invalid("at least one direction is required"));
    }
    let mut rng = SeededRng::new(seed);
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        loop {
            let v = rng.normal_vec(dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                continue;
            }
            data.extend(v.iter().map(|x| x / norm));
            break;
        }
    }
    Ok(DirectionSet {
        directions: DenseArray::matrix(count, dim, data),
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EppsPulleyConfig {
    pub knot_count: usize,
    pub knot_lo: f64,
    pub knot_hi: f64,
    /// Bandwidth of the Gaussian weight `exp(-t^2 / (2 b^2))`.
    pub weight_bandwidth: f64,
}

impl Default for EppsPulleyConfig {
    fn default() -> Self {
        Self {
            knot_count: 17,
            knot_lo: 0.2,
            knot_hi: 4.0,
            weight_bandwidth: 4.0,
        }
    }
}

impl EppsPulleyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knot_count < 2 {
            return Err(Error::Config("knot_count must be at least 2".into()));
        }
        if !(self.knot_lo < self.knot_hi) {
            return Err(Error::Config("knot_lo must be below knot_hi".into()));
        }
        if !(self.weight_bandwidth > 0.0) {
            return Err(Error::Config("weight_bandwidth must be positive".into()));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        (self.knot_hi - self.knot_lo) / (self.knot_count - 1) as f64
    }

    pub fn knots(&self) -> Vec<f64> {
        let dt = self.spacing();
        (0..self.knot_count)
            .map(|k| self.knot_lo + k as f64 * dt)
            .collect()
    }

    pub fn weight(&self, t: f64) -> f64 {
        (-t * t / (2.0 * self.weight_bandwidth * self.weight_bandwidth)).exp()
    }

    /// Plain trapezoid weights (no `w(t)` factor).
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let dt = self.spacing();
        (0..self.knot_count)
            .map(|k| {
                if k == 0 || k + 1 == self.knot_count {
                    dt / 2.0
                } else {
                    dt
                }
            })
            .collect()
    }
}

/// Trapezoid rule of `f` on the configured knot grid.
pub fn trapezoid(cfg: &EppsPulleyConfig, f: impl Fn(f64) -> f64) -> f64 {
    cfg.knots()
        .iter()
        .zip(cfg.trapezoid_weights())
        .map(|(&t, c)| c * f(t))
        .sum()
}

/// Projections `h^(m) = Z u^(m)`; row `m` holds the projection on direction `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBatch {
    pub values: DenseArray,
    pub sample_count: usize,
}

impl ProjectionBatch {
    pub fn projection(&self, m: usize) -> &[f64] {
        self.values.row(m)
    }
}

pub fn project(z: &DenseArray, dirs: &DirectionSet) -> Result<ProjectionBatch> {
    if z.cols() != dirs.dim() {
        return Err(Error::Shape(format!(
            "embeddings have {} columns, directions have {}",
            z.cols(),
            dirs.dim()
        )));
    }
    // (M x d) * (N x d)^T = M x N
    let values = dirs.as_array().matmul(&z.transpose())?;
    Ok(ProjectionBatch {
        values,
        sample_count: z.rows(),
    })
}

/// Real and imaginary parts of the empirical characteristic function.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Ecf {
    pub re: f64,
    pub im: f64,
}

impl Ecf {
    pub fn modulus(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

pub fn ecf(h: &[f64], ts: &[f64]) -> Result<Vec<Ecf>> {
    if h.is_empty() {
        return Err(Error::DegenerateBatch("empty sample for ECF".into()));
    }
    let n = h.len() as f64;
    Ok(ts
        .iter()
        .map(|&t| {
            let (mut re, mut im) = (0.0, 0.0);
            for &x in h {
                let (s, c) = (t * x).sin_cos();
                re += c;
                im += s;
            }
            Ecf {
                re: re / n,
                im: im / n,
            }
        })
        .collect())
}

/// Standard-normal characteristic function.
pub fn gaussian_cf(t: f64) -> f64 {
    (-0.5 * t * t).exp()
}

/// Precomputed knot grid shared by the plain and graph evaluations.
#[derive(Clone, Debug)]
struct Quadrature {
    lo: f64,
    step: f64,
    knots: Vec<f64>,
    /// Trapezoid weight times `w(t)`.
    coeff: Vec<f64>,
    target: Vec<f64>,
}

impl Quadrature {
    fn new(cfg: &EppsPulleyConfig) -> Result<Self> {
        cfg.validate()?;
        let knots = cfg.knots();
        let coeff = knots
            .iter()
            .zip(cfg.trapezoid_weights())
            .map(|(&t, c)| c * cfg.weight(t))
            .collect();
        let target = knots.iter().map(|&t| gaussian_cf(t)).collect();
        Ok(Self {
            lo: cfg.knot_lo,
            step: cfg.spacing(),
            knots,
            coeff,
            target,
        })
    }

    /// Fills `cos[k * n + i] = cos(t_k h_i)` and likewise `sin`, using the
    /// rotation `exp(i t_{k+1} h) = exp(i t_k h) exp(i dt h)` across the
    /// uniform grid. Samples are advanced in lanes so the loop vectorizes.
    fn fill_table(&self, h: &[f64], cos: &mut Vec<f64>, sin: &mut Vec<f64>) {
        const LANES: usize = 8;
        let (n, kn) = (h.len(), self.knots.len());
        cos.resize(n * kn, 0.0);
        sin.resize(n * kn, 0.0);
        let mut i0 = 0;
        while i0 < n {
            let w = LANES.min(n - i0);
            let (mut c, mut s, mut dc, mut ds) = ([1.0; LANES], [0.0; LANES], [1.0; LANES], [0.0; LANES]);
            for j in 0..w {
                let x = h[i0 + j];
                (s[j], c[j]) = (self.lo * x).sin_cos();
                (ds[j], dc[j]) = (self.step * x).sin_cos();
            }
            for k in 0..kn {
                let row = k * n + i0;
                if w == LANES {
                    cos[row..row + LANES].copy_from_slice(&c);
                    sin[row..row + LANES].copy_from_slice(&s);
                } else {
                    cos[row..row + w].copy_from_slice(&c[..w]);
                    sin[row..row + w].copy_from_slice(&s[..w]);
                }
                for j in 0..LANES {
                    let nc = c[j] * dc[j] - s[j] * ds[j];
                    s[j] = s[j] * dc[j] + c[j] * ds[j];
                    c[j] = nc;
                }
            }
            i0 += w;
        }
    }

    /// Per-knot ECF sums `(sum_n cos, sum_n sin)` from a filled table.
    fn ecf_sums(&self, n: usize, cos: &[f64], sin: &[f64], re: &mut [f64], im: &mut [f64]) {
        for k in 0..self.knots.len() {
            re[k] = cos[k * n..(k + 1) * n].iter().sum();
            im[k] = sin[k * n..(k + 1) * n].iter().sum();
        }
    }

    fn statistic_from_sums(&self, n: usize, re: &[f64], im: &[f64]) -> f64 {
        let n = n as f64;
        let mut total = 0.0;
        for k in 0..self.knots.len() {
            let dr = re[k] / n - self.target[k];
            let di = im[k] / n;
            total += self.coeff[k] * (dr * dr + di * di);
        }
        total
    }

    fn statistic(&self, h: &[f64], ws: &mut Workspace) -> f64 {
        self.fill_table(h, &mut ws.cos, &mut ws.sin);
        self.ecf_sums(h.len(), &ws.cos, &ws.sin, &mut ws.re, &mut ws.im);
        self.statistic_from_sums(h.len(), &ws.re, &ws.im)
    }

    /// Gradient of the statistic with respect to each sample, scaled by `scale`.
    fn statistic_grad(&self, h: &[f64], scale: f64, ws: &mut Workspace, out: &mut [f64]) {
        let n = h.len();
        self.fill_table(h, &mut ws.cos, &mut ws.sin);
        self.ecf_sums(n, &ws.cos, &ws.sin, &mut ws.re, &mut ws.im);
        let nf = n as f64;
        // d/dh_n = sum_k coeff_k (2/N) t_k [ -(R_k - phi0_k) sin(t_k h_n) + I_k cos(t_k h_n) ]
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..self.knots.len() {
            let common = scale * 2.0 / nf * self.coeff[k] * self.knots[k];
            let a = -common * (ws.re[k] / nf - self.target[k]);
            let b = common * (ws.im[k] / nf);
            let (cr, sr) = (&ws.cos[k * n..(k + 1) * n], &ws.sin[k * n..(k + 1) * n]);
            for ((o, &c), &s) in out.iter_mut().zip(cr).zip(sr) {
                *o += a * s + b * c;
            }
        }
    }
}

/// Scratch buffers reused across columns.
#[derive(Default)]
struct Workspace {
    cos: Vec<f64>,
    sin: Vec<f64>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl Workspace {
    fn new(knots: usize) -> Self {
        Self { re: vec![0.0; knots], im: vec![0.0; knots], ..Self::default() }
    }
}

/// Epps–Pulley statistic of a one-dimensional sample.
pub fn epps_pulley(h: &[f64], cfg: &EppsPulleyConfig) -> Result<f64> {
    if h.is_empty() {
        return Err(Error::DegenerateBatch("empty sample for Epps-Pulley".into()));
    }
    let q = Quadrature::new(cfg)?;
    Ok(q.statistic(h, &mut Workspace::new(q.knots.len())))
}

fn check_samples(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "SIGReg needs at least 2 samples, got {n}"
        )));
    }
    Ok(())
}

/// Mean Epps–Pulley statistic over the projections of `z` (samples x d).
pub fn sigreg(z: &DenseArray, dirs: &DirectionSet, cfg: &EppsPulleyConfig) -> Result<f64> {
    check_samples(z.rows())?;
    let proj = project(z, dirs)?;
    let q = Quadrature::new(cfg)?;
    let mut ws = Workspace::new(q.knots.len());
    let total: f64 = (0..dirs.count())
        .map(|m| q.statistic(proj.projection(m), &mut ws))
        .sum();
    Ok(total / dirs.count() as f64)
}

/// SIGReg applied to each history step's `B x d` slice, then averaged.
pub fn stepwise_sigreg(
    steps: &[DenseArray],
    dirs: &DirectionSet,
    cfg: &EppsPulleyConfig,
) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::invalid("stepwise SIGReg needs at least one step"));
    }
    let mut total = 0.0;
    for s in steps {
        total += sigreg(s, dirs, cfg)?;
    }
    Ok(total / steps.len() as f64)
}

/// Graph op: input `H` (samples x directions), output `1 x directions` with
/// the Epps–Pulley statistic of every column.
struct EppsPulleyOp {
    quad: Quadrature,
}

impl CustomOp for EppsPulleyOp {
    fn name(&self) -> &'static str {
        "epps_pulley"
    }

    fn forward(&self, inputs: &[&DenseArray]) -> Result<DenseArray, NumericsError> {
        let h = inputs[0].transpose();
        let (m, n) = (h.rows(), h.cols());
        if n == 0 {
            return Err(NumericsError::Invalid("empty sample for Epps-Pulley".into()));
        }
        let mut ws = Workspace::new(self.quad.knots.len());
        let out = (0..m).map(|j| self.quad.statistic(h.row(j), &mut ws)).collect();
        Ok(DenseArray::row_vector(out))
    }

    fn backward(
        &self,
        inputs: &[&DenseArray],
        _output: &DenseArray,
        grad_out: &DenseArray,
    ) -> Vec<DenseArray> {
        let h = inputs[0].transpose();
        let (m, n) = (h.rows(), h.cols());
        let mut ws = Workspace::new(self.quad.knots.len());
        let mut gt = DenseArray::zeros(&[m, n]);
        for j in 0..m {
            self.quad.statistic_grad(h.row(j), grad_out.data()[j], &mut ws, gt.row_mut(j));
        }
        vec![gt.transpose()]
    }
}

/// Per-column Epps–Pulley statistics of a `samples x columns` node.
pub fn epps_pulley_columns(g: &mut Graph, h: Var, cfg: &EppsPulleyConfig) -> Result<Var> {
    let op = EppsPulleyOp {
        quad: Quadrature::new(cfg)?,
    };
    Ok(g.custom(Box::new(op), &[h])?)
}

/// Differentiable SIGReg of a `samples x d` node.
pub fn sigreg_node(
    g: &mut Graph,
    z: Var,
    dirs: &DirectionSet,
    cfg: &EppsPulleyConfig,
) -> Result<Var> {
    check_samples(g.value(z).rows())?;
    if g.value(z).cols() != dirs.dim() {
        return Err(Error::Shape(format!(
            "embeddings have {} columns, directions have {}",
            g.value(z).cols(),
            dirs.dim()
        )));
    }
    let u = g.constant(dirs.as_array().clone());
    let h = g.matmul_bt(z, u)?;
    let stats = epps_pulley_columns(g, h, cfg)?;
    Ok(g.mean(stats)?)
}

/// Differentiable step-wise SIGReg over history-step slices.
pub fn stepwise_sigreg_node(
    g: &mut Graph,
    steps: &[Var],
    dirs: &DirectionSet,
    cfg: &EppsPulleyConfig,
) -> Result<Var> {
    if steps.is_empty() {
        return Err(Error::invalid("stepwise SIGReg needs at least one step"));
    }
    let mut acc: Option<Var> = None;
    for &s in steps {
        let v = sigreg_node(g, s, dirs, cfg)?;
        acc = Some(match acc {
            None => v,
            Some(a) => g.add(a, v)?,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / steps.len() as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ParamStore};

    /// Direct evaluation with `sin`/`cos` at every knot, no rotation recurrence.
    fn direct_statistic(h: &[f64], cfg: &EppsPulleyConfig) -> f64 {
        let n = h.len() as f64;
        trapezoid(cfg, |t| {
            let re = h.iter().map(|x| (t * x).cos()).sum::<f64>() / n;
            let im = h.iter().map(|x| (t * x).sin()).sum::<f64>() / n;
            cfg.weight(t) * ((re - gaussian_cf(t)).powi(2) + im * im)
        })
    }

    #[test]
    fn directions_on_sphere() {
        let d = sample_directions(1, 1, 9).unwrap();
        assert_eq!(d.direction(0)[0].abs(), 1.0);
        let d = sample_directions(64, 16, 3).unwrap();
        for m in 0..64 {
            let n: f64 = d.direction(m).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_eq!(d, sample_directions(64, 16, 3).unwrap());
        assert!(sample_directions(4, 0, 3).is_err());
    }

    #[test]
    fn directions_are_centered() {
        let d = sample_directions(10_000, 3, 21).unwrap();
        let mut mean = [0.0; 3];
        for m in 0..d.count() {
            for (a, x) in mean.iter_mut().zip(d.direction(m)) {
                *a += x / 10_000.0;
            }
        }
        // each coordinate has variance 1/3 so the mean's norm is ~ 0.01
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 0.03, "{norm}");
    }

    #[test]
    fn projection_examples() {
        let z = DenseArray::identity(4);
        let e1 = DirectionSet::from_array(DenseArray::matrix(1, 4, vec![1.0, 0.0, 0.0, 0.0]), 0)
            .unwrap();
        assert_eq!(project(&z, &e1).unwrap().projection(0), &[1.0, 0.0, 0.0, 0.0]);
        let zero = DenseArray::zeros(&[5, 4]);
        assert!(project(&zero, &e1).unwrap().values.data().iter().all(|&x| x == 0.0));
        assert!(project(&DenseArray::zeros(&[5, 3]), &e1).is_err());

        let mut rng = SeededRng::new(2);
        let z = DenseArray::matrix(20, 6, rng.normal_vec(120));
        let dirs = sample_directions(8, 6, 1).unwrap();
        let p = project(&z, &dirs).unwrap();
        for m in 0..8 {
            for n in 0..20 {
                let norm = z.row(n).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(p.projection(m)[n].abs() <= norm + 1e-12);
            }
        }
    }

    #[test]
    fn ecf_examples() {
        let v = ecf(&[0.0], &[0.3, 1.0, 7.0]).unwrap();
        assert!(v.iter().all(|e| e.re == 1.0 && e.im == 0.0));
        let v = ecf(&[2.5], &[1.3]).unwrap();
        assert!((v[0].re - (1.3f64 * 2.5).cos()).abs() < 1e-15);
        assert!((v[0].im - (1.3f64 * 2.5).sin()).abs() < 1e-15);
        assert!(ecf(&[], &[1.0]).is_err());

        let mut rng = SeededRng::new(17);
        let h = rng.normal_vec(10_000);
        let v = ecf(&h, &[1.0]).unwrap()[0];
        assert!((v.re - (-0.5f64).exp()).abs() < 0.02);
        assert!(v.im.abs() < 0.02);
        assert!(v.modulus() <= 1.0);
    }

    #[test]
    fn trapezoid_integrates_constants_exactly() {
        for k in [2, 3, 9, 17, 33] {
            let cfg = EppsPulleyConfig {
                knot_count: k,
                ..Default::default()
            };
            assert!((trapezoid(&cfg, |_| 1.0) - 3.8).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_are_in_unit_interval() {
        let cfg = EppsPulleyConfig::default();
        for t in cfg.knots() {
            let w = cfg.weight(t);
            assert!(w > 0.0 && w <= 1.0);
            assert!(w >= (-0.5f64).exp() - 1e-15);
        }
    }

    #[test]
    fn recurrence_matches_direct_evaluation() {
        let mut rng = SeededRng::new(4);
        let h: Vec<f64> = rng.normal_vec(300).iter().map(|x| 3.0 * x).collect();
        for k in [2, 9, 17, 33] {
            let cfg = EppsPulleyConfig {
                knot_count: k,
                ..Default::default()
            };
            let a = epps_pulley(&h, &cfg).unwrap();
            let b = direct_statistic(&h, &cfg);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_sample_scores_high() {
        let cfg = EppsPulleyConfig::default();
        let stat = epps_pulley(&[5.0; 64], &cfg).unwrap();
        assert!(stat > 0.1);
        assert!(epps_pulley(&[], &cfg).is_err());
    }

    #[test]
    fn sigreg_rejects_single_sample() {
        let dirs = sample_directions(4, 3, 0).unwrap();
        let err = sigreg(&DenseArray::zeros(&[1, 3]), &dirs, &EppsPulleyConfig::default());
        assert!(matches!(err, Err(Error::DegenerateBatch(_))));
        let err = stepwise_sigreg(
            &[DenseArray::zeros(&[1, 3])],
            &dirs,
            &EppsPulleyConfig::default(),
        );
        assert!(matches!(err, Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn sigreg_is_row_permutation_invariant() {
        let mut rng = SeededRng::new(8);
        let z = DenseArray::matrix(50, 4, rng.normal_vec(200));
        let mut rows: Vec<Vec<f64>> = (0..50).map(|i| z.row(i).to_vec()).collect();
        rows.reverse();
        rows.swap(3, 17);
        let zp = DenseArray::from_rows(&rows).unwrap();
        let dirs = sample_directions(32, 4, 5).unwrap();
        let cfg = EppsPulleyConfig::default();
        let a = sigreg(&z, &dirs, &cfg).unwrap();
        let b = sigreg(&zp, &dirs, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn graph_value_matches_plain_value() {
        let mut rng = SeededRng::new(10);
        let z = DenseArray::matrix(30, 5, rng.normal_vec(150));
        let dirs = sample_directions(16, 5, 2).unwrap();
        let cfg = EppsPulleyConfig::default();
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let s = sigreg_node(&mut g, zv, &dirs, &cfg).unwrap();
        assert!((g.scalar(s) - sigreg(&z, &dirs, &cfg).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn sigreg_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(12);
        let mut store = ParamStore::new();
        let z = store.add("z", DenseArray::matrix(12, 6, rng.normal_vec(72)));
        let dirs = sample_directions(10, 6, 4).unwrap();
        let cfg = EppsPulleyConfig::default();
        let err = grad_check(&store, 1e-5, |g, s| {
            let zv = g.param(s, z);
            sigreg_node(g, zv, &dirs, &cfg)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
