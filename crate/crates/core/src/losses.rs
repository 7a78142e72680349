//! Training objectives over a window of embeddings.
//!
//! Embeddings arrive as one `B x d` node per time step. Predictions are
//! aligned to the tail of that window: with `P` predictions, `predicted[k]`
//! estimates `steps[T - P + k]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, DenseArray, Graph, NumericsError, Var};
use crate::sigreg::{stepwise_sigreg_node, DirectionSet, EppsPulleyConfig};
use crate::worldmodel::WorldModel;

/// Encoded steps and the predictor's estimates of the later ones.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub steps: Vec<Var>,
    pub predicted: Vec<Var>,
}

impl EmbeddingBatch {
    pub fn targets(&self) -> &[Var] {
        &self.steps[self.steps.len() - self.predicted.len()..]
    }

    fn check(&self, g: &Graph) -> Result<(usize, usize)> {
        let first = self
            .steps
            .first()
            .ok_or_else(|| Error::invalid("embedding batch has no steps"))?;
        if self.predicted.is_empty() || self.predicted.len() > self.steps.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} steps",
                self.predicted.len(),
                self.steps.len()
            )));
        }
        let shape = g.value(*first).shape().to_vec();
        for &v in self.steps.iter().chain(&self.predicted) {
            if g.value(v).shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "embedding node {:?} differs from {:?}",
                    g.value(v).shape(),
                    shape
                )));
            }
        }
        Ok((shape[0], shape[1]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PldmCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub nu: f64,
    pub mu: f64,
    pub epsilon: f64,
}

impl Default for PldmCoefficients {
    fn default() -> Self {
        Self {
            alpha: 18.0,
            beta: 12.0,
            gamma: 0.2,
            zeta: 0.7,
            nu: 0.0,
            mu: 0.0,
            epsilon: 1e-4,
        }
    }
}

impl PldmCoefficients {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.zeta, self.nu, self.mu, self.epsilon];
        if all.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("PLDM coefficients must be finite".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("PLDM epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LewmTerms {
    pub total: Var,
    pub pred: Var,
    pub sigreg: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LewmValues {
    pub total: f64,
    pub pred: f64,
    pub sigreg: f64,
}

impl LewmTerms {
    pub fn values(&self, g: &Graph) -> LewmValues {
        LewmValues {
            total: g.scalar(self.total),
            pred: g.scalar(self.pred),
            sigreg: g.scalar(self.sigreg),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PldmTerms {
    pub total: Var,
    pub pred: Var,
    pub var: Var,
    pub cov: Var,
    pub time_sim: Var,
    pub time_var: Var,
    pub time_cov: Var,
    /// Absent when the model has no inverse-dynamics head.
    pub idm: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PldmValues {
    pub total: f64,
    pub pred: f64,
    pub var: f64,
    pub cov: f64,
    pub time_sim: f64,
    pub time_var: f64,
    pub time_cov: f64,
    pub idm: f64,
}

impl PldmTerms {
    pub fn values(&self, g: &Graph) -> PldmValues {
        PldmValues {
            total: g.scalar(self.total),
            pred: g.scalar(self.pred),
            var: g.scalar(self.var),
            cov: g.scalar(self.cov),
            time_sim: g.scalar(self.time_sim),
            time_var: g.scalar(self.time_var),
            time_cov: g.scalar(self.time_cov),
            idm: self.idm.map_or(0.0, |v| g.scalar(v)),
        }
    }
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut it = vars.iter();
    let mut acc = *it.next().ok_or_else(|| Error::invalid("nothing to sum"))?;
    for &v in it {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Sum over `k` of `||a_k - b_k||^2`, returned as a scalar node.
fn squared_distance(g: &mut Graph, a: &[Var], b: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let diff = g.sub(x, y)?;
        let sq = g.square(diff)?;
        parts.push(g.sum(sq)?);
    }
    sum_vars(g, &parts)
}

/// Mean squared error over every (step, sample, feature).
pub fn pred_loss(g: &mut Graph, predicted: &[Var], targets: &[Var]) -> Result<Var> {
    if predicted.is_empty() || predicted.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predicted.len(),
            targets.len()
        )));
    }
    for (&p, &t) in predicted.iter().zip(targets) {
        if g.value(p).shape() != g.value(t).shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?}",
                g.value(p).shape(),
                g.value(t).shape()
            )));
        }
    }
    let count: usize = predicted.iter().map(|&p| g.value(p).len()).sum();
    let total = squared_distance(g, predicted, targets)?;
    Ok(g.scale(total, 1.0 / count as f64)?)
}

/// Prediction error plus `lambda` times step-wise SIGReg of the encoded steps.
pub fn lewm_loss(
    g: &mut Graph,
    batch: &EmbeddingBatch,
    dirs: &DirectionSet,
    cfg: &EppsPulleyConfig,
    lambda: f64,
) -> Result<LewmTerms> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    batch.check(g)?;
    let pred = pred_loss(g, &batch.predicted, batch.targets())?;
    let sigreg = stepwise_sigreg_node(g, &batch.steps, dirs, cfg)?;
    let total = if lambda == 0.0 {
        pred
    } else {
        let reg = g.scale(sigreg, lambda)?;
        g.add(pred, reg)?
    };
    Ok(LewmTerms { total, pred, sigreg })
}

enum HingeAxis {
    /// One `n x d` input, standard deviation down each column, `1 x d` out.
    Rows,
    /// `k` inputs of equal shape, standard deviation across inputs, same shape out.
    Inputs,
}

/// `max(0, 1 - sqrt(sum(x^2) / denom) + eps)` over already-centered inputs.
/// Zero-spread positions get a zero gradient.
struct StdHinge {
    eps: f64,
    denom: f64,
    axis: HingeAxis,
}

impl StdHinge {
    fn spread(&self, inputs: &[&DenseArray]) -> DenseArray {
        match self.axis {
            HingeAxis::Rows => {
                let x = inputs[0];
                let mut s = vec![0.0; x.cols()];
                for r in 0..x.rows() {
                    for (acc, v) in s.iter_mut().zip(x.row(r)) {
                        *acc += v * v;
                    }
                }
                DenseArray::row_vector(s.into_iter().map(|v| (v / self.denom).sqrt()).collect())
            }
            HingeAxis::Inputs => {
                let mut s = DenseArray::zeros(inputs[0].shape());
                for x in inputs {
                    for (acc, v) in s.data_mut().iter_mut().zip(x.data()) {
                        *acc += v * v;
                    }
                }
                s.map(|v| (v / self.denom).sqrt())
            }
        }
    }
}

impl CustomOp for StdHinge {
    fn name(&self) -> &'static str {
        "std_hinge"
    }

    fn forward(&self, inputs: &[&DenseArray]) -> Result<DenseArray, NumericsError> {
        if let HingeAxis::Inputs = self.axis {
            for x in &inputs[1..] {
                if x.shape() != inputs[0].shape() {
                    return Err(NumericsError::ShapeMismatch {
                        op: "std_hinge",
                        left: inputs[0].shape().to_vec(),
                        right: x.shape().to_vec(),
                    });
                }
            }
        }
        Ok(self.spread(inputs).map(|s| (1.0 - s + self.eps).max(0.0)))
    }

    fn backward(&self, inputs: &[&DenseArray], _output: &DenseArray, grad_out: &DenseArray) -> Vec<DenseArray> {
        let s = self.spread(inputs);
        // d/dx of -s for each spread entry, zero where the hinge is off or s = 0
        let coef = s.map(|s| {
            if s > 0.0 && 1.0 - s + self.eps > 0.0 {
                -1.0 / (self.denom * s)
            } else {
                0.0
            }
        });
        let coef = coef.zip_map(grad_out, |c, g| c * g);
        match self.axis {
            HingeAxis::Rows => {
                let x = inputs[0];
                let mut out = x.clone();
                for r in 0..x.rows() {
                    for (v, c) in out.row_mut(r).iter_mut().zip(coef.data()) {
                        *v *= c;
                    }
                }
                vec![out]
            }
            HingeAxis::Inputs => inputs.iter().map(|x| x.zip_map(&coef, |v, c| v * c)).collect(),
        }
    }
}

fn neg(g: &mut Graph, v: Var) -> Result<Var> {
    Ok(g.scale(v, -1.0)?)
}

/// `x` minus its column means.
fn center_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let m = g.mean_rows(x)?;
    let m = neg(g, m)?;
    Ok(g.add_row(x, m)?)
}

/// Sum of squared off-diagonal covariance entries of a centered `n x d` node.
fn offdiag_cov_sq(g: &mut Graph, centered: Var, denom: f64) -> Result<Var> {
    let d = g.value(centered).cols();
    let mut mask = DenseArray::filled(&[d, d], 1.0);
    for j in 0..d {
        mask.set(j, j, 0.0);
    }
    let ct = g.transpose(centered)?;
    let cov = g.matmul(ct, centered)?;
    let cov = g.scale(cov, 1.0 / denom)?;
    let mask = g.constant(mask);
    let off = g.mul(cov, mask)?;
    let off_sq = g.square(off)?;
    Ok(g.sum(off_sq)?)
}

fn weighted(g: &mut Graph, acc: &mut Vec<Var>, coef: f64, term: Var) -> Result<()> {
    if coef != 0.0 {
        acc.push(g.scale(term, coef)?);
    }
    Ok(())
}

/// Seven-term VICReg-style objective.
///
/// `actions[k]` is the `B x block_dim` action taken between step `k` and
/// `k + 1`; it is only read when the model has an inverse-dynamics head.
pub fn pldm_loss(
    g: &mut Graph,
    batch: &EmbeddingBatch,
    actions: &[Var],
    model: &WorldModel,
    coeffs: &PldmCoefficients,
) -> Result<PldmTerms> {
    coeffs.validate()?;
    let (b, d) = batch.check(g)?;
    let steps = &batch.steps;
    let t = steps.len();
    if b < 2 {
        return Err(Error::DegenerateBatch(format!("var/cov terms need B >= 2, got {b}")));
    }
    if t < 2 {
        return Err(Error::DegenerateBatch(format!(
            "time_sim/time_var/time_cov terms need T >= 2, got {t}"
        )));
    }
    let (bf, tf, df) = (b as f64, t as f64, d as f64);

    let p = batch.predicted.len();
    let pred_sum = squared_distance(g, &batch.predicted, batch.targets())?;
    let pred = g.scale(pred_sum, 1.0 / (bf * p as f64))?;

    let mut var_parts = vec![];
    let mut cov_parts = vec![];
    for &z in steps {
        let c = center_rows(g, z)?;
        let hinge = StdHinge { eps: coeffs.epsilon, denom: bf - 1.0, axis: HingeAxis::Rows };
        let h = g.custom(Box::new(hinge), &[c])?;
        var_parts.push(g.sum(h)?);
        cov_parts.push(offdiag_cov_sq(g, c, bf - 1.0)?);
    }
    let var_sum = sum_vars(g, &var_parts)?;
    let var = g.scale(var_sum, 1.0 / (tf * df))?;
    let cov_sum = sum_vars(g, &cov_parts)?;
    let cov = g.scale(cov_sum, 1.0 / (tf * df))?;

    let sim_sum = squared_distance(g, &steps[..t - 1], &steps[1..])?;
    let time_sim = g.scale(sim_sum, 1.0 / (bf * (tf - 1.0)))?;

    // Per-trajectory statistics over time, batched across trajectories.
    let total_over_time = sum_vars(g, steps)?;
    let time_mean = g.scale(total_over_time, 1.0 / tf)?;
    let mut centered = Vec::with_capacity(t);
    for &z in steps {
        centered.push(g.sub(z, time_mean)?);
    }
    let hinge = StdHinge { eps: coeffs.epsilon, denom: tf - 1.0, axis: HingeAxis::Inputs };
    let tv = g.custom(Box::new(hinge), &centered)?;
    let tv_sum = g.sum(tv)?;
    let time_var = g.scale(tv_sum, 1.0 / (bf * df))?;

    // ||C_i||_F^2 = sum_{s,u} (zc_s . zc_u)^2 / (T-1)^2 per trajectory i.
    let ones = g.constant(DenseArray::filled(&[d, 1], 1.0));
    let mut frob_parts = vec![];
    for s in 0..t {
        for u in s..t {
            let prod = g.mul(centered[s], centered[u])?;
            let dots = g.matmul(prod, ones)?;
            let sq = g.square(dots)?;
            let part = g.sum(sq)?;
            frob_parts.push(if s == u { part } else { g.scale(part, 2.0)? });
        }
    }
    let frob = sum_vars(g, &frob_parts)?;
    let frob = g.scale(frob, 1.0 / ((tf - 1.0) * (tf - 1.0)))?;
    let mut sq_parts = vec![];
    for &c in &centered {
        sq_parts.push(g.square(c)?);
    }
    let time_var_entries = sum_vars(g, &sq_parts)?;
    let time_var_entries = g.scale(time_var_entries, 1.0 / (tf - 1.0))?;
    let diag_sq = g.square(time_var_entries)?;
    let diag = g.sum(diag_sq)?;
    let tc_sum = g.sub(frob, diag)?;
    // the difference is a sum of squares, so anything below zero is rounding
    let tc_sum = g.relu(tc_sum)?;
    let time_cov = g.scale(tc_sum, 1.0 / (bf * df))?;

    let idm = if model.has_idm() {
        if actions.len() != t - 1 {
            return Err(Error::invalid(format!(
                "idm term needs {} action blocks, got {}",
                t - 1,
                actions.len()
            )));
        }
        let mut guesses = Vec::with_capacity(t - 1);
        for k in 0..t - 1 {
            guesses.push(model.idm_node(g, steps[k], steps[k + 1])?);
        }
        let s = squared_distance(g, &guesses, actions)?;
        Some(g.scale(s, 1.0 / (bf * (tf - 1.0)))?)
    } else if coeffs.mu != 0.0 {
        return Err(Error::Config("idm coefficient is nonzero but the model has no idm head".into()));
    } else {
        None
    };

    let mut parts = vec![pred];
    weighted(g, &mut parts, coeffs.alpha, var)?;
    weighted(g, &mut parts, coeffs.beta, cov)?;
    weighted(g, &mut parts, coeffs.gamma, time_sim)?;
    weighted(g, &mut parts, coeffs.zeta, time_var)?;
    weighted(g, &mut parts, coeffs.nu, time_cov)?;
    if let Some(i) = idm {
        weighted(g, &mut parts, coeffs.mu, i)?;
    }
    let total = sum_vars(g, &parts)?;
    Ok(PldmTerms { total, pred, var, cov, time_sim, time_var, time_cov, idm })
}
