use super::{Graph, NumericsError, ParamStore, Var};

/// `(f(x + eps) - f(x - eps)) / (2 eps)`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Compares reverse-mode gradients of a scalar loss with central differences.
///
/// `build` constructs the loss in a fresh graph from the given store. The
/// result is the max over every parameter coordinate of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F, E>(params: &ParamStore, eps: f64, build: F) -> Result<f64, E>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
    E: From<NumericsError>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::Invalid(format!("eps must be positive, got {eps}")).into());
    }
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let analytic = g.backward(loss)?.param_grads(&g, params);

    let eval_at = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(NumericsError::NonFinite {
                node: loss.index(),
                op: "grad_check loss",
            }
            .into());
        }
        Ok(v)
    };

    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let x0 = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = x0 + eps;
            let up = eval_at(&work)?;
            work.get_mut(id).data_mut()[k] = x0 - eps;
            let down = eval_at(&work)?;
            work.get_mut(id).data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[id.0].data()[k];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
