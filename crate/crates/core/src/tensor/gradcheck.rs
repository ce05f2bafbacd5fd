use super::{Graph, ParamStore, Result, Tensor, TensorError, Var};

/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(TensorError::Contract(format!("function must return a scalar, got dims {:?}", t.dims())));
    }
    Ok(t.item())
}

/// Compare the reverse-mode gradient of `f` at `point` with central
/// differences of step `eps`, returning the largest relative error over all
/// coordinates.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(TensorError::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = f(&mut g, x)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(point.dims()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::inference();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check over parameters. `stride` > 1 checks every
/// `stride`-th coordinate of each parameter (always including the first).
pub fn finite_diff_check_params<F>(store: &ParamStore, f: F, eps: f64, stride: usize) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if eps <= 0.0 || stride == 0 {
        return Err(TensorError::Contract(format!("need eps > 0 and stride >= 1, got {eps}, {stride}")));
    }
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    scalar_of(&g, y)?;
    let analytic = g.backward(y)?.for_params(store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let y = f(&mut g, s)?;
        scalar_of(&g, y)
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        for i in (0..store.get(id).len()).step_by(stride) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[id.index()].data()[i], numeric));
        }
    }
    Ok(worst)
}
