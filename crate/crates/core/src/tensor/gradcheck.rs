use super::{Graph, Result, Tensor, Var};

/// Central-difference gradient of a scalar function of one tensor.
pub fn central_difference<F>(f: F, point: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };
    let mut out = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}

/// Largest coordinate-wise relative error between the reverse-mode gradient
/// of `f` at `point` and its central-difference estimate:
/// `|autodiff − fd| / max(1e-12, |fd|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let mut grads = g.backward(y)?;
    let analytic = grads.take(x);
    let numeric = central_difference(&f, point, step)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-12))
        .fold(0.0, f64::max))
}
