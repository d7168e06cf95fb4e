use super::{Graph, Precision, Tensor, Var};
use crate::error::{CstError, Result};

fn evaluate<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_precision(Precision::F64);
    let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), false)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(CstError::Graph("grad_check needs a scalar function".into()));
    }
    Ok(g.value(out).item())
}

/// Compares reverse-mode gradients of a scalar function of several tensors
/// against central differences. Returns the worst
/// `|analytic - numeric| / max(1, |analytic|)` over every coordinate.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(CstError::Config(format!("grad_check eps {eps} outside [1e-6, 1e-3]")));
    }
    let mut g = Graph::with_precision(Precision::F64);
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).expect("grad")).collect();

    let base = evaluate(&f, xs)?;
    if evaluate(&f, xs)?.to_bits() != base.to_bits() {
        return Err(CstError::Determinism);
    }

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for t in 0..xs.len() {
        for j in 0..xs[t].len() {
            let orig = xs[t].data()[j];
            probe[t].data_mut()[j] = orig + eps;
            let up = evaluate(&f, &probe)?;
            probe[t].data_mut()[j] = orig - eps;
            let down = evaluate(&f, &probe)?;
            probe[t].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[t].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps)
}
