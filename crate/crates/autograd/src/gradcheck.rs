//! Central-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max over elements of `|analytic - numeric| / (|analytic| + eps)` for a
/// scalar function of one tensor, evaluated on fresh evaluation-mode graphs.
/// Returns infinity when the function fails or the analytic gradient is not
/// finite.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> T
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    check_inputs(Graph::new, |g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)
}

/// Multi-input variant. `make_graph` is called once per evaluation, so a
/// training graph with a fixed seed reproduces the same dropout masks.
pub fn check_inputs<T, G, F>(make_graph: G, f: F, inputs: &[Tensor<T>], eps: T) -> T
where
    T: Scalar,
    G: Fn() -> Graph<T>,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<T>]| -> Option<T> {
        let mut g = make_graph();
        let vs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vs).ok()?;
        g.value(out).item().ok()
    };

    let mut g = make_graph();
    let vs: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let Ok(out) = f(&mut g, &vs) else { return T::infinity() };
    if g.backward(out).is_err() {
        return T::infinity();
    }
    let analytic: Vec<Tensor<T>> = vs
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        .collect();
    if analytic.iter().any(|a| !a.is_finite()) {
        return T::infinity();
    }

    let two = T::lit(2.0);
    let mut worst = T::zero();
    let mut xs = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + eps;
            let plus = eval(&xs);
            xs[k].data_mut()[i] = orig - eps;
            let minus = eval(&xs);
            xs[k].data_mut()[i] = orig;
            let (Some(p), Some(m)) = (plus, minus) else { return T::infinity() };
            let numeric = (p - m) / (two * eps);
            let an = a.data()[i];
            let err = (an - numeric).abs() / (an.abs() + eps);
            worst = worst.max(err);
        }
    }
    worst
}
