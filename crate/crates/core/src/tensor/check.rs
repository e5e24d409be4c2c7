use std::sync::Arc;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences and returns
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync + Send,
{
    grad_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        eps,
        Execution::default(),
    )
}

/// [`grad_check`] over several input tensors at once; every coordinate of
/// every input is perturbed.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64, exec: Execution) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + Send,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid(format!("grad_check eps must be positive, got {eps}")));
    }
    let shared: Vec<Arc<Tensor>> = inputs.iter().cloned().map(Arc::new).collect();

    let mut graph = Graph::new();
    let vars: Vec<Var> = shared.iter().map(|t| graph.param(t, true)).collect();
    let root = f(&mut graph, &vars)?;
    let grads = graph.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&shared)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(graph);

    let coords: Vec<(usize, usize)> = shared
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();

    let eval = |which: usize, at: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::new();
        let mut vars = Vec::with_capacity(shared.len());
        for (i, t) in shared.iter().enumerate() {
            if i == which {
                let mut p = (**t).clone();
                p.data_mut()[at] += delta;
                vars.push(g.leaf(p, false)?);
            } else {
                vars.push(g.param(t, false));
            }
        }
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let errors = par::try_map(exec, &coords, |&(i, j)| -> Result<f64> {
        let numeric = (eval(i, j, eps)? - eval(i, j, -eps)?) / (2.0 * eps);
        let a = analytic[i].data()[j];
        Ok((a - numeric).abs() / a.abs().max(1.0))
    })?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}
