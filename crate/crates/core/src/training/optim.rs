use crate::error::{Error, Result};
use crate::model::BackpackModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(model: &BackpackModel) -> Self {
        let zeros: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update of a single tensor: decoupled decay (if `decay`), then
/// the bias-corrected Adam step. `t` is the 1-based step number.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
    decay: bool,
) -> Result<()> {
    if param.shape() != grad.shape() || m.shape() != grad.shape() || v.shape() != grad.shape() {
        return Err(Error::shape(
            "adamw",
            format!("param {:?}, grad {:?}", param.shape(), grad.shape()),
        ));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite { op: "adamw gradient" });
    }
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    let shrink = if decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
    let (p, g) = (param.data_mut(), grad.data());
    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
        *p *= shrink;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// Applies one AdamW step to every parameter of `model`.
pub fn adamw_step(
    model: &mut BackpackModel,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let n = model.params().len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape("adamw", format!("{} grads for {n} parameters", grads.len())));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for `{}`",
            model.params()[i].name
        )));
    }
    state.step += 1;
    for (i, g) in grads.iter().enumerate() {
        let decay = model.params()[i].decay;
        adamw_update(
            model.param_at_mut(i),
            g,
            &mut state.m[i],
            &mut state.v[i],
            state.step,
            lr,
            cfg,
            decay,
        )?;
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to 0
/// at `total`.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, peak: f64) -> Result<f64> {
    if warmup > total {
        return Err(Error::invalid(format!("warmup {warmup} exceeds total steps {total}")));
    }
    if step > total {
        return Err(Error::OutOfRange {
            what: "step",
            index: step,
            limit: total,
        });
    }
    Ok(if step < warmup {
        peak * step as f64 / warmup as f64
    } else if step == warmup || total == warmup {
        peak
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    })
}
