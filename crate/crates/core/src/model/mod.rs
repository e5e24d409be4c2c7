//! The Backpack language model.
//!
//! Each word `x` gets `k` sense vectors `C(x) = FF(E x)` that never see
//! context. A causal Transformer over the sequence produces non-negative
//! weights `α_ℓij` (one softmax per sense), and position `i` is represented as
//! `o_i = Σ_j Σ_ℓ α_ℓij C(x_j)_ℓ`. Next-token logits are `Eᵀ o_i` with `E`
//! shared between input and output.
//!
//! [`ModelKind::Transformer`] builds the same Transformer with an ordinary
//! `h Eᵀ` head, used as a baseline.

mod config;
mod forward;
mod params;
mod view;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{BackpackConfig, ModelKind};
pub use params::Param;
pub use view::{DeltaHook, LanguageModel, LogitDecomposition, ModelView};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::{Graph, Tensor};
use params::Layout;

/// Contextualization weights `α ∈ R^{k×n×n}`, indexed `(sense, i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWeights {
    k: usize,
    n: usize,
    data: Vec<f64>,
}

impl ContextWeights {
    pub fn new(k: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * n * n {
            return Err(Error::shape("context weights", format!("{} values for k={k}, n={n}", data.len())));
        }
        Ok(ContextWeights { k, n, data })
    }

    pub fn senses(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, sense: usize, i: usize, j: usize) -> f64 {
        self.data[(sense * self.n + i) * self.n + j]
    }

    /// Weights that position `i` puts on each position under `sense`.
    pub fn row(&self, sense: usize, i: usize) -> &[f64] {
        let start = (sense * self.n + i) * self.n;
        &self.data[start..start + self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Multipliers `δ_ℓij ≥ 0` applied next to `α` at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSchedule {
    k: usize,
    n: usize,
    data: Vec<f64>,
}

impl DeltaSchedule {
    pub fn ones(k: usize, n: usize) -> Self {
        DeltaSchedule {
            k,
            n,
            data: vec![1.0; k * n * n],
        }
    }

    pub fn from_fn(k: usize, n: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(k * n * n);
        for l in 0..k {
            for i in 0..n {
                for j in 0..n {
                    data.push(f(l, i, j));
                }
            }
        }
        DeltaSchedule { k, n, data }
    }

    pub fn senses(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, sense: usize, i: usize, j: usize) -> f64 {
        self.data[(sense * self.n + i) * self.n + j]
    }

    pub fn set(&mut self, sense: usize, i: usize, j: usize, value: f64) {
        self.data[(sense * self.n + i) * self.n + j] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn validate(&self) -> Result<()> {
        match self.data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            Some(v) => Err(Error::invalid(format!("δ must be finite and non-negative, found {v}"))),
            None => Ok(()),
        }
    }

    pub(crate) fn sense_matrix(&self, sense: usize) -> Tensor {
        let nn = self.n * self.n;
        Tensor::matrix(self.n, self.n, self.data[sense * nn..(sense + 1) * nn].to_vec()).expect("n×n slice")
    }
}

/// Replacement sense matrices (`k×d`) for individual words. Words without an
/// entry use the sense network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SenseEdits {
    map: BTreeMap<usize, Tensor>,
}

impl SenseEdits {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, word: usize) -> Option<&Tensor> {
        self.map.get(&word)
    }

    pub fn insert(&mut self, word: usize, senses: Tensor) {
        self.map.insert(word, senses);
    }

    pub fn words(&self) -> impl Iterator<Item = usize> + '_ {
        self.map.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BackpackModel {
    config: BackpackConfig,
    params: Vec<Param>,
    layout: Layout,
}

impl BackpackModel {
    /// Random initialization: N(0, 0.02) weights, zero biases, unit gains.
    pub fn new(config: BackpackConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = params::init_params(&config, &mut rng);
        Ok(BackpackModel { config, params, layout })
    }

    /// Builds a model from named tensors in canonical parameter order.
    pub fn from_tensors(config: BackpackConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (params, layout) = params::assemble(&config, tensors)?;
        Ok(BackpackModel { config, params, layout })
    }

    pub fn config(&self) -> &BackpackConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &*p.value)
    }

    /// Mutable access to a parameter; clones the storage first if a graph
    /// still shares it.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| Arc::make_mut(&mut p.value))
    }

    pub(crate) fn param_at_mut(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.params[index].value)
    }

    /// The tied embedding / output matrix `E` (`|V| × d`).
    pub fn embeddings(&self) -> &Tensor {
        &self.params[self.layout.wte].value
    }

    pub fn embeddings_mut(&mut self) -> &mut Tensor {
        self.param_at_mut(self.layout.wte)
    }

    pub fn view(&self) -> ModelView<'_> {
        ModelView::new(self, SenseEdits::new())
    }

    /// See [`ModelView::sense_vectors`].
    pub fn sense_vectors(&self, word: usize) -> Result<Tensor> {
        self.view().sense_vectors(word)
    }

    /// See [`ModelView::contextualization_weights`].
    pub fn contextualization_weights(&self, tokens: &[usize]) -> Result<ContextWeights> {
        self.view().contextualization_weights(tokens)
    }

    /// See [`ModelView::lm_log_probs`].
    pub fn lm_log_probs(&self, tokens: &[usize], delta: Option<&DeltaSchedule>) -> Result<Tensor> {
        self.view().lm_log_probs(tokens, delta)
    }

    /// Mean next-token cross-entropy over a batch of equal-length windows and
    /// its gradient for every parameter, in [`params`](Self::params) order.
    /// Sequences are differentiated independently (optionally in parallel)
    /// and their gradients summed in batch order.
    pub fn loss_and_grads(
        &self,
        inputs: &[Vec<usize>],
        targets: &[Vec<usize>],
        exec: Execution,
    ) -> Result<(f64, Vec<Tensor>)> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::invalid(format!(
                "batch has {} inputs and {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let pairs: Vec<(&Vec<usize>, &Vec<usize>)> = inputs.iter().zip(targets).collect();
        let per_seq = par::try_map(exec, &pairs, |(x, y)| -> Result<(f64, Vec<Option<Tensor>>)> {
            let mut g = Graph::new();
            let vars = forward::bind(&mut g, self, true);
            let f = forward::forward(&mut g, self, &vars, x, &SenseEdits::new(), None)?;
            let loss = g.cross_entropy(f.logits, y)?;
            let value = g.value(loss).item()?;
            let mut grads = g.backward(loss)?;
            Ok((value, vars.iter().map(|&v| grads.take(v)).collect()))
        })?;
        let scale = 1.0 / per_seq.len() as f64;
        let mut total = 0.0;
        let mut sum: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        for (loss, grads) in per_seq {
            total += loss;
            for (acc, g) in sum.iter_mut().zip(grads) {
                if let Some(g) = g {
                    acc.add_assign(&g);
                }
            }
        }
        let grads = sum.into_iter().map(|g| g.scale(scale)).collect();
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        Ok((loss, grads))
    }

    /// Mean next-token cross-entropy of one window, without gradients.
    pub fn loss(&self, input: &[usize], target: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let vars = forward::bind(&mut g, self, false);
        let f = forward::forward(&mut g, self, &vars, input, &SenseEdits::new(), None)?;
        let loss = g.cross_entropy(f.logits, target)?;
        g.value(loss).item()
    }

    /// Compares [`loss`](Self::loss)'s reverse-mode gradient with central
    /// finite differences over every parameter coordinate and returns the
    /// largest `|analytic − numeric| / max(1, |analytic|)`.
    pub fn gradient_check(&self, input: &[usize], target: &[usize], eps: f64, exec: Execution) -> Result<f64> {
        let tensors: Vec<Tensor> = self.params.iter().map(|p| (*p.value).clone()).collect();
        crate::tensor::grad_check_many(
            |g, vars| {
                let f = forward::forward(g, self, vars, input, &SenseEdits::new(), None)?;
                g.cross_entropy(f.logits, target)
            },
            &tensors,
            eps,
            exec,
        )
    }
}

#[cfg(test)]
mod tests;
