//! CBOW and single-layer self-attention rewritten in Backpack form.
//!
//! [`BackpackForm`] evaluates `o_i = Σ_j Σ_ℓ α_ℓij C(x_j)_ℓ` with plain loops
//! from an explicit sense table and a weighting rule. The constructors
//! [`backpack_as_cbow`] and [`backpack_as_attention`] build one from the
//! parameters of the original model, so the two sides can be compared.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ContextWeights;
use crate::tensor::{dot, matmul, matmul_nt, softmax, Tensor};

/// word2vec CBOW: `p(x_c | x_1..n) = softmax(U · mean(v_{x_i}))`.
#[derive(Debug, Clone)]
pub struct CbowModel {
    /// Context embeddings `v`, `|V| × d`.
    pub v: Tensor,
    /// Output matrix `U`, `|V| × d`.
    pub u: Tensor,
}

impl CbowModel {
    pub fn new(v: Tensor, u: Tensor) -> Result<Self> {
        if v.rank() != 2 || v.shape() != u.shape() {
            return Err(Error::shape("cbow", format!("v {:?}, u {:?}", v.shape(), u.shape())));
        }
        Ok(CbowModel { v, u })
    }

    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        CbowModel {
            v: Tensor::randn(&[vocab, dim], std, rng),
            u: Tensor::randn(&[vocab, dim], std, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.v.rows()
    }
}

fn check_ids(tokens: &[usize], vocab: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty context"));
    }
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&t) => Err(Error::OutOfRange {
            what: "token id",
            index: t,
            limit: vocab,
        }),
        None => Ok(()),
    }
}

/// Distribution over the center word given its context.
pub fn cbow_forward(m: &CbowModel, context: &[usize]) -> Result<Vec<f64>> {
    check_ids(context, m.vocab_size())?;
    let d = m.v.cols();
    let mut mean = vec![0.0; d];
    for &t in context {
        for (acc, x) in mean.iter_mut().zip(m.v.row(t)) {
            *acc += x;
        }
    }
    let n = context.len() as f64;
    let mean = Tensor::vector(mean.into_iter().map(|x| x / n).collect());
    let logits = matmul(&m.u, &mean.reshape(&[d, 1])?)?.reshape(&[m.vocab_size()])?;
    Ok(softmax(&logits, 0)?.into_data())
}

/// Single layer of multi-head key-query-value attention over a fixed
/// embedding table. Head `ℓ` has `Q_ℓ, K_ℓ, V_ℓ ∈ R^{d/k × d}` and
/// `O_ℓ ∈ R^{d × d/k}`; the full output map is `[O_1 … O_k]`.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub embeddings: Tensor,
    pub queries: Vec<Tensor>,
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub outputs: Vec<Tensor>,
}

impl AttentionLayer {
    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!("dim {dim} not divisible by {heads} heads")));
        }
        let hd = dim / heads;
        let mut mats = |r: usize, c: usize| -> Vec<Tensor> { (0..heads).map(|_| Tensor::randn(&[r, c], std, rng)).collect() };
        let queries = mats(hd, dim);
        let keys = mats(hd, dim);
        let values = mats(hd, dim);
        let outputs = mats(dim, hd);
        Ok(AttentionLayer {
            embeddings: Tensor::randn(&[vocab, dim], 1.0, rng),
            queries,
            keys,
            values,
            outputs,
        })
    }

    pub fn heads(&self) -> usize {
        self.queries.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.heads();
        let d = self.dim();
        if k == 0 || !d.is_multiple_of(k) {
            return Err(Error::shape("attention", format!("{k} heads for d={d}")));
        }
        let hd = d / k;
        for set in [&self.keys, &self.values, &self.outputs] {
            if set.len() != k {
                return Err(Error::shape("attention", format!("{} matrices for {k} heads", set.len())));
            }
        }
        for m in self.queries.iter().chain(&self.keys).chain(&self.values) {
            if m.shape() != [hd, d] {
                return Err(Error::shape("attention", format!("projection {:?}, expected [{hd}, {d}]", m.shape())));
            }
        }
        for o in &self.outputs {
            if o.shape() != [d, hd] {
                return Err(Error::shape("attention", format!("output {:?}, expected [{d}, {hd}]", o.shape())));
            }
        }
        Ok(())
    }

    /// Embeds a token sequence as an `n × d` matrix.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        check_ids(tokens, self.vocab_size())?;
        let rows: Vec<Vec<f64>> = tokens.iter().map(|&t| self.embeddings.row(t).to_vec()).collect();
        Tensor::from_rows(&rows)
    }
}

/// Unmasked, unscaled multi-head attention in matrix form:
/// `[A_1 X V_1ᵀ | … | A_k X V_kᵀ] [O_1 … O_k]ᵀ` with
/// `A_ℓ = softmax_rows(X Q_ℓᵀ (X K_ℓᵀ)ᵀ)`.
pub fn attention_forward(layer: &AttentionLayer, x: &Tensor) -> Result<Tensor> {
    layer.validate()?;
    if x.rank() != 2 || x.cols() != layer.dim() || x.rows() == 0 {
        return Err(Error::shape("attention_forward", format!("input {:?} for d={}", x.shape(), layer.dim())));
    }
    let (n, d, k) = (x.rows(), layer.dim(), layer.heads());
    let hd = d / k;
    let mut concat = Tensor::zeros(&[n, d]);
    for l in 0..k {
        let q = matmul_nt(x, &layer.queries[l])?;
        let kk = matmul_nt(x, &layer.keys[l])?;
        let v = matmul_nt(x, &layer.values[l])?;
        let a = crate::tensor::softmax_rows(&matmul_nt(&q, &kk)?, false)?;
        let h = matmul(&a, &v)?;
        for i in 0..n {
            concat.row_mut(i)[l * hd..(l + 1) * hd].copy_from_slice(h.row(i));
        }
    }
    let mut full = Tensor::zeros(&[d, d]);
    for (l, o) in layer.outputs.iter().enumerate() {
        for r in 0..d {
            full.row_mut(r)[l * hd..(l + 1) * hd].copy_from_slice(o.row(r));
        }
    }
    matmul_nt(&concat, &full)
}

#[derive(Debug, Clone)]
enum Weighting {
    /// `α_ℓij = 1/n` for every `i, j`.
    Uniform,
    /// `α_ℓij = softmax_j((Q_ℓ e_i) · (K_ℓ e_j))`, unmasked.
    KeyQuery {
        embeddings: Tensor,
        queries: Vec<Tensor>,
        keys: Vec<Tensor>,
    },
}

/// A Backpack given directly by its sense table and weighting rule.
#[derive(Debug, Clone)]
pub struct BackpackForm {
    /// `|V| × k × d`.
    senses: Tensor,
    weighting: Weighting,
    /// Optional log-linear head (`|Y| × d`).
    head: Option<Tensor>,
}

impl BackpackForm {
    pub fn num_senses(&self) -> usize {
        self.senses.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.senses.shape()[2]
    }

    pub fn vocab_size(&self) -> usize {
        self.senses.shape()[0]
    }

    /// `C(word)_sense`.
    pub fn sense(&self, word: usize, sense: usize) -> &[f64] {
        let (k, d) = (self.num_senses(), self.dim());
        let start = (word * k + sense) * d;
        &self.senses.data()[start..start + d]
    }

    pub fn contextualization_weights(&self, tokens: &[usize]) -> Result<ContextWeights> {
        check_ids(tokens, self.vocab_size())?;
        let (n, k) = (tokens.len(), self.num_senses());
        let mut data = Vec::with_capacity(k * n * n);
        match &self.weighting {
            Weighting::Uniform => data.resize(k * n * n, 1.0 / n as f64),
            Weighting::KeyQuery {
                embeddings,
                queries,
                keys,
            } => {
                let project = |m: &Tensor, t: usize| -> Vec<f64> {
                    (0..m.rows()).map(|r| dot(m.row(r), embeddings.row(t))).collect()
                };
                for l in 0..k {
                    let qs: Vec<Vec<f64>> = tokens.iter().map(|&t| project(&queries[l], t)).collect();
                    let ks: Vec<Vec<f64>> = tokens.iter().map(|&t| project(&keys[l], t)).collect();
                    for q in &qs {
                        let scores: Vec<f64> = ks.iter().map(|kv| dot(q, kv)).collect();
                        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                        let z: f64 = exp.iter().sum();
                        data.extend(exp.iter().map(|e| e / z));
                    }
                }
            }
        }
        ContextWeights::new(k, n, data)
    }

    /// `o_i = Σ_j Σ_ℓ α_ℓij C(x_j)_ℓ`, by direct summation.
    pub fn representations(&self, tokens: &[usize]) -> Result<Tensor> {
        let alpha = self.contextualization_weights(tokens)?;
        let (n, k, d) = (tokens.len(), self.num_senses(), self.dim());
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let row = out.row_mut(i);
            for (j, &t) in tokens.iter().enumerate() {
                for l in 0..k {
                    let a = alpha.get(l, i, j);
                    for (o, c) in row.iter_mut().zip(self.sense(t, l)) {
                        *o += a * c;
                    }
                }
            }
        }
        Ok(out)
    }

    /// `softmax(head · o_i)` at the last position.
    pub fn distribution(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::invalid("this backpack form has no output head"))?;
        let o = self.representations(tokens)?;
        let last = o.row(o.rows() - 1);
        let logits: Vec<f64> = (0..head.rows()).map(|r| dot(head.row(r), last)).collect();
        Ok(softmax(&Tensor::vector(logits), 0)?.into_data())
    }
}

/// CBOW as a Backpack: one sense per word (`C(x) = v_x`), uniform weights,
/// head `U`.
pub fn backpack_as_cbow(m: &CbowModel) -> BackpackForm {
    let (v, d) = (m.v.rows(), m.v.cols());
    BackpackForm {
        senses: m.v.reshape(&[v, 1, d]).expect("same element count"),
        weighting: Weighting::Uniform,
        head: Some(m.u.clone()),
    }
}

/// Self-attention as a Backpack: `C(x)_ℓ = O_ℓ V_ℓ e_x`, weights from the
/// per-head key-query scores.
pub fn backpack_as_attention(layer: &AttentionLayer) -> Result<BackpackForm> {
    layer.validate()?;
    let (v, d, k) = (layer.vocab_size(), layer.dim(), layer.heads());
    let mut senses = Vec::with_capacity(v * k * d);
    for x in 0..v {
        let e = layer.embeddings.row(x);
        for l in 0..k {
            let ve: Vec<f64> = (0..d / k).map(|r| dot(layer.values[l].row(r), e)).collect();
            senses.extend((0..d).map(|r| dot(layer.outputs[l].row(r), &ve)));
        }
    }
    Ok(BackpackForm {
        senses: Tensor::new(vec![v, k, d], senses)?,
        weighting: Weighting::KeyQuery {
            embeddings: layer.embeddings.clone(),
            queries: layer.queries.clone(),
            keys: layer.keys.clone(),
        },
        head: None,
    })
}
