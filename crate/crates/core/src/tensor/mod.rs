//! Dense row-major `f64` tensors, the numeric kernels the model needs, and a
//! small tape-based reverse-mode autodiff engine ([`Graph`]).
//!
//! Kernels accumulate every output element in a fixed order that does not
//! depend on how many rows are processed together. That is what makes a
//! word's sense vectors bitwise identical whether they are computed alone,
//! inside a sequence, or as part of a whole-vocabulary table.

mod check;
mod graph;

pub use check::{grad_check, grad_check_many};
pub use graph::{Gradients, Graph, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} implies {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("shape {:?} is not a scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `c = a · b` for row-major `a: m×p`, `b: p×q`.
///
/// Each output element is accumulated over `p` in ascending order starting
/// from zero, independent of `m`, so row `i` of the result depends on row `i`
/// of `a` alone.
fn gemm(m: usize, p: usize, q: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    const COL_BLOCK: usize = 256;
    let mut c = vec![0.0; m * q];
    if q == 0 {
        return c;
    }
    for j0 in (0..q).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(q);
        let mut i = 0;
        while i + 4 <= m {
            let (c0, rest) = c[i * q..(i + 4) * q].split_at_mut(q);
            let (c1, rest) = rest.split_at_mut(q);
            let (c2, c3) = rest.split_at_mut(q);
            let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
            for k in 0..p {
                let a0 = a[i * p + k];
                let a1 = a[(i + 1) * p + k];
                let a2 = a[(i + 2) * p + k];
                let a3 = a[(i + 3) * p + k];
                let brow = &b[k * q + j0..k * q + j1];
                for ((((x0, x1), x2), x3), &bv) in c0
                    .iter_mut()
                    .zip(c1.iter_mut())
                    .zip(c2.iter_mut())
                    .zip(c3.iter_mut())
                    .zip(brow)
                {
                    *x0 += a0 * bv;
                    *x1 += a1 * bv;
                    *x2 += a2 * bv;
                    *x3 += a3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let crow = &mut c[i * q + j0..i * q + j1];
            for k in 0..p {
                let av = a[i * p + k];
                let brow = &b[k * q + j0..k * q + j1];
                for (x, &bv) in crow.iter_mut().zip(brow) {
                    *x += av * bv;
                }
            }
            i += 1;
        }
    }
    c
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = a.expect_matrix("matmul")?;
    let (p2, q) = b.expect_matrix("matmul")?;
    if p != p2 {
        return Err(Error::shape("matmul", format!("[{m}x{p}] x [{p2}x{q}]")));
    }
    Tensor::matrix(m, q, gemm(m, p, q, &a.data, &b.data))
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, p) = a.expect_matrix("matmul_nt")?;
    let (_, p2) = b.expect_matrix("matmul_nt")?;
    if p != p2 {
        return Err(Error::shape("matmul_nt", format!("inner {p} vs {p2}")));
    }
    matmul(a, &b.transpose()?)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, _) = a.expect_matrix("matmul_tn")?;
    let (m2, _) = b.expect_matrix("matmul_tn")?;
    if m != m2 {
        return Err(Error::shape("matmul_tn", format!("outer {m} vs {m2}")));
    }
    matmul(&a.transpose()?, b)
}

/// Max-subtracted softmax of a single row, writing into `out`. When `limit` is
/// `Some(l)`, only entries `0..=l` participate and the rest are set to zero.
fn softmax_into(row: &[f64], limit: Option<usize>, out: &mut [f64]) {
    let live = limit.map_or(row.len(), |l| l + 1).min(row.len());
    let max = row[..live].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out[..live].iter_mut().zip(&row[..live]) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in &mut out[..live] {
        *o /= total;
    }
    for o in &mut out[live..] {
        *o = 0.0;
    }
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::invalid(format!("softmax axis {axis} for rank {}", x.rank())));
    }
    let len = x.shape[axis];
    if len == 0 {
        return Err(Error::invalid("softmax over an empty axis"));
    }
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    let mut lane = vec![0.0; len];
    let mut res = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for (t, l) in lane.iter_mut().enumerate() {
                *l = x.data[(o * len + t) * inner + i];
            }
            softmax_into(&lane, None, &mut res);
            for (t, r) in res.iter().enumerate() {
                out[(o * len + t) * inner + i] = *r;
            }
        }
    }
    let t = Tensor::new(x.shape.clone(), out)?;
    t.ensure_finite("softmax")?;
    Ok(t)
}

/// Row-wise softmax of a matrix; with `causal`, row `i` only normalizes over
/// columns `0..=i` and masked entries are exactly zero.
pub fn softmax_rows(x: &Tensor, causal: bool) -> Result<Tensor> {
    let (r, c) = x.expect_matrix("softmax_rows")?;
    if c == 0 {
        return Err(Error::invalid("softmax over an empty axis"));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        softmax_into(x.row(i), causal.then_some(i), &mut out[i * c..(i + 1) * c]);
    }
    let t = Tensor::matrix(r, c, out)?;
    t.ensure_finite("softmax")?;
    Ok(t)
}

/// Row-wise log-softmax (log-sum-exp stabilized).
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if c == 0 {
        return Err(Error::invalid("log_softmax over an empty axis"));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    let t = Tensor::new(x.shape.clone(), out)?;
    t.ensure_finite("log_softmax")?;
    Ok(t)
}

pub(crate) struct LayerNormOut {
    pub y: Tensor,
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_full(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<LayerNormOut> {
    let d = x.cols();
    if d == 0 || x.rank() == 0 {
        return Err(Error::invalid("layer_norm over an empty last dimension"));
    }
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("gain {:?} / bias {:?} for width {d}", gain.shape(), bias.shape()),
        ));
    }
    let rows = x.rows();
    let mut y = vec![0.0; x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, (o, &v)) in y[r * d..(r + 1) * d].iter_mut().zip(row).enumerate() {
            *o = (v - mu) * rs * gain.data[j] + bias.data[j];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    let y = Tensor::new(x.shape.clone(), y)?;
    y.ensure_finite("layer_norm")?;
    Ok(LayerNormOut { y, mean, rstd })
}

/// Layer normalization over the last dimension (biased variance, ε = 1e-5).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(layer_norm_full(x, gain, bias)?.y)
}

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximation GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (`n×V`). Returns the loss and the softmax probabilities.
pub(crate) fn cross_entropy_full(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let (n, v) = logits.expect_matrix("cross_entropy")?;
    if n != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} rows vs {} targets", targets.len()),
        ));
    }
    if n == 0 {
        return Err(Error::invalid("cross_entropy over zero rows"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::OutOfRange {
            what: "target",
            index: t,
            limit: v,
        });
    }
    let probs = softmax_rows(logits, false)?;
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, probs))
}

pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    Ok(cross_entropy_full(logits, targets)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let col = m(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &col).unwrap(), m(&[&[2.0], &[4.0]]));
        let z = Tensor::zeros(&[3, 2]);
        assert!(matmul(&z, &a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_rows_do_not_depend_on_batch() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[7, 33], 1.0, &mut rng);
        let b = Tensor::randn(&[33, 300], 1.0, &mut rng);
        let full = matmul(&a, &b).unwrap();
        for i in 0..7 {
            let single = Tensor::matrix(1, 33, a.row(i).to_vec()).unwrap();
            let r = matmul(&single, &b).unwrap();
            assert_eq!(r.data(), full.row(i));
        }
    }

    #[test]
    fn matmul_identity_associativity_is_exact() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[5, 6], 3.0, &mut rng);
        let b = Tensor::randn(&[6, 4], 3.0, &mut rng);
        let ai = matmul(&a, &Tensor::identity(6)).unwrap();
        assert_eq!(matmul(&ai, &b).unwrap(), matmul(&a, &b).unwrap());
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let nt = matmul_nt(&a, &b).unwrap();
        let direct = matmul(&a, &b.transpose().unwrap()).unwrap();
        assert_eq!(nt, direct);
        let c = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let tn = matmul_tn(&a, &c).unwrap();
        assert_eq!(tn, matmul(&a.transpose().unwrap(), &c).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::vector(vec![0.0; 3]), 0).unwrap();
        for &p in u.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let two = softmax(&Tensor::vector(vec![0.0, 3f64.ln()]), 0).unwrap();
        assert!((two.data()[0] - 0.25).abs() < 1e-15);
        assert!((two.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance_and_axis() {
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap();
        let shifted = x.map(|v| v + 17.25);
        let a = softmax(&x, 1).unwrap();
        let b = softmax(&shifted, 1).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
        let cols = softmax(&x, 0).unwrap();
        for j in 0..3 {
            let s = cols.data()[j] + cols.data()[3 + j];
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_empty_axis_is_an_error() {
        let x = Tensor::zeros(&[2, 0]);
        assert!(softmax(&x, 1).is_err());
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn causal_softmax_masks_exactly() {
        let x = Tensor::new(vec![3, 3], vec![1.0, 9.0, 9.0, 2.0, 1.0, 9.0, 0.1, 0.2, 0.3]).unwrap();
        let p = softmax_rows(&x, true).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(p.row(1)[2], 0.0);
        assert!((p.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::ones(&[2]);
        let zeros = Tensor::zeros(&[2]);
        let c = layer_norm(&Tensor::new(vec![1, 2], vec![4.0, 4.0]).unwrap(), &ones, &zeros).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        // mean 0, biased variance 1 -> scaled by 1/sqrt(1 + eps)
        let y = layer_norm(&Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap(), &ones, &zeros).unwrap();
        let s = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - s).abs() < 1e-15 && (y.data()[1] + s).abs() < 1e-15);
        let bias = Tensor::vector(vec![0.3, -0.7]);
        let g0 = layer_norm(&Tensor::new(vec![1, 2], vec![5.0, 1.0]).unwrap(), &zeros, &bias).unwrap();
        assert_eq!(g0.data(), bias.data());
        assert!(layer_norm(&Tensor::zeros(&[2, 0]), &Tensor::zeros(&[0]), &Tensor::zeros(&[0])).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(20.0) - 20.0).abs() < 1e-12);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let expected = 0.5 * (1.0 + (0.797_884_560_802_865_4_f64 * 1.044_715).tanh());
        assert!((gelu_scalar(1.0) - expected).abs() < 1e-15);
        assert!((gelu_scalar(1.0) - 0.841_191_990_607_477_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[3, 4]);
        let l = cross_entropy(&uniform, &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let two = Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap();
        assert!((cross_entropy(&two, &[1]).unwrap() + 0.75f64.ln()).abs() < 1e-15);
        let sharp = Tensor::new(vec![1, 3], vec![60.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&sharp, &[0]).unwrap() < 1e-20);
        assert!(matches!(
            cross_entropy(&uniform, &[0, 1, 4]),
            Err(Error::OutOfRange { .. })
        ));
    }
}
