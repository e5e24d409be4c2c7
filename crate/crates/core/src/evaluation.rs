//! Perplexity and word-similarity evaluation.
//!
//! Similarity between two words is the cosine of one of their sense vectors
//! (`Sim_ℓ`), the minimum of that over senses (`Sim_min`), or the cosine of
//! their embedding rows. Scores are compared with human judgements by
//! Spearman correlation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LanguageModel, ModelView};
use crate::par::{self, Execution};
use crate::tensor::{dot, norm_sq, Tensor};
use crate::training::{Tokenizer, Vocabulary, UNK};

/// `exp` of the mean next-token negative log-likelihood of `ids[1..]`.
/// Sequences longer than the model's context are scored in consecutive
/// chunks.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, ids: &[usize], exec: Execution) -> Result<f64> {
    if ids.len() < 2 {
        return Err(Error::invalid("perplexity needs at least two tokens"));
    }
    let cap = model.max_len();
    let starts: Vec<usize> = (0..ids.len() - 1).step_by(cap).collect();
    let nll = par::try_map(exec, &starts, |&s| -> Result<Vec<f64>> {
        let end = (s + cap).min(ids.len() - 1);
        let lp = model.log_probs(&ids[s..end])?;
        Ok((s..end).map(|t| -lp.row(t - s)[ids[t + 1]]).collect())
    })?;
    Ok(mean(nll.iter().flatten().copied()).exp())
}

/// Mean as `x₀ + Σ(xᵢ − x₀)/n` with a compensated sum, so a constant
/// sequence returns its value bit for bit.
fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let mut xs = xs.peekable();
    let Some(&x0) = xs.peek() else { return f64::NAN };
    let (mut sum, mut comp, mut n) = (0.0f64, 0.0f64, 0usize);
    for x in xs {
        let d = x - x0;
        let t = sum + d;
        comp += if sum.abs() >= d.abs() { (sum - t) + d } else { (d - t) + sum };
        sum = t;
        n += 1;
    }
    x0 + (sum + comp) / n as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm_sq(a), norm_sq(b));
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity with a zero vector; scoring it 0");
        return 0.0;
    }
    dot(a, b) / (na.sqrt() * nb.sqrt())
}

/// Cosine of `C(x)_ℓ` and `C(y)_ℓ`.
pub fn sense_cosine(view: &ModelView<'_>, x: usize, y: usize, sense: usize) -> Result<f64> {
    let (a, b) = (view.sense_vectors(x)?, view.sense_vectors(y)?);
    check_sense(&a, sense)?;
    Ok(cosine(a.row(sense), b.row(sense)))
}

/// `min_ℓ` of [`sense_cosine`].
pub fn min_sense_cosine(view: &ModelView<'_>, x: usize, y: usize) -> Result<f64> {
    let (a, b) = (view.sense_vectors(x)?, view.sense_vectors(y)?);
    Ok(min_cosine(&a, &b))
}

fn min_cosine(a: &Tensor, b: &Tensor) -> f64 {
    (0..a.rows()).map(|l| cosine(a.row(l), b.row(l))).fold(f64::INFINITY, f64::min)
}

fn check_sense(senses: &Tensor, sense: usize) -> Result<()> {
    if sense >= senses.rows() {
        return Err(Error::OutOfRange {
            what: "sense",
            index: sense,
            limit: senses.rows(),
        });
    }
    Ok(())
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        // positions i..=j tie; they share the mean of ranks i+1..=j+1
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::shape("spearman", format!("{} vs {} values", pred.len(), gold.len())));
    }
    if pred.len() < 2 {
        return Err(Error::invalid("spearman needs at least two pairs"));
    }
    if pred.iter().chain(gold).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "spearman input" });
    }
    let (a, b) = (ranks(pred), ranks(gold));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numeric("spearman is undefined for a constant input".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordPair {
    pub a: String,
    pub b: String,
    pub score: f64,
}

/// Word pairs with human similarity or relatedness scores.
#[derive(Debug, Clone, PartialEq)]
pub struct WordPairDataset {
    pub name: String,
    pub pairs: Vec<WordPair>,
}

impl WordPairDataset {
    pub fn new(name: impl Into<String>, pairs: Vec<WordPair>) -> Result<Self> {
        let name = name.into();
        let mut seen = BTreeSet::new();
        for p in &pairs {
            if !p.score.is_finite() {
                return Err(Error::Data(format!("{name}: non-finite score for ({}, {})", p.a, p.b)));
            }
            let key = if p.a <= p.b { (p.a.clone(), p.b.clone()) } else { (p.b.clone(), p.a.clone()) };
            if !seen.insert(key) {
                return Err(Error::Data(format!("{name}: duplicate pair ({}, {})", p.a, p.b)));
            }
        }
        Ok(WordPairDataset { name, pairs })
    }

    /// Parses `word_a<TAB>word_b<TAB>score` lines. A first line whose score
    /// column is not a number is taken as a header.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self> {
        let name = name.into();
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 3 {
                return Err(Error::Data(format!("{name}:{}: expected 3 tab-separated columns", n + 1)));
            }
            let score = match cols[2].trim().parse::<f64>() {
                Ok(s) => s,
                Err(_) if pairs.is_empty() && n == 0 => continue,
                Err(_) => return Err(Error::Data(format!("{name}:{}: bad score `{}`", n + 1, cols[2]))),
            };
            pairs.push(WordPair {
                a: cols[0].trim().to_string(),
                b: cols[1].trim().to_string(),
                score,
            });
        }
        Self::new(name, pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Self::parse(name, &text)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// What to do with a word that is not a single vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OovPolicy {
    /// Mean of the pieces' vectors.
    Average,
    /// The first piece's vectors.
    First,
    /// Drop pairs containing the word.
    Skip,
}

impl OovPolicy {
    pub fn name(self) -> &'static str {
        match self {
            OovPolicy::Average => "average",
            OovPolicy::First => "first",
            OovPolicy::Skip => "skip",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(OovPolicy::Average),
            "first" => Ok(OovPolicy::First),
            "skip" => Ok(OovPolicy::Skip),
            other => Err(Error::invalid(format!("unknown oov policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimilarityVariant {
    /// Cosine of sense `ℓ`.
    Sense(usize),
    /// Minimum cosine over senses.
    MinOverSenses,
    /// Cosine of embedding rows.
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SimilarityMethod {
    pub variant: SimilarityVariant,
    pub oov: OovPolicy,
}

impl fmt::Display for SimilarityMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            SimilarityVariant::Sense(l) => write!(f, "sense{l}")?,
            SimilarityVariant::MinOverSenses => write!(f, "min")?,
            SimilarityVariant::Embedding => write!(f, "embedding")?,
        }
        write!(f, "+{}", self.oov.name())
    }
}

fn pieces_for(vocab: &Vocabulary, word: &str, policy: OovPolicy) -> Option<Vec<usize>> {
    if let Some(id) = vocab.id(word) {
        return Some(vec![id]);
    }
    if policy == OovPolicy::Skip {
        return None;
    }
    let pieces = match vocab.tokenizer() {
        Tokenizer::Byte => vocab.pieces(word),
        Tokenizer::Word { .. } => vec![UNK],
    };
    match policy {
        OovPolicy::First => pieces.first().map(|&p| vec![p]),
        _ => (!pieces.is_empty()).then_some(pieces),
    }
}

fn mean_rows(rows: impl Iterator<Item = Tensor>) -> Result<Tensor> {
    let mut count = 0;
    let mut acc: Option<Tensor> = None;
    for r in rows {
        count += 1;
        acc = Some(match acc {
            Some(a) => a.add(&r)?,
            None => r,
        });
    }
    let acc = acc.ok_or_else(|| Error::invalid("mean of zero pieces"))?;
    Ok(acc.scale(1.0 / count as f64))
}

/// Senses (`k×d`) for `word`. In-vocabulary words give their own senses.
/// Otherwise, word-level vocabularies fall back to `<unk>` and byte-level ones
/// split the word into bytes and average or take the first. `None` means the
/// policy is to skip the word.
pub fn oov_embedding(view: &ModelView<'_>, vocab: &Vocabulary, word: &str, policy: OovPolicy) -> Result<Option<Tensor>> {
    let Some(pieces) = pieces_for(vocab, word, policy) else {
        return Ok(None);
    };
    let senses = pieces.iter().map(|&p| view.sense_vectors(p)).collect::<Result<Vec<_>>>()?;
    mean_rows(senses.into_iter()).map(Some)
}

fn embedding_row(view: &ModelView<'_>, vocab: &Vocabulary, word: &str, policy: OovPolicy) -> Result<Option<Tensor>> {
    let Some(pieces) = pieces_for(vocab, word, policy) else {
        return Ok(None);
    };
    let e = view.model().embeddings();
    mean_rows(pieces.iter().map(|&p| Tensor::vector(e.row(p).to_vec()))).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WordSimResult {
    pub rho: f64,
    /// Fraction of pairs that could be scored.
    pub coverage: f64,
    pub scored: usize,
}

/// Scores every pair with `method` and correlates with the human scores.
/// Pairs are processed in a canonical order, so the result does not depend
/// on the dataset's row order.
pub fn evaluate_wordsim(
    view: &ModelView<'_>,
    vocab: &Vocabulary,
    ds: &WordPairDataset,
    method: SimilarityMethod,
    exec: Execution,
) -> Result<WordSimResult> {
    if ds.is_empty() {
        return Err(Error::Data(format!("{}: dataset is empty", ds.name)));
    }
    if let SimilarityVariant::Sense(l) = method.variant {
        let k = view.model().config().num_senses;
        if l >= k {
            return Err(Error::OutOfRange {
                what: "sense",
                index: l,
                limit: k,
            });
        }
    }
    let mut pairs: Vec<&WordPair> = ds.pairs.iter().collect();
    pairs.sort_by(|x, y| (&x.a, &x.b).cmp(&(&y.a, &y.b)).then(x.score.total_cmp(&y.score)));
    let scored = par::try_map(exec, &pairs, |p| -> Result<Option<(f64, f64)>> {
        let sim = match method.variant {
            SimilarityVariant::Embedding => {
                match (
                    embedding_row(view, vocab, &p.a, method.oov)?,
                    embedding_row(view, vocab, &p.b, method.oov)?,
                ) {
                    (Some(a), Some(b)) => cosine(a.data(), b.data()),
                    _ => return Ok(None),
                }
            }
            variant => {
                let (Some(a), Some(b)) = (
                    oov_embedding(view, vocab, &p.a, method.oov)?,
                    oov_embedding(view, vocab, &p.b, method.oov)?,
                ) else {
                    return Ok(None);
                };
                match variant {
                    SimilarityVariant::Sense(l) => cosine(a.row(l), b.row(l)),
                    _ => min_cosine(&a, &b),
                }
            }
        };
        Ok(Some((sim, p.score)))
    })?;
    let (pred, gold): (Vec<f64>, Vec<f64>) = scored.into_iter().flatten().unzip();
    if pred.is_empty() {
        return Err(Error::Data(format!("{}: no pair could be scored ({method})", ds.name)));
    }
    Ok(WordSimResult {
        rho: spearman(&pred, &gold)?,
        coverage: pred.len() as f64 / ds.len() as f64,
        scored: pred.len(),
    })
}

pub const REPORT_HEADER: &str = "dataset,method,rho,coverage";

pub fn report_row(dataset: &str, method: SimilarityMethod, r: &WordSimResult) -> String {
    format!("{dataset},{method},{},{}", r.rho, r.coverage)
}
