use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelKind;
use super::forward::{self, Forward};
use super::{BackpackModel, ContextWeights, DeltaSchedule, SenseEdits};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::{log_softmax_rows, matmul_nt, Graph, Tensor};

/// Anything that scores next tokens.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    /// Longest sequence accepted by [`log_probs`](Self::log_probs).
    fn max_len(&self) -> usize;

    /// Next-token log-probabilities after every prefix (`n × |V|`).
    fn log_probs(&self, tokens: &[usize]) -> Result<Tensor>;
}

/// Supplies δ for each generation step. Called with the whole sequence so far
/// and the index where the model's context window starts; must return a
/// schedule for the window.
pub type DeltaHook<'a> = dyn FnMut(&[usize], usize) -> Result<DeltaSchedule> + 'a;

/// Per-(position, sense) logit contributions for one output position.
#[derive(Debug, Clone)]
pub struct LogitDecomposition {
    position: usize,
    n: usize,
    k: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl LogitDecomposition {
    pub fn position(&self) -> usize {
        self.position
    }

    /// `α_ℓij · Eᵀ C(x_j)_ℓ` for `i = position`; zero for `j > i`.
    pub fn get(&self, j: usize, sense: usize) -> &[f64] {
        let start = (j * self.k + sense) * self.vocab;
        &self.data[start..start + self.vocab]
    }

    /// Sum over every (position, sense) pair.
    pub fn total(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab];
        for part in self.data.chunks(self.vocab) {
            for (o, v) in out.iter_mut().zip(part) {
                *o += v;
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// A model plus a set of sense replacements. Interventions build new views
/// and leave the underlying model untouched.
#[derive(Debug, Clone)]
pub struct ModelView<'m> {
    model: &'m BackpackModel,
    edits: SenseEdits,
}

impl<'m> ModelView<'m> {
    pub fn new(model: &'m BackpackModel, edits: SenseEdits) -> Self {
        ModelView { model, edits }
    }

    pub fn model(&self) -> &'m BackpackModel {
        self.model
    }

    pub fn edits(&self) -> &SenseEdits {
        &self.edits
    }

    fn require_backpack(&self, what: &str) -> Result<()> {
        match self.model.config.kind {
            ModelKind::Backpack => Ok(()),
            ModelKind::Transformer => Err(Error::invalid(format!("{what} needs a backpack model"))),
        }
    }

    fn check_word(&self, word: usize) -> Result<()> {
        let v = self.model.config.vocab_size;
        if word >= v {
            return Err(Error::OutOfRange {
                what: "token id",
                index: word,
                limit: v,
            });
        }
        Ok(())
    }

    /// `C(word)` as a `k×d` matrix.
    pub fn sense_vectors(&self, word: usize) -> Result<Tensor> {
        self.require_backpack("sense_vectors")?;
        self.check_word(word)?;
        if let Some(t) = self.edits.get(word) {
            return Ok(t.clone());
        }
        let cfg = &self.model.config;
        let mut g = Graph::new();
        let p = forward::bind(&mut g, self.model, false);
        let rows = forward::sense_rows(&mut g, self.model, &p, &[word])?;
        g.value(rows).reshape(&[cfg.num_senses, cfg.model_dim])
    }

    /// Senses of every word as a `|V| × k × d` tensor. Entries are bitwise
    /// equal to [`sense_vectors`](Self::sense_vectors).
    pub fn sense_table(&self, exec: Execution) -> Result<Tensor> {
        self.require_backpack("sense_table")?;
        const CHUNK: usize = 128;
        let cfg = &self.model.config;
        let (v, k, d) = (cfg.vocab_size, cfg.num_senses, cfg.model_dim);
        let chunks: Vec<usize> = (0..v).step_by(CHUNK).collect();
        let parts = par::try_map(exec, &chunks, |&start| -> Result<Vec<f64>> {
            let words: Vec<usize> = (start..(start + CHUNK).min(v)).collect();
            let mut g = Graph::new();
            let p = forward::bind(&mut g, self.model, false);
            let rows = forward::sense_rows(&mut g, self.model, &p, &words)?;
            Ok(g.value(rows).data().to_vec())
        })?;
        let mut data: Vec<f64> = parts.concat();
        for w in self.edits.words() {
            let e = self.edits.get(w).expect("listed word");
            data[w * k * d..(w + 1) * k * d].copy_from_slice(e.data());
        }
        Tensor::new(vec![v, k, d], data)
    }

    fn run(&self, tokens: &[usize], delta: Option<&DeltaSchedule>) -> Result<(Graph, Forward)> {
        let mut g = Graph::new();
        let p = forward::bind(&mut g, self.model, false);
        let f = forward::forward(&mut g, self.model, &p, tokens, &self.edits, delta)?;
        Ok((g, f))
    }

    /// `α` for a sequence. Depends only on `E` and the Transformer, never on
    /// the senses, so sense edits cannot change it.
    pub fn contextualization_weights(&self, tokens: &[usize]) -> Result<ContextWeights> {
        self.require_backpack("contextualization_weights")?;
        forward::check_tokens(self.model, tokens)?;
        let mut g = Graph::new();
        let p = forward::bind(&mut g, self.model, false);
        let h = forward::transformer(&mut g, self.model, &p, tokens)?;
        let alphas = forward::alphas(&mut g, self.model, &p, h)?;
        ContextWeights::new(
            self.model.config.num_senses,
            tokens.len(),
            forward::collect_alphas(&g, &alphas),
        )
    }

    /// The pre-head representation `o` (`n × d`); for a transformer model,
    /// the final hidden states.
    pub fn representations(&self, tokens: &[usize], delta: Option<&DeltaSchedule>) -> Result<Tensor> {
        let (g, f) = self.run(tokens, delta)?;
        Ok(forward::value(&g, f.output))
    }

    pub fn logits(&self, tokens: &[usize], delta: Option<&DeltaSchedule>) -> Result<Tensor> {
        let (g, f) = self.run(tokens, delta)?;
        Ok(forward::value(&g, f.logits))
    }

    pub fn lm_log_probs(&self, tokens: &[usize], delta: Option<&DeltaSchedule>) -> Result<Tensor> {
        log_softmax_rows(&self.logits(tokens, delta)?)
    }

    /// Splits the logits at `position` into one vector per (context
    /// position, sense).
    pub fn logit_decomposition(&self, tokens: &[usize], position: usize) -> Result<LogitDecomposition> {
        self.require_backpack("logit_decomposition")?;
        let n = tokens.len();
        if position >= n {
            return Err(Error::OutOfRange {
                what: "position",
                index: position,
                limit: n,
            });
        }
        let (g, f) = self.run(tokens, None)?;
        let cfg = &self.model.config;
        let (k, d, v) = (cfg.num_senses, cfg.model_dim, cfg.vocab_size);
        let senses = g.value(f.senses.expect("backpack forward")).reshape(&[n * k, d])?;
        let mut data = matmul_nt(&senses, self.model.embeddings())?.into_data();
        for j in 0..n {
            for (l, &alpha) in f.alphas.iter().enumerate() {
                let a = g.value(alpha).row(position)[j];
                let start = (j * k + l) * v;
                for x in &mut data[start..start + v] {
                    *x *= a;
                }
            }
        }
        Ok(LogitDecomposition {
            position,
            n,
            k,
            vocab: v,
            data,
        })
    }

    /// A view with `C(word)_sense` multiplied by `factor`.
    pub fn with_sense_scaled(&self, word: usize, sense: usize, factor: f64) -> Result<ModelView<'m>> {
        if !(factor.is_finite() && factor >= 0.0) {
            return Err(Error::invalid(format!("sense scale factor must be non-negative, got {factor}")));
        }
        let k = self.model.config.num_senses;
        if sense >= k {
            return Err(Error::OutOfRange {
                what: "sense",
                index: sense,
                limit: k,
            });
        }
        let mut senses = self.sense_vectors(word)?;
        for x in senses.row_mut(sense) {
            *x *= factor;
        }
        self.with_senses(word, senses)
    }

    /// A view with all of `C(word)` replaced.
    pub fn with_senses(&self, word: usize, senses: Tensor) -> Result<ModelView<'m>> {
        self.require_backpack("with_senses")?;
        self.check_word(word)?;
        let cfg = &self.model.config;
        if senses.shape() != [cfg.num_senses, cfg.model_dim] {
            return Err(Error::shape(
                "with_senses",
                format!("senses {:?}, expected [{}, {}]", senses.shape(), cfg.num_senses, cfg.model_dim),
            ));
        }
        senses.ensure_finite("with_senses")?;
        let mut edits = self.edits.clone();
        edits.insert(word, senses);
        Ok(ModelView::new(self.model, edits))
    }

    /// Ancestral sampling (no truncation, no temperature). When the sequence
    /// outgrows the context length, the most recent `seq_len` tokens are used.
    /// `hook`, if given, supplies δ for every step.
    pub fn generate(
        &self,
        prompt: &[usize],
        max_new: usize,
        seed: u64,
        mut hook: Option<&mut DeltaHook<'_>>,
    ) -> Result<Vec<usize>> {
        let cap = self.model.config.seq_len;
        if prompt.is_empty() {
            return Err(Error::invalid("generation prompt is empty"));
        }
        if prompt.len() > cap {
            return Err(Error::OutOfRange {
                what: "prompt length",
                index: prompt.len(),
                limit: cap,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seq = prompt.to_vec();
        for _ in 0..max_new {
            let start = seq.len().saturating_sub(cap);
            let delta = match hook.as_mut() {
                Some(h) => Some(h(&seq, start)?),
                None => None,
            };
            let lp = self.lm_log_probs(&seq[start..], delta.as_ref())?;
            let last = lp.row(lp.rows() - 1);
            let weights: Vec<f64> = last.iter().map(|x| x.exp()).collect();
            let dist = WeightedIndex::new(&weights).map_err(|e| Error::Numeric(format!("sampling: {e}")))?;
            seq.push(dist.sample(&mut rng));
        }
        Ok(seq)
    }
}

impl LanguageModel for ModelView<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.model.config.seq_len
    }

    fn log_probs(&self, tokens: &[usize]) -> Result<Tensor> {
        self.lm_log_probs(tokens, None)
    }
}

impl LanguageModel for BackpackModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.config.seq_len
    }

    fn log_probs(&self, tokens: &[usize]) -> Result<Tensor> {
        self.lm_log_probs(tokens, None)
    }
}
