use crate::error::{Error, Result};
use crate::model::ModelView;
use crate::par::{self, Execution};
use crate::tensor::{matmul_nt, Tensor};
use crate::training::Vocabulary;

const TOPICS_TSV: &str = include_str!("../../data/topics.tsv");

/// The 17 topic labels and their bags of words, as `(label, words)`.
pub static TOPIC_BAGS: std::sync::LazyLock<Vec<(&'static str, Vec<&'static str>)>> = std::sync::LazyLock::new(|| {
    TOPICS_TSV
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (label, words) = l.split_once('\t').expect("topics.tsv has two columns");
            (label, words.split(',').map(str::trim).collect())
        })
        .collect()
});

/// `E C(word)_sense`: the score the sense assigns to every vocabulary item.
pub fn sense_projection(view: &ModelView<'_>, word: usize, sense: usize) -> Result<Vec<f64>> {
    let senses = view.sense_vectors(word)?;
    if sense >= senses.rows() {
        return Err(Error::OutOfRange {
            what: "sense",
            index: sense,
            limit: senses.rows(),
        });
    }
    let c = Tensor::matrix(1, senses.cols(), senses.row(sense).to_vec())?;
    Ok(matmul_nt(&c, view.model().embeddings())?.into_data())
}

fn ranked(scores: Vec<f64>, m: usize, descending: bool) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = scores[a].total_cmp(&scores[b]);
        if descending { ord.reverse() } else { ord }.then(a.cmp(&b))
    });
    idx.truncate(m.min(scores.len()));
    idx.into_iter().map(|i| (i, scores[i])).collect()
}

/// The `m` words scored highest by sense `sense` of `word`, best first.
/// `m` larger than the vocabulary returns every word.
pub fn sense_projection_topk(view: &ModelView<'_>, word: usize, sense: usize, m: usize) -> Result<Vec<(usize, f64)>> {
    Ok(ranked(sense_projection(view, word, sense)?, m, true))
}

/// The `m` lowest-scored words, most negative first.
pub fn sense_projection_bottomk(view: &ModelView<'_>, word: usize, sense: usize, m: usize) -> Result<Vec<(usize, f64)>> {
    Ok(ranked(sense_projection(view, word, sense)?, m, false))
}

/// Indicator vector over the vocabulary, stored as the sorted set of ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BagOfWords {
    pub name: String,
    words: Vec<usize>,
}

impl BagOfWords {
    pub fn from_ids(name: impl Into<String>, mut ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        let name = name.into();
        ids.sort_unstable();
        ids.dedup();
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::OutOfRange {
                what: "bag word id",
                index: bad,
                limit: vocab_size,
            });
        }
        if ids.is_empty() {
            return Err(Error::Data(format!("bag `{name}` has no in-vocabulary word")));
        }
        Ok(BagOfWords { name, words: ids })
    }

    /// Out-of-vocabulary words are dropped with a warning.
    pub fn from_words(name: impl Into<String>, words: &[&str], vocab: &Vocabulary) -> Result<Self> {
        let name = name.into();
        let mut ids = Vec::new();
        for w in words {
            match vocab.id(w) {
                Some(id) => ids.push(id),
                None => log::warn!("bag `{name}`: `{w}` is not in the vocabulary"),
            }
        }
        Self::from_ids(name, ids, vocab.len())
    }

    /// One of the bundled topic bags, e.g. `arts_culture`.
    pub fn topic(label: &str, vocab: &Vocabulary) -> Result<Self> {
        let (_, words) = TOPIC_BAGS
            .iter()
            .find(|(l, _)| *l == label)
            .ok_or_else(|| Error::invalid(format!("unknown topic `{label}`")))?;
        Self::from_words(label, words, vocab)
    }

    pub fn words(&self) -> &[usize] {
        &self.words
    }

    pub fn contains(&self, id: usize) -> bool {
        self.words.binary_search(&id).is_ok()
    }
}

/// Denominator of the topic score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalizer {
    /// `max_x |xᵀEᵀC|`.
    #[default]
    Absolute,
    /// `max_x xᵀEᵀC`, the literal reading without the absolute value.
    Literal,
}

impl Normalizer {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(Normalizer::Absolute),
            "literal" => Ok(Normalizer::Literal),
            other => Err(Error::invalid(format!("unknown normalizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopicScore {
    pub word: usize,
    pub sense: usize,
    pub score: f64,
}

/// Scores for all `|V|·k` senses, highest first.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicScores {
    pub vocab_size: usize,
    pub num_senses: usize,
    pub entries: Vec<TopicScore>,
}

/// `s(C(x)_ℓ) = bᵀEᵀC(x)_ℓ / max(EᵀC(x)_ℓ)` for every word and sense; an
/// all-zero sense scores 0. Ties are broken by (word, sense).
pub fn topic_scores(view: &ModelView<'_>, bag: &BagOfWords, norm: Normalizer, exec: Execution) -> Result<TopicScores> {
    let cfg = view.model().config();
    let (v, k, d) = (cfg.vocab_size, cfg.num_senses, cfg.model_dim);
    if let Some(&w) = bag.words.last() {
        if w >= v {
            return Err(Error::OutOfRange {
                what: "bag word id",
                index: w,
                limit: v,
            });
        }
    }
    let table = view.sense_table(exec)?;
    let e = view.model().embeddings();
    const CHUNK: usize = 64;
    let starts: Vec<usize> = (0..v * k).step_by(CHUNK).collect();
    let parts = par::try_map(exec, &starts, |&s| -> Result<Vec<f64>> {
        let end = (s + CHUNK).min(v * k);
        let c = Tensor::matrix(end - s, d, table.data()[s * d..end * d].to_vec())?;
        let proj = matmul_nt(&c, e)?;
        Ok((0..end - s)
            .map(|r| {
                let row = proj.row(r);
                let num: f64 = bag.words.iter().map(|&w| row[w]).sum();
                let den = match norm {
                    Normalizer::Absolute => row.iter().fold(0.0f64, |m, x| m.max(x.abs())),
                    Normalizer::Literal => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                };
                if den == 0.0 { 0.0 } else { num / den }
            })
            .collect())
    })?;
    let mut entries: Vec<TopicScore> = parts
        .concat()
        .into_iter()
        .enumerate()
        .map(|(i, score)| TopicScore {
            word: i / k,
            sense: i % k,
            score,
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.word, a.sense).cmp(&(b.word, b.sense))));
    Ok(TopicScores {
        vocab_size: v,
        num_senses: k,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackpackConfig, BackpackModel};
    use crate::tensor::dot;

    fn model(v: usize, d: usize, k: usize) -> BackpackModel {
        BackpackModel::new(BackpackConfig::new(v, d, k, 1, 2, 6), 3).unwrap()
    }

    #[test]
    fn topk_is_sorted_and_clamped() {
        let m = model(15, 8, 2);
        let v = m.view();
        let top = sense_projection_topk(&v, 4, 1, 5).unwrap();
        assert_eq!(top.len(), 5);
        assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
        let c = v.sense_vectors(4).unwrap();
        let best = (0..15)
            .map(|x| dot(m.embeddings().row(x), c.row(1)))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(top[0].1, best);
        assert_eq!(sense_projection_topk(&v, 4, 1, 100).unwrap().len(), 15);
        let bottom = sense_projection_bottomk(&v, 4, 1, 3).unwrap();
        assert!(bottom.windows(2).all(|w| w[0].1 <= w[1].1));
        assert!(sense_projection_topk(&v, 4, 2, 1).is_err());
    }

    #[test]
    fn identity_embeddings_pick_argmax_coordinate() {
        let mut m = model(8, 8, 2);
        *m.embeddings_mut() = Tensor::identity(8);
        let v = m.view();
        for word in 0..8 {
            let c = v.sense_vectors(word).unwrap();
            let row = c.row(0);
            let arg = (0..8).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(sense_projection_topk(&v, word, 0, 1).unwrap()[0].0, arg);
        }
    }

    #[test]
    fn topic_scores_cover_all_senses_and_are_scale_free() {
        let m = model(12, 8, 4);
        let v = m.view();
        let bag = BagOfWords::from_ids("b", vec![2, 5], 12).unwrap();
        let s = topic_scores(&v, &bag, Normalizer::Absolute, Execution::default()).unwrap();
        assert_eq!(s.entries.len(), 48);
        assert!(s.entries.windows(2).all(|w| w[0].score >= w[1].score));
        let seq = topic_scores(&v, &bag, Normalizer::Absolute, Execution::Sequential).unwrap();
        assert_eq!(s, seq);

        let scaled = v.with_sense_scaled(7, 1, 3.5).unwrap();
        let s2 = topic_scores(&scaled, &bag, Normalizer::Absolute, Execution::default()).unwrap();
        let find = |t: &TopicScores| t.entries.iter().find(|e| e.word == 7 && e.sense == 1).unwrap().score;
        assert!((find(&s) - find(&s2)).abs() <= 1e-12);
        let zeroed = v.with_sense_scaled(7, 1, 0.0).unwrap();
        let s3 = topic_scores(&zeroed, &bag, Normalizer::Literal, Execution::default()).unwrap();
        assert_eq!(find(&s3), 0.0);
    }

    #[test]
    fn aligned_sense_outscores_unrelated_one() {
        // three words with orthonormal embeddings; word 0's first sense points
        // at word 1 (the bag), its second at word 2
        let mut m = model(3, 4, 2);
        let mut e = Tensor::zeros(&[3, 4]);
        for i in 0..3 {
            e.row_mut(i)[i] = 1.0;
        }
        *m.embeddings_mut() = e;
        let mut c = Tensor::zeros(&[2, 4]);
        c.row_mut(0)[1] = 2.0;
        c.row_mut(1)[2] = 2.0;
        c.row_mut(1)[1] = 0.01;
        let v = m.view().with_senses(0, c).unwrap();
        let bag = BagOfWords::from_ids("b", vec![1], 3).unwrap();
        let s = topic_scores(&v, &bag, Normalizer::Absolute, Execution::default()).unwrap();
        let get = |l| s.entries.iter().find(|e| e.word == 0 && e.sense == l).unwrap().score;
        assert_eq!(get(0), 1.0);
        assert!(get(1).abs() <= 0.01 * get(0));
    }

    #[test]
    fn bags() {
        assert_eq!(TOPIC_BAGS.len(), 17);
        assert_eq!(TOPIC_BAGS[0], ("arts_culture", vec!["arts", "culture"]));
        assert_eq!(TOPIC_BAGS[16].1, vec!["youth", "student", "life"]);
        let vocab = Vocabulary::build(
            "arts and culture and more",
            crate::training::Tokenizer::Word { lowercase: true },
            1,
            None,
        )
        .unwrap();
        let bag = BagOfWords::topic("arts_culture", &vocab).unwrap();
        assert_eq!(bag.words().len(), 2);
        assert!(BagOfWords::topic("gaming", &vocab).is_err());
        assert!(BagOfWords::topic("nope", &vocab).is_err());
        assert!(BagOfWords::from_ids("x", vec![9], 3).is_err());
    }
}
