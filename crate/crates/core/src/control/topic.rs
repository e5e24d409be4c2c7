use std::collections::{BTreeMap, HashMap};

use super::csv_field;
use super::projection::{topic_scores, BagOfWords, Normalizer, TopicScores};
use crate::error::{Error, Result};
use crate::model::{DeltaSchedule, ModelView};
use crate::par::Execution;
use crate::tensor::{matmul_nt, Tensor};

/// Score quantiles that split senses into four bands.
pub const QUANTILES: [f64; 3] = [0.95, 0.80, 0.60];

/// Initial δ per band (≥ q0.95, ≥ q0.80, ≥ q0.60, below) for strengths 0-3.
pub const DELTA_TABLE: [[f64; 4]; 4] = [
    [1.0, 1.0, 1.0, 1.0],
    [1.5, 1.5, 1.3, 1.0],
    [2.2, 2.2, 1.5, 1.0],
    [3.3, 3.3, 3.0, 1.0],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ControlStrength(u8);

impl ControlStrength {
    pub fn new(level: u8) -> Result<Self> {
        if level as usize >= DELTA_TABLE.len() {
            return Err(Error::invalid(format!("control strength {level} must be 0..=3")));
        }
        Ok(ControlStrength(level))
    }

    pub fn level(self) -> u8 {
        self.0
    }

    pub fn initial_deltas(self) -> [f64; 4] {
        DELTA_TABLE[self.0 as usize]
    }

    /// Largest δ in this strength's row; sets the annealing rate.
    pub fn max_delta(self) -> f64 {
        self.initial_deltas().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Initial δ for every (word, sense).
#[derive(Debug, Clone, PartialEq)]
pub struct InitialDeltas {
    num_senses: usize,
    values: Vec<f64>,
    /// Score thresholds at [`QUANTILES`].
    pub thresholds: [f64; 3],
    pub strength: ControlStrength,
}

impl InitialDeltas {
    pub fn get(&self, word: usize, sense: usize) -> f64 {
        self.values[word * self.num_senses + sense]
    }

    pub fn num_senses(&self) -> usize {
        self.num_senses
    }

    /// δ₀ = 1 everywhere.
    pub fn uniform(vocab_size: usize, num_senses: usize, strength: ControlStrength) -> Self {
        InitialDeltas {
            num_senses,
            values: vec![1.0; vocab_size * num_senses],
            thresholds: [f64::NAN; 3],
            strength,
        }
    }
}

/// Quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bands senses by score quantile and gives each band its δ from the
/// strength's row of [`DELTA_TABLE`].
pub fn assign_deltas(scores: &TopicScores, strength: ControlStrength) -> Result<InitialDeltas> {
    let (v, k) = (scores.vocab_size, scores.num_senses);
    if scores.entries.len() != v * k {
        return Err(Error::shape(
            "assign_deltas",
            format!("{} scores for {v} words × {k} senses", scores.entries.len()),
        ));
    }
    let mut sorted: Vec<f64> = scores.entries.iter().map(|e| e.score).collect();
    if sorted.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "topic score" });
    }
    sorted.sort_by(f64::total_cmp);
    let thresholds = QUANTILES.map(|q| quantile(&sorted, q));
    let row = strength.initial_deltas();
    let mut values = vec![0.0; v * k];
    for e in &scores.entries {
        let band = thresholds.iter().position(|&t| e.score >= t).unwrap_or(3);
        values[e.word * k + e.sense] = row[band];
    }
    Ok(InitialDeltas {
        num_senses: k,
        values,
        thresholds,
        strength,
    })
}

/// Annealed δ for one sense. `a` is the sense's non-negative score mass on
/// the text so far and `j` the position of its word:
/// `b = σ(6 − a·7.5/max_delta) · min((1+j)/100, 1)`, `δ = b·δ₀ + (1−b)`.
pub fn anneal_delta(a: f64, j: usize, delta0: f64, max_delta: f64) -> f64 {
    let f = 7.5 / max_delta;
    let sigma = 1.0 / (1.0 + (a * f - 6.0).exp());
    let b = sigma * ((1 + j) as f64 / 100.0).min(1.0);
    // written so that δ₀ = 1 gives exactly 1
    1.0 + b * (delta0 - 1.0)
}

/// Per-generation annealing state: initial δ plus cached sense projections.
pub struct AnnealState<'v, 'm> {
    view: &'v ModelView<'m>,
    deltas: InitialDeltas,
    cache: HashMap<usize, Tensor>,
}

impl<'v, 'm> AnnealState<'v, 'm> {
    pub fn new(view: &'v ModelView<'m>, deltas: InitialDeltas) -> Result<Self> {
        let k = view.model().config().num_senses;
        if deltas.num_senses != k || deltas.values.len() != k * view.model().config().vocab_size {
            return Err(Error::shape("AnnealState", "initial δ table does not match the model"));
        }
        Ok(AnnealState {
            view,
            deltas,
            cache: HashMap::new(),
        })
    }

    pub fn initial(&self) -> &InitialDeltas {
        &self.deltas
    }

    /// `k × |V|` projections `E C(word)_ℓ`.
    fn projections(&mut self, word: usize) -> Result<&Tensor> {
        if !self.cache.contains_key(&word) {
            let c = self.view.sense_vectors(word)?;
            let p = matmul_nt(&c, self.view.model().embeddings())?;
            self.cache.insert(word, p);
        }
        Ok(&self.cache[&word])
    }

    /// Annealed δ for each (window position, sense), positions `start..`.
    pub fn window_deltas(&mut self, seq: &[usize], start: usize) -> Result<Vec<f64>> {
        let k = self.deltas.num_senses;
        let max_delta = self.deltas.strength.max_delta();
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for &t in seq {
            *counts.entry(t).or_default() += 1.0;
        }
        let mut out = Vec::with_capacity((seq.len() - start) * k);
        for (j, &x) in seq.iter().enumerate().skip(start) {
            for l in 0..k {
                let d0 = self.deltas.get(x, l);
                if d0 == 1.0 {
                    out.push(1.0);
                    continue;
                }
                let proj = self.projections(x)?.row(l);
                let a: f64 = counts.iter().map(|(&w, &c)| c * proj[w].max(0.0)).sum();
                out.push(anneal_delta(a, j, d0, max_delta));
            }
        }
        Ok(out)
    }
}

/// δ schedule for the next generation step: the window `seq[start..]` gets
/// `δ_ℓij` = annealed δ of sense ℓ of the word at window position `j`.
pub fn anneal_deltas(state: &mut AnnealState<'_, '_>, seq: &[usize], start: usize) -> Result<DeltaSchedule> {
    let k = state.deltas.num_senses;
    let vals = state.window_deltas(seq, start)?;
    let n = seq.len() - start;
    Ok(DeltaSchedule::from_fn(k, n, |l, _, j| vals[j * k + l]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTraceStep {
    /// First sequence position covered by the window.
    pub window_start: usize,
    /// δ per (window position, sense), row-major.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicGeneration {
    pub tokens: Vec<usize>,
    pub trace: Vec<DeltaTraceStep>,
}

/// Samples with topic-reweighted senses, annealing δ back towards 1 as the
/// text starts to express each sense. Topic scores are computed once.
#[allow(clippy::too_many_arguments)]
pub fn topic_generate(
    view: &ModelView<'_>,
    bag: &BagOfWords,
    strength: ControlStrength,
    norm: Normalizer,
    prompt: &[usize],
    max_new: usize,
    seed: u64,
    exec: Execution,
) -> Result<TopicGeneration> {
    let cfg = view.model().config();
    let deltas = if strength.level() == 0 {
        InitialDeltas::uniform(cfg.vocab_size, cfg.num_senses, strength)
    } else {
        assign_deltas(&topic_scores(view, bag, norm, exec)?, strength)?
    };
    topic_generate_with(view, deltas, prompt, max_new, seed)
}

/// [`topic_generate`] from precomputed initial δ, for drawing many samples
/// without rescoring.
pub fn topic_generate_with(
    view: &ModelView<'_>,
    deltas: InitialDeltas,
    prompt: &[usize],
    max_new: usize,
    seed: u64,
) -> Result<TopicGeneration> {
    let mut state = AnnealState::new(view, deltas)?;
    let k = state.deltas.num_senses;
    let mut trace = Vec::with_capacity(max_new);
    let mut hook = |seq: &[usize], start: usize| -> Result<DeltaSchedule> {
        let values = state.window_deltas(seq, start)?;
        let n = seq.len() - start;
        let sched = DeltaSchedule::from_fn(k, n, |l, _, j| values[j * k + l]);
        trace.push(DeltaTraceStep {
            window_start: start,
            values,
        });
        Ok(sched)
    };
    let tokens = view.generate(prompt, max_new, seed, Some(&mut hook))?;
    Ok(TopicGeneration { tokens, trace })
}

pub const TOPIC_CSV_HEADER: &str = "strength,sample_id,tokens";

pub fn topic_csv_row(strength: ControlStrength, sample_id: usize, text: &str) -> String {
    format!("{},{sample_id},{}", strength.level(), csv_field(text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::TopicScore;
    use crate::model::{BackpackConfig, BackpackModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores(n: usize) -> TopicScores {
        // word w has score w, one sense each
        TopicScores {
            vocab_size: n,
            num_senses: 1,
            entries: (0..n)
                .rev()
                .map(|w| TopicScore {
                    word: w,
                    sense: 0,
                    score: w as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn delta_table_rows() {
        let s = scores(101);
        let expect = [
            [1.0, 1.0, 1.0, 1.0],
            [1.5, 1.5, 1.3, 1.0],
            [2.2, 2.2, 1.5, 1.0],
            [3.3, 3.3, 3.0, 1.0],
        ];
        for (level, row) in expect.iter().enumerate() {
            let d = assign_deltas(&s, ControlStrength::new(level as u8).unwrap()).unwrap();
            assert_eq!(d.thresholds, [95.0, 80.0, 60.0]);
            // one word from each band: ≥95, [80, 95), [60, 80), <60
            let got = [d.get(100, 0), d.get(85, 0), d.get(70, 0), d.get(10, 0)];
            assert_eq!(&got, row);
            assert_eq!(d.get(95, 0), row[0]);
            assert_eq!(d.get(59, 0), row[3]);
        }
        assert!(ControlStrength::new(4).is_err());
        assert_eq!(ControlStrength::new(3).unwrap().max_delta(), 3.3);
    }

    #[test]
    fn anneal_limits() {
        let b = 1.0 / (1.0 + (-6.0f64).exp());
        assert!((b - 0.997_527_376_3).abs() <= 1e-9);
        let d = anneal_delta(0.0, 99, 3.3, 3.3);
        assert!((d - (b * 3.3 + (1.0 - b))).abs() <= 1e-12);
        assert_eq!(anneal_delta(1e6, 50, 3.3, 3.3), 1.0);
        assert_eq!(anneal_delta(0.0, 10, 1.0, 3.3), 1.0);
        // positions past 99 are clamped
        assert_eq!(anneal_delta(0.5, 99, 2.2, 2.2), anneal_delta(0.5, 500, 2.2, 2.2));
    }

    #[test]
    fn anneal_is_convex_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let d0 = rng.random_range(0.0..4.0);
            let j = rng.random_range(0..150);
            let a = rng.random_range(0.0..5.0);
            let d = anneal_delta(a, j, d0, 3.3);
            assert!(d >= d0.min(1.0) && d <= d0.max(1.0));
            let further = anneal_delta(a + 0.5, j, d0, 3.3);
            assert!((further - 1.0).abs() <= (d - 1.0).abs());
        }
    }

    #[test]
    fn strength_zero_generation_matches_plain_sampling() {
        let m = BackpackModel::new(BackpackConfig::new(20, 8, 2, 1, 2, 6), 9).unwrap();
        let v = m.view();
        let bag = BagOfWords::from_ids("b", vec![3], 20).unwrap();
        let zero = ControlStrength::new(0).unwrap();
        let out = topic_generate(&v, &bag, zero, Normalizer::Absolute, &[1, 2], 12, 4, Execution::default()).unwrap();
        assert_eq!(out.tokens, v.generate(&[1, 2], 12, 4, None).unwrap());
        assert_eq!(out.trace.len(), 12);
        assert!(out.trace.iter().all(|t| t.values.iter().all(|&d| d == 1.0)));

        let three = ControlStrength::new(3).unwrap();
        let a = topic_generate(&v, &bag, three, Normalizer::Absolute, &[1, 2], 12, 4, Execution::default()).unwrap();
        let b = topic_generate(&v, &bag, three, Normalizer::Absolute, &[1, 2], 12, 4, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(a.trace.iter().all(|t| t.values.iter().all(|&d| (1.0..=3.3).contains(&d))));
        // the window slides once the context is full
        assert_eq!(a.trace.last().unwrap().window_start, 13 - 6);
    }

    #[test]
    fn anneal_schedule_shape() {
        let m = BackpackModel::new(BackpackConfig::new(10, 8, 2, 1, 2, 6), 2).unwrap();
        let v = m.view();
        let mut d = InitialDeltas::uniform(10, 2, ControlStrength::new(2).unwrap());
        d.values[3 * 2 + 1] = 2.2;
        let mut st = AnnealState::new(&v, d).unwrap();
        let sched = anneal_deltas(&mut st, &[5, 3, 3, 1], 1).unwrap();
        assert_eq!((sched.senses(), sched.len()), (2, 3));
        assert_eq!(sched.get(0, 2, 0), 1.0);
        let w = sched.get(1, 2, 0);
        assert!(w > 1.0 && w < 2.2);
        assert_eq!(sched.get(1, 0, 0), w);
        // sequence position 2 is later than position 1, so b is larger
        assert!(sched.get(1, 2, 1) > w);
    }

    #[test]
    fn csv_rows() {
        let s = ControlStrength::new(2).unwrap();
        assert_eq!(topic_csv_row(s, 3, "a b"), "2,3,a b");
        assert_eq!(topic_csv_row(s, 0, "a, \"b\""), "2,0,\"a, \"\"b\"\"\"");
    }
}
