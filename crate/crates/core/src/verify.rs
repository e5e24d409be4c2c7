//! Self-checks of the model's structural guarantees. Each check builds its
//! own random instances from a fixed seed and compares against a direct
//! oracle. The CLI's `verify` command and the acceptance suite both run these.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::{
    anneal_delta, bias_ratio, optimize_sense_scale, scale_sense, assign_deltas, knowledge_edit, topic_generate, BagOfWords, ControlStrength, EditMode, EditSpec,
    Normalizer, TopicScore, TopicScores, DELTA_TABLE,
};
use crate::error::Result;
use crate::evaluation::{perplexity, spearman};
use crate::model::{BackpackConfig, BackpackModel, LanguageModel};
use crate::par::{self, Execution};
use crate::reductions::{
    attention_forward, backpack_as_attention, backpack_as_cbow, cbow_forward, AttentionLayer, CbowModel,
};
use crate::tensor::Tensor;
use crate::training::{decode_checkpoint, encode_checkpoint, Checkpoint, StorageDtype};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    /// Acceptance criterion number.
    pub criterion: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckReport {
    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("{verdict} [{}] {}: {}", self.criterion, self.name, self.detail)
    }
}

fn run(criterion: u8, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckReport {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckReport {
        criterion,
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A model whose parameters all carry N(0, 0.3) noise on top of the usual
/// init, so that attention and layer norms are far from their trivial
/// starting points.
pub fn random_model(cfg: BackpackConfig, seed: u64) -> Result<BackpackModel> {
    let base = BackpackModel::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let tensors = base
        .params()
        .iter()
        .map(|p| Ok((p.name.clone(), p.value.add(&Tensor::randn(p.value.shape(), 0.3, &mut rng))?)))
        .collect::<Result<Vec<_>>>()?;
    BackpackModel::from_tensors(cfg, tensors)
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, v: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..v)).collect()
}

/// Random small config: `|V| ≤ 30`, `d ∈ {8, 16}`, `k ∈ {1, 2, 4}`.
fn random_config(rng: &mut ChaCha8Rng) -> BackpackConfig {
    let v = rng.random_range(5..=30);
    let d = [8, 16][rng.random_range(0..2)];
    let k = [1, 2, 4][rng.random_range(0..3)];
    let layers = rng.random_range(1..=2);
    let mut cfg = BackpackConfig::new(v, d, k, layers, 2, 8);
    cfg.ff_mult = 2;
    cfg
}

/// CBOW and single-layer attention equal their Backpack forms on `seeds`
/// random instances each.
pub fn check_reductions(seeds: u64, exec: Execution) -> CheckReport {
    run(1, "reduction equivalence", || {
        let seeds: Vec<u64> = (0..seeds).collect();
        let errs = par::try_map(exec, &seeds, |&s| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let v = rng.random_range(2..=50);
            let heads = [1, 2, 4][rng.random_range(0..3)];
            let d = heads * rng.random_range(1..=32 / heads);
            let n = rng.random_range(1..=8);
            let toks = random_tokens(&mut rng, n, v);

            let cbow = CbowModel::random(v, d, 1.0, &mut rng);
            let direct = cbow_forward(&cbow, &toks)?;
            let bp = backpack_as_cbow(&cbow).distribution(&toks)?;
            let mut worst = max_diff(&direct, &bp);

            let layer = AttentionLayer::random(v, d, heads, 0.5, &mut rng)?;
            let direct = attention_forward(&layer, &layer.embed(&toks)?)?;
            let bp = backpack_as_attention(&layer)?.representations(&toks)?;
            worst = worst.max(max_diff(direct.data(), bp.data()));
            Ok(worst)
        })?;
        let worst = errs.iter().copied().fold(0.0, f64::max);
        Ok((worst <= 1e-9, format!("{} seeds, max |diff| {worst:.3e} (tol 1e-9)", seeds.len())))
    })
}

/// Loss gradient of the full model against central differences
/// (`d=16, k=4, L=2, n=4, |V|=20`).
pub fn check_gradients(exec: Execution) -> CheckReport {
    run(2, "gradient fidelity", || {
        let mut cfg = BackpackConfig::new(20, 16, 4, 2, 2, 4);
        cfg.ff_mult = 2;
        let m = random_model(cfg, 17)?;
        let err = m.gradient_check(&[3, 17, 3, 8], &[17, 3, 8, 0], 1e-5, exec)?;
        Ok((
            err <= 1e-4,
            format!("{} parameters, max rel err {err:.3e} (tol 1e-4)", m.num_parameters()),
        ))
    })
}

/// α rows are distributions over the causal prefix and prefixes are stable
/// under appending, on `inputs` random sequences.
pub fn check_simplex(inputs: usize, exec: Execution) -> CheckReport {
    run(3, "simplex and causality", || {
        const PER_MODEL: usize = 50;
        let models: Vec<u64> = (0..inputs.div_ceil(PER_MODEL) as u64).collect();
        let results = par::try_map(exec, &models, |&s| -> Result<(f64, usize)> {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
            let cfg = random_config(&mut rng);
            let (v, k) = (cfg.vocab_size, cfg.num_senses);
            let m = random_model(cfg, s)?;
            let (mut worst, mut bad) = (0.0f64, 0);
            for _ in 0..PER_MODEL {
                let n = rng.random_range(1..=8);
                let toks = random_tokens(&mut rng, n, v);
                let a = m.contextualization_weights(&toks)?;
                for l in 0..k {
                    for i in 0..n {
                        let row = a.row(l, i);
                        worst = worst.max((row[..=i].iter().sum::<f64>() - 1.0).abs());
                        bad += row.iter().filter(|&&x| x < 0.0).count();
                        bad += row[i + 1..].iter().filter(|&&x| x != 0.0).count();
                    }
                }
                if n < 8 {
                    let extra = rng.random_range(1..=8 - n);
                    let mut longer = toks.clone();
                    longer.extend(random_tokens(&mut rng, extra, v));
                    let b = m.contextualization_weights(&longer)?;
                    for l in 0..k {
                        for i in 0..n {
                            if a.row(l, i)[..n] != b.row(l, i)[..n] {
                                bad += 1;
                            }
                        }
                    }
                }
            }
            Ok((worst, bad))
        })?;
        let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
        let bad: usize = results.iter().map(|r| r.1).sum();
        let total = models.len() * PER_MODEL;
        Ok((
            worst <= 1e-9 && bad == 0,
            format!("{total} inputs, max |Σα−1| {worst:.3e}, {bad} sign/causality/prefix violations"),
        ))
    })
}

/// Scaling one sense moves the logits by exactly its weighted contribution
/// and leaves α bitwise unchanged.
pub fn check_interventions(trials: usize, exec: Execution) -> CheckReport {
    run(4, "intervention exactness", || {
        let ids: Vec<u64> = (0..trials as u64).collect();
        let results = par::try_map(exec, &ids, |&s| -> Result<(f64, bool)> {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + s);
            let cfg = random_config(&mut rng);
            let (v, k) = (cfg.vocab_size, cfg.num_senses);
            let m = random_model(cfg, 100 + s)?;
            let n = rng.random_range(1..=8);
            let mut toks = random_tokens(&mut rng, n, v);
            let x = toks[rng.random_range(0..n)];
            // make repeats of x likely
            if n > 2 {
                toks[n - 1] = x;
            }
            let l = rng.random_range(0..k);
            let f: f64 = rng.random_range(0.0..=2.0);

            let base = m.view();
            let edited = base.with_sense_scaled(x, l, f)?;
            let before = base.logits(&toks, None)?;
            let after = edited.logits(&toks, None)?;
            let alpha = base.contextualization_weights(&toks)?;
            let same_alpha = alpha == edited.contextualization_weights(&toks)?;
            let c = base.sense_vectors(x)?;
            let e = m.embeddings();
            let proj: Vec<f64> = (0..v).map(|w| crate::tensor::dot(e.row(w), c.row(l))).collect();
            let mut worst = 0.0f64;
            for i in 0..n {
                let weight: f64 = (0..=i).filter(|&j| toks[j] == x).map(|j| alpha.get(l, i, j)).sum();
                for (w, p) in proj.iter().enumerate() {
                    let want = (f - 1.0) * weight * p;
                    let got = after.row(i)[w] - before.row(i)[w];
                    worst = worst.max((got - want).abs());
                }
            }
            Ok((worst, same_alpha))
        })?;
        let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
        let alpha_ok = results.iter().all(|r| r.1);
        Ok((
            worst <= 1e-5 && alpha_ok,
            format!("{trials} trials, max logit error {worst:.3e} (tol 1e-5), α unchanged: {alpha_ok}"),
        ))
    })
}

/// The δ table comes out exactly, and strength 0 samples the same tokens as
/// plain generation.
pub fn check_delta_schedule(exec: Execution) -> CheckReport {
    run(6, "delta schedule", || {
        // 101 single-sense words scored 0..=100 put the quantiles at 95/80/60
        let scores = TopicScores {
            vocab_size: 101,
            num_senses: 1,
            entries: (0..=100)
                .rev()
                .map(|w| TopicScore {
                    word: w,
                    sense: 0,
                    score: w as f64,
                })
                .collect(),
        };
        let mut table_ok = true;
        for (level, row) in DELTA_TABLE.iter().enumerate() {
            let d = assign_deltas(&scores, ControlStrength::new(level as u8)?)?;
            let got = [d.get(97, 0), d.get(85, 0), d.get(65, 0), d.get(20, 0)];
            table_ok &= &got == row;
        }
        let expected = [[1.0; 4], [1.5, 1.5, 1.3, 1.0], [2.2, 2.2, 1.5, 1.0], [3.3, 3.3, 3.0, 1.0]];
        table_ok &= DELTA_TABLE == expected;

        let mut same = 0;
        let runs = 5;
        for s in 0..runs {
            let mut cfg = BackpackConfig::new(30, 16, 4, 2, 2, 8);
            cfg.ff_mult = 2;
            let m = random_model(cfg, 300 + s)?;
            let v = m.view();
            let bag = BagOfWords::from_ids("bag", vec![3, 7], 30)?;
            let zero = ControlStrength::new(0)?;
            let out = topic_generate(&v, &bag, zero, Normalizer::Absolute, &[1, 2, 3], 20, s, exec)?;
            if out.tokens == v.generate(&[1, 2, 3], 20, s, None)? {
                same += 1;
            }
        }
        Ok((
            table_ok && same == runs,
            format!("table exact: {table_ok}; strength-0 token-identical in {same}/{runs} runs"),
        ))
    })
}

/// `δ` stays between 1 and `δ₀` and approaches 1 monotonically in `a`.
pub fn check_annealing(draws: usize) -> CheckReport {
    run(7, "annealing contract", || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut out_of_range, mut non_monotone) = (0, 0);
        for _ in 0..draws {
            let d0: f64 = rng.random_range(0.0..4.0);
            let max_delta = [1.5, 2.2, 3.3][rng.random_range(0..3)];
            let j = rng.random_range(0..200);
            let a: f64 = rng.random_range(0.0..10.0);
            let d = anneal_delta(a, j, d0, max_delta);
            if d < d0.min(1.0) || d > d0.max(1.0) {
                out_of_range += 1;
            }
            let mut prev = (d - 1.0).abs();
            for step in 1..=20 {
                let next = (anneal_delta(a + step as f64 * 0.5, j, d0, max_delta) - 1.0).abs();
                if next > prev {
                    non_monotone += 1;
                }
                prev = next;
            }
            if (anneal_delta(1e6, j, d0, max_delta) - 1.0).abs() > 1e-12 {
                non_monotone += 1;
            }
        }
        Ok((
            out_of_range == 0 && non_monotone == 0,
            format!("{draws} draws, {out_of_range} out of [min(1,δ₀), max(1,δ₀)], {non_monotone} non-monotone"),
        ))
    })
}

/// Corrected removal is orthogonal to `E x_r`, faithful mode matches the
/// literal formula evaluated separately, and other words are untouched.
pub fn check_knowledge_edit(trials: usize) -> CheckReport {
    run(8, "knowledge edit", || {
        let (mut ortho, mut oracle, mut locality_ok) = (0.0f64, 0.0f64, true);
        for s in 0..trials as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + s);
            let mut cfg = random_config(&mut rng);
            cfg.vocab_size = cfg.vocab_size.max(6);
            let v = cfg.vocab_size;
            let m = random_model(cfg, 500 + s)?;
            let view = m.view();
            let x = rng.random_range(0..v);
            let r = (x + 1 + rng.random_range(0..v - 1)) % v;
            let mut a = rng.random_range(0..v);
            while a == r {
                a = rng.random_range(0..v);
            }
            let e = m.embeddings();

            let removal = EditSpec {
                target: x,
                removed: r,
                added: None,
                mode: EditMode::Corrected,
            };
            let out = knowledge_edit(&view, &removal)?;
            let c = out.sense_vectors(x)?;
            for l in 0..c.rows() {
                ortho = ortho.max(c.row(l).iter().zip(e.row(r)).map(|(p, q)| p * q).sum::<f64>().abs());
            }

            let faithful = EditSpec {
                target: x,
                removed: r,
                added: Some(a),
                mode: EditMode::Faithful,
            };
            let out = knowledge_edit(&view, &faithful)?;
            let got = out.sense_vectors(x)?;
            let want = faithful_oracle(&view.sense_vectors(x)?, &view.sense_vectors(r)?, e.row(r), e.row(a));
            oracle = oracle.max(max_diff(got.data(), &want));

            for w in (0..v).filter(|&w| w != x) {
                locality_ok &= out.sense_vectors(w)? == view.sense_vectors(w)?;
            }
            let toks = random_tokens(&mut rng, 6, v);
            locality_ok &= out.contextualization_weights(&toks)? == view.contextualization_weights(&toks)?;
        }
        Ok((
            ortho <= 1e-9 && oracle <= 1e-10 && locality_ok,
            format!(
                "{trials} trials, max |C̃ᵀEx_r| {ortho:.3e} (tol 1e-9), faithful vs oracle {oracle:.3e} (tol 1e-10), other words unchanged: {locality_ok}"
            ),
        ))
    })
}

/// The faithful edit formula written out term by term.
fn faithful_oracle(c: &Tensor, c_removed: &Tensor, er: &[f64], ea: &[f64]) -> Vec<f64> {
    let d = er.len();
    let mut er_sq = 0.0;
    let mut ea_sq = 0.0;
    for i in 0..d {
        er_sq += er[i] * er[i];
        ea_sq += ea[i] * ea[i];
    }
    let phi = ea_sq / er_sq;
    let mut out = Vec::with_capacity(c.len());
    for l in 0..c.rows() {
        let (cl, rl) = (c.row(l), c_removed.row(l));
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..d {
            num += cl[i] * er[i];
            den += rl[i] * rl[i];
        }
        for i in 0..d {
            out.push(cl[i] + (num / den) * (ea[i] / phi - er[i]));
        }
    }
    out
}

/// Next-token distribution fixed per prompt by its first token.
struct TableModel(Vec<Vec<f64>>);

impl LanguageModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.0[0].len()
    }
    fn max_len(&self) -> usize {
        8
    }
    fn log_probs(&self, tokens: &[usize]) -> Result<Tensor> {
        let row: Vec<f64> = self.0[tokens[0]].iter().map(|p| p.ln()).collect();
        Tensor::from_rows(&vec![row; tokens.len()])
    }
}

pub fn check_bias_mechanics(trials: usize, exec: Execution) -> CheckReport {
    run(9, "bias metric", || {
        let table = TableModel(vec![vec![0.2, 0.1, 0.7], vec![0.1, 0.4, 0.5]]);
        let single = bias_ratio(&table, &[vec![0]], 0, 1, exec)?;
        let pair = bias_ratio(&table, &[vec![0], vec![1]], 0, 1, exec)?;

        let (mut balanced_ok, mut scale_ok, mut worst) = (true, true, f64::NEG_INFINITY);
        for s in 0..trials as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + s);
            let mut cfg = random_config(&mut rng);
            cfg.vocab_size = cfg.vocab_size.max(6);
            let v = cfg.vocab_size;
            let m = random_model(cfg, 600 + s)?;
            let (he, she) = (0, 1);
            let prompts: Vec<Vec<usize>> = (0..3)
                .map(|_| {
                    let n = rng.random_range(1..=m.config().seq_len);
                    random_tokens(&mut rng, n, v)
                })
                .collect();

            let mut balanced = m.clone();
            let row = balanced.embeddings().row(he).to_vec();
            balanced.embeddings_mut().row_mut(she).copy_from_slice(&row);
            balanced_ok &= bias_ratio(&balanced, &prompts, he, she, exec)? == 1.0;

            let word = rng.random_range(2..v);
            let sense = rng.random_range(0..m.config().num_senses);
            let view = m.view();
            let fit = optimize_sense_scale(&view, &prompts, word, sense, he, she, exec)?;
            let at_one = bias_ratio(&scale_sense(&view, word, sense, 1.0)?, &prompts, he, she, exec)?;
            let at_fit = bias_ratio(&scale_sense(&view, word, sense, fit.factor)?, &prompts, he, she, exec)?;
            scale_ok &= at_fit <= at_one;
            worst = worst.max(at_fit - at_one);
        }
        let formula_ok = (single - 2.0).abs() <= 1e-12 && (pair - 3.0).abs() <= 1e-12;
        Ok((
            formula_ok && balanced_ok && scale_ok,
            format!(
                "single {single}, two-prompt {pair}, balanced models exactly 1: {balanced_ok}, {trials} fits, max (fit − factor-1) ratio {worst:.3e}"
            ),
        ))
    })
}

/// `1 − 6Σd²/(n(n²−1))` for lists without ties.
fn spearman_no_ties(a: &[f64], b: &[f64]) -> f64 {
    let rank = |x: &[f64]| -> Vec<f64> {
        x.iter().map(|v| x.iter().filter(|w| *w < v).count() as f64 + 1.0).collect()
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(p, q)| (p - q).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

pub fn check_evaluation_plumbing(exec: Execution) -> CheckReport {
    run(10, "evaluation plumbing", || {
        let gold = [1.0, 2.0, 3.0, 4.0, 5.0];
        let rev = [5.0, 4.0, 3.0, 2.0, 1.0];
        let swapped = [1.0, 2.0, 3.0, 5.0, 4.0];
        let same = spearman(&gold, &gold)?;
        let opposite = spearman(&rev, &gold)?;
        let third = spearman(&swapped, &gold)?;
        let oracle = spearman_no_ties(&swapped, &gold);
        let rank_ok = same == 1.0 && opposite == -1.0 && (third - oracle).abs() <= 1e-12 && (oracle - 0.9).abs() <= 1e-12;

        // exp(ln V) rounds back to V only for some V; for the others the
        // closest reachable value is exp(ln V) itself.
        let (mut exact, mut representable, mut uniform_ok) = (0, 0, true);
        for (i, v) in [2usize, 4, 7, 13, 50].into_iter().enumerate() {
            let mut m = BackpackModel::new(BackpackConfig::new(v, 8, 2, 1, 2, 6), i as u64)?;
            m.embeddings_mut().data_mut().fill(0.0);
            let ids: Vec<usize> = (0..23).map(|t| (t * 5) % v).collect();
            let ppl = perplexity(&m, &ids, exec)?;
            let floor = (v as f64).ln().exp();
            uniform_ok &= ppl == floor;
            if floor == v as f64 {
                representable += 1;
                exact += usize::from(ppl == v as f64);
            }
        }
        uniform_ok &= exact == representable;

        let m = random_model(BackpackConfig::new(17, 16, 4, 2, 2, 8), 77)?;
        let ckpt = Checkpoint {
            model: m.clone(),
            vocab: None,
            optimizer: None,
            seed: 77,
            step: 0,
        };
        let back = decode_checkpoint(&encode_checkpoint(&ckpt, StorageDtype::F64)?)?;
        let toks = [3, 1, 16, 0, 9, 9, 2];
        let roundtrip_ok = back.model.lm_log_probs(&toks, None)? == m.lm_log_probs(&toks, None)?;
        Ok((
            rank_ok && uniform_ok && roundtrip_ok,
            format!(
                "spearman {same} / {opposite} / {third} (oracle {oracle}), uniform perplexity == |V| for {exact}/{representable} sizes where exp(ln V) is exact, == exp(ln V) elsewhere: {uniform_ok}, checkpoint forward bitwise equal: {roundtrip_ok}"
            ),
        ))
    })
}

/// Every check run by `verify`, at its acceptance size.
pub fn run_all(exec: Execution) -> Vec<CheckReport> {
    vec![
        check_reductions(100, exec),
        check_gradients(exec),
        check_simplex(1000, exec),
        check_interventions(200, exec),
        check_delta_schedule(exec),
        check_annealing(10_000),
        check_knowledge_edit(50),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_runs_pass() {
        let ex = Execution::default();
        for r in [
            check_reductions(5, ex),
            check_simplex(60, ex),
            check_interventions(5, ex),
            check_annealing(200),
            check_knowledge_edit(3),
            check_bias_mechanics(3, ex),
            check_evaluation_plumbing(ex),
        ] {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn report_line() {
        let r = CheckReport {
            criterion: 7,
            name: "x",
            passed: false,
            detail: "d".into(),
            seconds: 0.0,
        };
        assert_eq!(r.line(), "FAIL [7] x: d");
    }
}
