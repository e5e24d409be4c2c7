use backpack::control::{anneal_delta, bias_ratio, nullspace_project};
use backpack::evaluation::spearman;
use backpack::model::LanguageModel;
use backpack::par::Execution;
use backpack::tensor::Tensor;
use backpack::training::{Tokenizer, Vocabulary};
use backpack::Result;
use proptest::prelude::*;

fn distinct(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(-1000i32..1000, n).prop_map(|s| s.into_iter().map(f64::from).collect())
}

/// A fixed next-token distribution, one per first token of the prompt.
struct Fixed(Vec<Vec<f64>>);

impl LanguageModel for Fixed {
    fn vocab_size(&self) -> usize {
        self.0[0].len()
    }
    fn max_len(&self) -> usize {
        4
    }
    fn log_probs(&self, tokens: &[usize]) -> Result<Tensor> {
        let row: Vec<f64> = self.0[tokens[0]].iter().map(|p| p.ln()).collect();
        Tensor::from_rows(&vec![row; tokens.len()])
    }
}

proptest! {
    #[test]
    fn spearman_ignores_monotone_transforms((a, b) in (3usize..20).prop_flat_map(|n| (distinct(n), distinct(n)))) {
        let rho = spearman(&a, &b).unwrap();
        let warped: Vec<f64> = a.iter().map(|x| (x / 100.0).exp() * 3.0 - 7.0).collect();
        prop_assert!((spearman(&warped, &b).unwrap() - rho).abs() <= 1e-12);
        let flipped: Vec<f64> = a.iter().map(|x| -x).collect();
        prop_assert!((spearman(&flipped, &b).unwrap() + rho).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&rho));
    }

    #[test]
    fn bias_ratio_is_at_least_one(rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..6)) {
        let m = Fixed(rows.clone());
        let prompts: Vec<Vec<usize>> = (0..rows.len()).map(|i| vec![i]).collect();
        let r = bias_ratio(&m, &prompts, 0, 1, Execution::Sequential).unwrap();
        prop_assert!(r >= 1.0);
        prop_assert_eq!(r, bias_ratio(&m, &prompts, 0, 1, Execution::Parallel).unwrap());
    }

    #[test]
    fn full_projection_is_orthogonal(
        e in prop::collection::vec(-3.0f64..3.0, 8),
        g in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        prop_assume!(g.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let p = nullspace_project(&e, &g, 1.0).unwrap();
        let dot: f64 = p.iter().zip(&g).map(|(x, y)| x * y).sum();
        prop_assert!(dot.abs() <= 1e-9);
        prop_assert_eq!(nullspace_project(&e, &g, 0.0).unwrap(), e);
    }

    #[test]
    fn annealing_stays_between_one_and_start(a in 0.0f64..50.0, da in 0.0f64..5.0, j in 0usize..300, d0 in 0.0f64..4.0) {
        let max_delta = d0.max(1.0);
        let lo = anneal_delta(a, j, d0, max_delta);
        let hi = anneal_delta(a + da, j, d0, max_delta);
        prop_assert!(lo >= d0.min(1.0) && lo <= d0.max(1.0));
        prop_assert!((hi - 1.0).abs() <= (lo - 1.0).abs());
    }

    #[test]
    fn word_vocab_roundtrips_known_words(words in prop::collection::vec("[a-z]{1,6}", 1..30)) {
        let text = words.join(" ");
        let v = Vocabulary::build(&text, Tokenizer::Word { lowercase: true }, 1, None).unwrap();
        let ids = v.encode(&text);
        prop_assert_eq!(ids.len(), words.len());
        prop_assert_eq!(v.decode(&ids), text);
    }
}
