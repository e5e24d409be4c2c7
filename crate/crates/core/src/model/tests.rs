use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{grad_check_many, matmul_nt};

fn small(k: usize) -> BackpackConfig {
    let mut c = BackpackConfig::new(20, 16, k, 2, 2, 8);
    c.ff_mult = 2;
    c
}

/// Random model with weights large enough that every path matters.
fn spread(cfg: BackpackConfig, seed: u64) -> BackpackModel {
    let base = BackpackModel::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let tensors = base
        .params()
        .iter()
        .map(|p| {
            let noise = Tensor::randn(p.value.shape(), 0.3, &mut rng);
            (p.name.clone(), p.value.add(&noise).unwrap())
        })
        .collect();
    BackpackModel::from_tensors(cfg, tensors).unwrap()
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, v: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..v)).collect()
}

#[test]
fn sense_shape_and_range() {
    let m = spread(small(4), 1);
    assert_eq!(m.sense_vectors(3).unwrap().shape(), &[4, 16]);
    assert!(m.sense_vectors(20).is_err());
}

#[test]
fn sense_table_matches_single_queries_bitwise() {
    let m = spread(small(4), 2);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let table = m.view().sense_table(exec).unwrap();
        for w in 0..20 {
            let one = m.sense_vectors(w).unwrap();
            assert_eq!(&table.data()[w * 64..(w + 1) * 64], one.data(), "word {w}");
        }
    }
}

#[test]
fn senses_are_identical_across_contexts() {
    let m = spread(small(4), 3);
    let senses_in = |toks: &[usize]| {
        let mut g = Graph::new();
        let p = forward::bind(&mut g, &m, false);
        let f = forward::forward(&mut g, &m, &p, toks, &SenseEdits::new(), None).unwrap();
        g.value(f.senses.unwrap()).clone()
    };
    let a = senses_in(&[5, 1, 2]);
    let b = senses_in(&[7, 7, 9, 5, 4, 5]);
    let single = m.sense_vectors(5).unwrap();
    assert_eq!(a.row(0), single.data());
    assert_eq!(b.row(3), single.data());
    assert_eq!(b.row(5), single.data());
}

#[test]
fn zero_final_layer_gives_bias_senses() {
    let cfg = small(4);
    let mut m = spread(cfg, 4);
    m.param_mut("sense.out.proj.w").unwrap().data_mut().fill(0.0);
    let bias = m.param("sense.out.proj.b").unwrap().clone();
    for w in 0..20 {
        assert_eq!(m.sense_vectors(w).unwrap().data(), bias.data());
    }
}

#[test]
fn alpha_is_a_causal_simplex() {
    let m = spread(small(4), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let n = rng.random_range(1..=8);
        let toks = random_tokens(&mut rng, n, 20);
        let a = m.contextualization_weights(&toks).unwrap();
        assert_eq!(a.senses(), 4);
        for l in 0..4 {
            assert_eq!(a.get(l, 0, 0), 1.0);
            for i in 0..n {
                let row = a.row(l, i);
                let s: f64 = row[..=i].iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!(row[i + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }
}

#[test]
fn appending_keeps_prefix_alpha() {
    let m = spread(small(4), 6);
    let short = m.contextualization_weights(&[3, 1, 4]).unwrap();
    let long = m.contextualization_weights(&[3, 1, 4, 1, 5]).unwrap();
    for l in 0..4 {
        for i in 0..3 {
            assert_eq!(short.row(l, i), &long.row(l, i)[..3]);
        }
    }
}

#[test]
fn uniform_weights_average_senses() {
    let mut m = spread(small(1), 7);
    m.param_mut("context.qk.w").unwrap().data_mut().fill(0.0);
    let toks = [2, 8, 8, 13];
    let o = m.view().representations(&toks, None).unwrap();
    for i in 0..toks.len() {
        let mut mean = vec![0.0; 16];
        for &t in &toks[..=i] {
            for (m_, s) in mean.iter_mut().zip(m.sense_vectors(t).unwrap().data()) {
                *m_ += s / (i + 1) as f64;
            }
        }
        for (a, b) in o.row(i).iter().zip(&mean) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn delta_zero_and_linearity() {
    let m = spread(small(4), 8);
    let toks = [4, 0, 19, 7];
    let v = m.view();
    let zero = DeltaSchedule::from_fn(4, 4, |_, _, _| 0.0);
    let o = v.representations(&toks, Some(&zero)).unwrap();
    assert!(o.data().iter().all(|&x| x == 0.0));

    let base = v.representations(&toks, None).unwrap();
    let mut d = DeltaSchedule::ones(4, 4);
    d.set(2, 3, 1, 2.0);
    let bumped = v.representations(&toks, Some(&d)).unwrap();
    let alpha = m.contextualization_weights(&toks).unwrap().get(2, 3, 1);
    let c = m.sense_vectors(toks[1]).unwrap();
    for (col, c) in c.row(2).iter().enumerate() {
        let want = base.row(3)[col] + alpha * c;
        assert!((bumped.row(3)[col] - want).abs() <= 1e-12);
    }
    for i in 0..3 {
        assert_eq!(bumped.row(i), base.row(i));
    }
    let ones = DeltaSchedule::ones(4, 4);
    assert_eq!(v.representations(&toks, Some(&ones)).unwrap(), base);
    assert!(v.representations(&toks, Some(&DeltaSchedule::ones(4, 3))).is_err());
    let mut neg = DeltaSchedule::ones(4, 4);
    neg.set(0, 0, 0, -1.0);
    assert!(v.representations(&toks, Some(&neg)).is_err());
}

#[test]
fn log_probs_normalize_and_zero_embeddings_are_uniform() {
    let mut m = spread(small(4), 10);
    let lp = m.lm_log_probs(&[1, 2, 3], None).unwrap();
    for i in 0..3 {
        let s: f64 = lp.row(i).iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() <= 1e-9);
    }
    m.embeddings_mut().data_mut().fill(0.0);
    let lp = m.lm_log_probs(&[1, 2, 3], None).unwrap();
    for x in lp.data() {
        assert!((x + (20f64).ln()).abs() <= 1e-12);
    }
}

#[test]
fn logits_decompose_into_sense_contributions() {
    let m = spread(small(4), 11);
    let toks = [6, 2, 11, 17, 3];
    let v = m.view();
    let logits = v.logits(&toks, None).unwrap();
    for i in 0..toks.len() {
        let dec = v.logit_decomposition(&toks, i).unwrap();
        for (a, b) in dec.total().iter().zip(logits.row(i)) {
            assert!((a - b).abs() <= 1e-6);
        }
        for j in i + 1..toks.len() {
            for l in 0..4 {
                assert!(dec.get(j, l).iter().all(|&x| x == 0.0));
            }
        }
    }
    // zeroing one sense of one word removes exactly its contribution
    let dec = v.logit_decomposition(&toks, 4).unwrap();
    let edited = v.with_sense_scaled(toks[2], 1, 0.0).unwrap();
    let new = edited.logits(&toks, None).unwrap();
    for ((n, o), c) in new.row(4).iter().zip(logits.row(4)).zip(dec.get(2, 1)) {
        assert!((n - (o - c)).abs() <= 1e-9);
    }
    assert!(v.logit_decomposition(&toks, 5).is_err());
}

#[test]
fn tied_embeddings_share_storage() {
    let mut m = spread(small(4), 12);
    let before = m.view().logits(&[1, 2], None).unwrap();
    let o = m.view().representations(&[1, 2], None).unwrap();
    m.embeddings_mut().row_mut(9).fill(0.0);
    let after = m.view().logits(&[1, 2], None).unwrap();
    // the output logit for word 9 now vanishes
    assert_eq!(after.row(1)[9], 0.0);
    assert_ne!(before.row(1)[9], 0.0);
    // and words 1, 2 are unaffected as inputs, so other logits are unchanged
    let o2 = m.view().representations(&[1, 2], None).unwrap();
    assert_eq!(o, o2);
    // changing the input row of word 2 changes the representation too
    m.embeddings_mut().row_mut(2)[0] += 1.0;
    assert_ne!(m.view().representations(&[1, 2], None).unwrap(), o);
}

#[test]
fn generation_is_deterministic() {
    let m = spread(small(4), 13);
    let v = m.view();
    let a = v.generate(&[1, 2], 12, 7, None).unwrap();
    let b = v.generate(&[1, 2], 12, 7, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 14);
    assert_eq!(v.generate(&[1, 2], 0, 7, None).unwrap(), vec![1, 2]);
    let mut hook = |seq: &[usize], start: usize| Ok(DeltaSchedule::ones(4, seq.len() - start));
    let c = v.generate(&[1, 2], 12, 7, Some(&mut hook)).unwrap();
    assert_eq!(a, c);
    assert!(v.generate(&[], 3, 7, None).is_err());
    assert!(v.generate(&[1; 9], 3, 7, None).is_err());
}

#[test]
fn transformer_kind_uses_hidden_state_head() {
    let cfg = small(4).with_kind(ModelKind::Transformer);
    let m = BackpackModel::new(cfg, 14).unwrap();
    assert!(m.param("context.qk.w").is_none());
    assert!(m.sense_vectors(1).is_err());
    let v = m.view();
    let h = v.representations(&[1, 2, 3], None).unwrap();
    let logits = v.logits(&[1, 2, 3], None).unwrap();
    assert_eq!(logits, matmul_nt(&h, m.embeddings()).unwrap());
}

#[test]
fn clean_sense_network_has_no_second_norm() {
    let mut cfg = small(4);
    cfg.faithful_sense_ff = false;
    let m = BackpackModel::new(cfg, 15).unwrap();
    assert!(m.param("sense.ln2.g").is_none());
    assert!(m.param("sense.ln1.g").is_some());
    assert_eq!(m.sense_vectors(0).unwrap().shape(), &[4, 16]);
}

#[test]
fn batch_gradients_do_not_depend_on_execution() {
    let m = spread(small(4), 16);
    let xs = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![0, 0, 1, 1]];
    let ys = vec![vec![2, 3, 4, 5], vec![6, 7, 8, 9], vec![0, 1, 1, 2]];
    let (l1, g1) = m.loss_and_grads(&xs, &ys, Execution::Sequential).unwrap();
    let (l2, g2) = m.loss_and_grads(&xs, &ys, Execution::Parallel).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
    let direct: f64 = xs.iter().zip(&ys).map(|(x, y)| m.loss(x, y).unwrap()).sum::<f64>() / 3.0;
    assert!((direct - l1).abs() <= 1e-12);
}

#[test]
fn full_model_gradient_check() {
    let cfg = BackpackConfig::new(20, 16, 4, 2, 2, 4);
    let m = spread(cfg, 17);
    let tensors: Vec<Tensor> = m.params().iter().map(|p| (*p.value).clone()).collect();
    let err = grad_check_many(
        |g, vars| {
            let f = forward::forward(g, &m, vars, &[3, 17, 3, 8], &SenseEdits::new(), None)?;
            g.cross_entropy(f.logits, &[17, 3, 8, 0])
        },
        &tensors,
        1e-5,
        Execution::default(),
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}
