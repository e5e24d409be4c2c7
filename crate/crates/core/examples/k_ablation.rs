//! Trains the tiny preset with several sense counts and reports held-out
//! perplexity. Usage: `k_ablation [steps] [k...]`; `LR`, `VOCAB`, `BATCH`,
//! `EVAL` (held-out interval) and `TOKENIZER` (`byte`, the default, or `word`) adjust the run.

use std::time::Instant;

use backpack::model::BackpackConfig;
use backpack::training::{heldout_loss, split_heldout, train, TrainConfig, Tokenizer, Vocabulary};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().map(|s| s.parse()).transpose()?.unwrap_or(2500);
    let ks: Vec<usize> = if args.len() > 1 {
        args[1..].iter().map(|s| s.parse()).collect::<Result<_, _>>()?
    } else {
        vec![1, 4, 16]
    };
    let lr: f64 = std::env::var("LR").ok().map(|s| s.parse()).transpose()?.unwrap_or(3e-3);
    let vmax: usize = std::env::var("VOCAB").ok().map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let batch: usize = std::env::var("BATCH").ok().map(|s| s.parse()).transpose()?.unwrap_or(16);
    let every: usize = std::env::var("EVAL").ok().map(|s| s.parse()).transpose()?.unwrap_or(steps);
    let tokenizer = match std::env::var("TOKENIZER").as_deref() {
        Ok("word") => Tokenizer::Word { lowercase: true },
        _ => Tokenizer::Byte,
    };
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus/shakespeare.txt");
    let text = std::fs::read_to_string(path)?;
    let vocab = Vocabulary::build(&text, tokenizer, 1, Some(vmax))?;
    let ids = vocab.encode(&text);
    let (tr, ho) = split_heldout(&ids, 0.1)?;
    for k in ks {
        let mut model = BackpackConfig::tiny(vocab.len()).with_senses(k);
        model.sense_hidden = Some(model.model_dim);
        let mut cfg = TrainConfig::new(model);
        cfg.batch_tokens = batch * cfg.seq_len;
        cfg.total_steps = steps;
        cfg.warmup_steps = steps / 10;
        cfg.peak_lr = lr;
        cfg.eval_interval = every;
        cfg.eval_windows = Some(200);
        cfg.seed = 1;
        let t = Instant::now();
        let out = train(&cfg, tr, ho, |r| {
            if let Some(e) = r.eval_loss {
                eprintln!("k={k} step {} heldout_ppl {:.3}", r.step, e.exp());
            }
            if r.step % 50 == 0 {
                eprintln!("k={k} step {} loss {:.4} ({:.2}s)", r.step, r.train_loss, t.elapsed().as_secs_f64());
            }
        })?;
        let secs = t.elapsed().as_secs_f64();
        let full = heldout_loss(&out.model, ho, cfg.seq_len, None, cfg.exec)?;
        println!(
            "k={k} params={} steps={steps} time={secs:.1}s ({:.3}s/step) heldout_ppl={:.3}",
            out.model.num_parameters(),
            secs / steps as f64,
            full.exp()
        );
    }
    Ok(())
}
