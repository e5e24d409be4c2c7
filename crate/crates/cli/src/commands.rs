use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use backpack::control::{
    assign_deltas, find_bias_sense, knowledge_edit, nullspace_debias_baseline, optimize_sense_scale,
    sense_projection_bottomk, sense_projection_topk, topic_csv_row, topic_generate_with, topic_scores, BagOfWords,
    BiasEvalSuite, ControlStrength, EditMode, EditSpec, InitialDeltas, Normalizer, PromptSet, TOPIC_CSV_HEADER,
};
use backpack::evaluation::{
    evaluate_wordsim, perplexity, report_row, OovPolicy, SimilarityMethod, SimilarityVariant, WordPairDataset,
    REPORT_HEADER,
};
use backpack::model::{BackpackConfig, BackpackModel, ModelKind, ModelView};
use backpack::par::Execution;
use backpack::training::{
    heldout_loss, load_checkpoint, save_checkpoint, split_heldout, write_loss_csv, Checkpoint, StorageDtype,
    TrainConfig, Tokenizer, Trainer, Vocabulary,
};
use backpack::verify;

use crate::config::{RunConfig, UsageError};
use crate::CliError;

type Res<T = ()> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(UsageError(msg.into()))
}

fn data(msg: impl Into<String>) -> CliError {
    CliError::Core(backpack::Error::Data(msg.into()))
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn create(cfg: &RunConfig) -> Res<Self> {
        let dir = cfg.path("out")?;
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let out = Output { dir };
        out.write("resolved_config.txt", &cfg.resolved())?;
        Ok(out)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Res {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }
}

fn exec(cfg: &RunConfig) -> Res<Execution> {
    match cfg.require("exec")? {
        "parallel" => Ok(Execution::Parallel),
        "sequential" => Ok(Execution::Sequential),
        other => Err(usage(format!("--exec: expected parallel or sequential, got `{other}`"))),
    }
}

fn read_text(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

struct Loaded {
    model: BackpackModel,
    vocab: Vocabulary,
}

fn load(cfg: &RunConfig) -> Res<Loaded> {
    load_path(&cfg.path("checkpoint")?)
}

fn load_path(path: &Path) -> Res<Loaded> {
    let ckpt = load_checkpoint(path)?;
    let vocab = ckpt
        .vocab
        .ok_or_else(|| data(format!("{} carries no vocabulary", path.display())))?;
    Ok(Loaded {
        model: ckpt.model,
        vocab,
    })
}

fn word_id(vocab: &Vocabulary, word: &str) -> Res<usize> {
    vocab
        .id(word)
        .ok_or_else(|| data(format!("`{word}` is not in the vocabulary")))
}

/// Encodes a prompt, keeping at most the model's context length of tokens.
fn encode_prompt(vocab: &Vocabulary, model: &BackpackModel, text: &str) -> Res<Vec<usize>> {
    let ids = vocab.encode(text);
    if ids.is_empty() {
        return Err(usage("prompt encodes to no tokens"));
    }
    let cap = model.config().seq_len;
    Ok(ids[ids.len().saturating_sub(cap)..].to_vec())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn dispatch(cfg: &RunConfig) -> Res {
    match cfg.command.as_str() {
        "train" => train(cfg),
        "eval" => eval(cfg),
        "wordsim" => wordsim(cfg),
        "senses" => senses(cfg),
        "generate" => generate(cfg),
        "topic" => topic(cfg),
        "debias" => debias(cfg),
        "edit" => edit(cfg),
        "verify" => verify_cmd(cfg),
        other => Err(usage(format!("unknown command `{other}`"))),
    }
}

fn train(cfg: &RunConfig) -> Res {
    let ex = exec(cfg)?;
    let text = read_text(&cfg.path("corpus")?)?;
    let resumed = match cfg.text("resume") {
        Some(p) => Some(load_checkpoint(Path::new(p))?),
        None => None,
    };
    let (vocab, model_cfg) = match &resumed {
        Some(c) => (
            c.vocab.clone().ok_or_else(|| data("resume checkpoint carries no vocabulary"))?,
            c.model.config().clone(),
        ),
        None => {
            let tokenizer = Tokenizer::parse(cfg.require("tokenizer")?)?;
            let vocab = Vocabulary::build(&text, tokenizer, cfg.count("min-freq")?, cfg.int("vocab-size")?)?;
            let mut m = BackpackConfig::preset(cfg.require("preset")?, vocab.len())?
                .with_kind(ModelKind::parse(cfg.require("kind")?)?);
            m.vocab_size = vocab.len();
            if let Some(k) = cfg.int("senses")? {
                m = m.with_senses(k);
            }
            if let Some(h) = cfg.int("sense-hidden")? {
                m.sense_hidden = Some(h);
            }
            (vocab, m)
        }
    };
    let ids = vocab.encode(&text);
    let (tr, ho) = split_heldout(&ids, cfg.number("heldout")?)?;
    let mut tc = TrainConfig::new(model_cfg);
    tc.seq_len = cfg.int("seq-len")?.unwrap_or(tc.model.seq_len);
    tc.batch_tokens = cfg.count("batch")? * tc.seq_len;
    tc.total_steps = cfg.count("steps")?;
    tc.warmup_steps = cfg.count("warmup")?;
    tc.peak_lr = cfg.number("lr")?;
    tc.eval_interval = cfg.count("eval-interval")?;
    tc.eval_windows = cfg.int("eval-windows")?;
    tc.seed = cfg.seed();
    tc.exec = ex;
    let dtype = match cfg.require("dtype")? {
        "f64" => StorageDtype::F64,
        "f32" => StorageDtype::F32,
        other => return Err(usage(format!("--dtype: expected f64 or f32, got `{other}`"))),
    };
    let mut trainer = match resumed {
        Some(c) => Trainer::resume(tc.clone(), c, tr)?,
        None => Trainer::new(tc.clone(), tr)?,
    };
    let out = Output::create(cfg)?;
    log::info!(
        "training {} parameters on {} tokens (vocabulary {})",
        trainer.model().num_parameters(),
        tr.len(),
        vocab.len()
    );
    let mut log = Vec::new();
    while !trainer.is_done() {
        let mut rec = trainer.step()?;
        if rec.step % tc.eval_interval == 0 || rec.step == tc.total_steps {
            rec.eval_loss = Some(heldout_loss(trainer.model(), ho, tc.seq_len, tc.eval_windows, ex)?);
            log::info!("step {} train {:.4} held-out {:.4}", rec.step, rec.train_loss, rec.eval_loss.unwrap());
        }
        log.push(rec);
    }
    let ckpt: Checkpoint = trainer.checkpoint(Some(vocab));
    save_checkpoint(&ckpt, &out.path("model.ckpt"), dtype)?;
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &log).expect("write to memory");
    out.write("loss.csv", &String::from_utf8(csv).expect("ascii"))?;
    if let Some(l) = log.last().and_then(|r| r.eval_loss) {
        println!("step={} heldout_loss={l} heldout_ppl={}", trainer.step_count(), l.exp());
    }
    Ok(())
}

fn eval(cfg: &RunConfig) -> Res {
    let ex = exec(cfg)?;
    let Loaded { model, vocab } = load(cfg)?;
    let ids = vocab.encode(&read_text(&cfg.path("corpus")?)?);
    let fraction = cfg.number("heldout")?;
    let part = if fraction >= 1.0 { &ids[..] } else { split_heldout(&ids, fraction)?.1 };
    let out = Output::create(cfg)?;
    let ppl = perplexity(&model, part, ex)?;
    let row = format!("{},{},{ppl}", part.len(), ppl.ln());
    out.write("eval.csv", &format!("tokens,loss,perplexity\n{row}\n"))?;
    println!("tokens={} perplexity={ppl}", part.len());
    Ok(())
}

fn methods(spec: &str, k: usize, oov: OovPolicy) -> Res<Vec<SimilarityMethod>> {
    let mut variants = Vec::new();
    for m in spec.split(',').map(str::trim) {
        match m {
            "all" => {
                variants.extend((0..k).map(SimilarityVariant::Sense));
                variants.push(SimilarityVariant::MinOverSenses);
                variants.push(SimilarityVariant::Embedding);
            }
            "min" => variants.push(SimilarityVariant::MinOverSenses),
            "embedding" => variants.push(SimilarityVariant::Embedding),
            other => {
                let l = other
                    .strip_prefix("sense:")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| usage(format!("--method: unknown method `{other}`")))?;
                variants.push(SimilarityVariant::Sense(l));
            }
        }
    }
    Ok(variants.into_iter().map(|variant| SimilarityMethod { variant, oov }).collect())
}

fn wordsim(cfg: &RunConfig) -> Res {
    let ex = exec(cfg)?;
    let Loaded { model, vocab } = load(cfg)?;
    let oov = OovPolicy::parse(cfg.require("oov")?)?;
    let methods = methods(cfg.require("method")?, model.config().num_senses, oov)?;
    let datasets = cfg
        .require("dataset")?
        .split(',')
        .map(|p| WordPairDataset::load(Path::new(p.trim())))
        .collect::<backpack::Result<Vec<_>>>()?;
    let out = Output::create(cfg)?;
    let view = model.view();
    let mut csv = format!("{REPORT_HEADER}\n");
    for ds in &datasets {
        for &m in &methods {
            let r = evaluate_wordsim(&view, &vocab, ds, m, ex)?;
            csv.push_str(&report_row(&ds.name, m, &r));
            csv.push('\n');
        }
    }
    out.write("wordsim.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn senses(cfg: &RunConfig) -> Res {
    let Loaded { model, vocab } = load(cfg)?;
    let word = word_id(&vocab, cfg.require("word")?)?;
    let k = model.config().num_senses;
    let list: Vec<usize> = match cfg.int("sense")? {
        Some(l) => vec![l],
        None => (0..k).collect(),
    };
    let (top, bottom) = (cfg.count("top")?, cfg.count("bottom")?);
    let out = Output::create(cfg)?;
    let view = model.view();
    let mut csv = String::from("sense,direction,rank,word,score\n");
    for l in list {
        let mut rows = Vec::new();
        if top > 0 {
            rows.push(("top", sense_projection_topk(&view, word, l, top)?));
        }
        if bottom > 0 {
            rows.push(("bottom", sense_projection_bottomk(&view, word, l, bottom)?));
        }
        for (dir, entries) in rows {
            for (rank, (w, s)) in entries.iter().enumerate() {
                let tok = vocab.token(*w).unwrap_or("?");
                writeln!(csv, "{l},{dir},{},{},{s}", rank + 1, csv_field(tok)).expect("string write");
            }
        }
    }
    out.write("senses.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn generate(cfg: &RunConfig) -> Res {
    let Loaded { model, vocab } = load(cfg)?;
    let prompt = encode_prompt(&vocab, &model, cfg.require("prompt")?)?;
    let max_new = cfg.count("max-new")?;
    let out = Output::create(cfg)?;
    let view = model.view();
    let mut csv = String::from("sample_id,tokens\n");
    for i in 0..cfg.count("samples")? {
        let ids = view.generate(&prompt, max_new, cfg.seed() + i as u64, None)?;
        let text = vocab.decode(&ids);
        writeln!(csv, "{i},{}", csv_field(&text)).expect("string write");
        println!("{text}");
    }
    out.write("generate.csv", &csv)?;
    Ok(())
}

fn topic(cfg: &RunConfig) -> Res {
    let ex = exec(cfg)?;
    let Loaded { model, vocab } = load(cfg)?;
    let bag = match (cfg.text("topic"), cfg.text("words")) {
        (Some(t), None) => BagOfWords::topic(t, &vocab)?,
        (None, Some(w)) => {
            let words: Vec<&str> = w.split(',').map(str::trim).collect();
            BagOfWords::from_words("custom", &words, &vocab)?
        }
        _ => return Err(usage("topic needs exactly one of --topic and --words")),
    };
    let levels: Vec<u8> = match cfg.require("strength")? {
        "all" => vec![0, 1, 2, 3],
        s => vec![s.parse().map_err(|_| usage(format!("--strength: `{s}` is not 0-3 or all")))?],
    };
    let norm = Normalizer::parse(cfg.require("normalizer")?)?;
    let prompt = encode_prompt(&vocab, &model, cfg.require("prompt")?)?;
    let (samples, max_new) = (cfg.count("samples")?, cfg.count("max-new")?);
    let out = Output::create(cfg)?;
    let view = model.view();
    let c = model.config();
    let scores = if levels.iter().any(|&l| l > 0) {
        Some(topic_scores(&view, &bag, norm, ex)?)
    } else {
        None
    };
    let mut csv = format!("{TOPIC_CSV_HEADER}\n");
    let mut summary = String::from("strength,bag_fraction\n");
    for level in levels {
        let strength = ControlStrength::new(level)?;
        let deltas = match &scores {
            Some(s) if level > 0 => assign_deltas(s, strength)?,
            _ => InitialDeltas::uniform(c.vocab_size, c.num_senses, strength),
        };
        let (mut hits, mut total) = (0usize, 0usize);
        for i in 0..samples {
            let g = topic_generate_with(&view, deltas.clone(), &prompt, max_new, cfg.seed() + i as u64)?;
            let new = &g.tokens[prompt.len()..];
            hits += new.iter().filter(|&&t| bag.contains(t)).count();
            total += new.len();
            csv.push_str(&topic_csv_row(strength, i, &vocab.decode(&g.tokens)));
            csv.push('\n');
        }
        let frac = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
        writeln!(summary, "{level},{frac}").expect("string write");
    }
    out.write("topic.csv", &csv)?;
    out.write("topic_summary.csv", &summary)?;
    print!("{summary}");
    Ok(())
}

fn debias(cfg: &RunConfig) -> Res {
    let ex = exec(cfg)?;
    let Loaded { model, vocab } = load(cfg)?;
    let suite = BiasEvalSuite::default().encode(&vocab)?;
    let view = model.view();
    let sense = match (cfg.flag("auto"), cfg.int("sense")?) {
        (true, _) => {
            let found = find_bias_sense(&view, suite.he, suite.she, &suite.profession_ids())?;
            println!("bias_sense={}", found.sense);
            found.sense
        }
        (false, Some(l)) => l,
        (false, None) => return Err(usage("debias needs --auto or --sense")),
    };
    let out = Output::create(cfg)?;
    let n = suite.professions.len();
    let unmodified = suite.ratio(&view, PromptSet::Evaluation, ex)?;
    let removed = suite.scaled_ratio(&view, sense, &vec![0.0; n], PromptSet::Evaluation, ex)?;
    let mut factors = Vec::with_capacity(n);
    let mut fits = String::from("profession,factor,estimation_ratio,estimation_unmodified\n");
    for p in &suite.professions {
        let fit = optimize_sense_scale(&view, &p.estimation, p.id, sense, suite.he, suite.she, ex)?;
        writeln!(fits, "{},{},{},{}", csv_field(&p.name), fit.factor, fit.ratio, fit.unmodified).expect("string write");
        factors.push(fit.factor);
    }
    let optimized = suite.scaled_ratio(&view, sense, &factors, PromptSet::Evaluation, ex)?;
    let mut csv = format!(
        "configuration,ratio\nunmodified,{unmodified}\nremove_sense_{sense},{removed}\noptimize_sense_{sense},{optimized}\n"
    );
    if let Some(p) = cfg.text("baseline") {
        let base = load_path(Path::new(p))?;
        let bsuite = BiasEvalSuite::default().encode(&base.vocab)?;
        let fraction = cfg.number("fraction")?;
        let before = bsuite.ratio(&base.model, PromptSet::Evaluation, ex)?;
        let mut total = 0.0;
        let mut count = 0;
        for prof in &bsuite.professions {
            let projected = nullspace_debias_baseline(&base.model, prof.id, bsuite.he, bsuite.she, fraction)?;
            let r = backpack::control::bias_ratio(&projected, &prof.evaluation, bsuite.he, bsuite.she, ex)?;
            total += r * prof.evaluation.len() as f64;
            count += prof.evaluation.len();
        }
        writeln!(csv, "baseline_unmodified,{before}\nbaseline_nullspace,{}", total / count as f64).expect("string write");
    }
    out.write("bias.csv", &csv)?;
    out.write("factors.csv", &fits)?;
    print!("{csv}");
    Ok(())
}

fn edit(cfg: &RunConfig) -> Res {
    let Loaded { model, vocab } = load(cfg)?;
    let target_word = cfg.require("target")?;
    let spec = EditSpec {
        target: word_id(&vocab, target_word)?,
        removed: word_id(&vocab, cfg.require("remove")?)?,
        added: cfg.text("add").map(|w| word_id(&vocab, w)).transpose()?,
        mode: EditMode::parse(cfg.require("mode")?)?,
    };
    let prompt = encode_prompt(&vocab, &model, cfg.text("prompt").unwrap_or(target_word))?;
    let out = Output::create(cfg)?;
    let before = model.view();
    let after = knowledge_edit(&before, &spec)?;
    let last = |v: &ModelView<'_>| -> Res<Vec<f64>> {
        let lp = v.lm_log_probs(&prompt, None)?;
        Ok(lp.row(lp.rows() - 1).to_vec())
    };
    let (b, a) = (last(&before)?, last(&after)?);
    let mut csv = String::from("word,logprob_before,logprob_after\n");
    for w in [Some(spec.removed), spec.added].into_iter().flatten() {
        writeln!(csv, "{},{},{}", csv_field(vocab.token(w).unwrap_or("?")), b[w], a[w]).expect("string write");
    }
    out.write("edit.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn verify_cmd(cfg: &RunConfig) -> Res {
    let ex = exec(cfg)?;
    let out = Output::create(cfg)?;
    let reports = verify::run_all(ex);
    let mut csv = String::from("criterion,check,passed,detail\n");
    for r in &reports {
        println!("{}", r.line());
        log::info!("{} took {:.1}s", r.name, r.seconds);
        writeln!(csv, "{},{},{},{}", r.criterion, r.name, r.passed, csv_field(&r.detail)).expect("string write");
    }
    out.write("verify.csv", &csv)?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Core(backpack::Error::Numeric(format!("{failed} check(s) failed"))));
    }
    Ok(())
}
