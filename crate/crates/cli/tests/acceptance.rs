//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Criterion 5 trains three models and takes the bulk of the time;
//! `ACCEPTANCE_ABLATION_STEPS` overrides its step budget for quick local runs.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use backpack::evaluation::perplexity;
use backpack::model::BackpackConfig;
use backpack::par::Execution;
use backpack::training::{split_heldout, train, TrainConfig, Tokenizer, Vocabulary};
use backpack::verify::{self, CheckReport};

const ABLATION_STEPS: usize = 2500;
const ABLATION_KS: [usize; 3] = [1, 4, 16];

fn report(criterion: u8, name: &'static str, t: Instant, outcome: Result<(bool, String), String>) -> CheckReport {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckReport {
        criterion,
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Tiny preset on the bundled Shakespeare text at byte level, one run per
/// sense count with the same steps, seed, data order and hyperparameters.
fn k_ablation(exec: Execution) -> CheckReport {
    let t = Instant::now();
    let steps = std::env::var("ACCEPTANCE_ABLATION_STEPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(ABLATION_STEPS);
    let outcome = (|| -> Result<(bool, String), String> {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus/shakespeare.txt");
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        if text.chars().count() < 1_000_000 {
            return Ok((false, format!("corpus has only {} characters", text.chars().count())));
        }
        let vocab = Vocabulary::build(&text, Tokenizer::Byte, 1, None).map_err(|e| e.to_string())?;
        let ids = vocab.encode(&text);
        let (tr, ho) = split_heldout(&ids, 0.1).map_err(|e| e.to_string())?;
        let mut ppls = Vec::new();
        for k in ABLATION_KS {
            let mut model = BackpackConfig::tiny(vocab.len()).with_senses(k);
            model.sense_hidden = Some(model.model_dim);
            let mut cfg = TrainConfig::new(model);
            cfg.batch_tokens = 16 * cfg.seq_len;
            cfg.total_steps = steps;
            cfg.warmup_steps = steps / 10;
            cfg.peak_lr = 3e-3;
            cfg.eval_interval = steps;
            cfg.eval_windows = Some(50);
            cfg.seed = 1;
            cfg.exec = exec;
            let out = train(&cfg, tr, ho, |_| {}).map_err(|e| e.to_string())?;
            let ppl = perplexity(&out.model, ho, exec).map_err(|e| e.to_string())?;
            eprintln!("  k={k}: held-out perplexity {ppl:.3} after {:.0}s", t.elapsed().as_secs_f64());
            ppls.push(ppl);
        }
        let decreasing = ppls.windows(2).all(|w| w[0] > w[1]);
        let within = t.elapsed().as_secs_f64() <= 3600.0;
        let shown: Vec<String> = ABLATION_KS.iter().zip(&ppls).map(|(k, p)| format!("k={k} {p:.2}")).collect();
        Ok((
            decreasing && within,
            format!(
                "{} chars, |V| {}, {steps} steps each: {} (strictly decreasing: {decreasing}), {:.0}s",
                text.chars().count(),
                vocab.len(),
                shown.join(" > "),
                t.elapsed().as_secs_f64()
            ),
        ))
    })();
    report(5, "k-ablation trend", t, outcome)
}

fn verify_binary() -> CheckReport {
    let t = Instant::now();
    let outcome = (|| -> Result<(bool, String), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let o = Command::new(env!("CARGO_BIN_EXE_backpack"))
            .args(["verify", "--out"])
            .arg(dir.path())
            .output()
            .map_err(|e| e.to_string())?;
        let stdout = String::from_utf8_lossy(&o.stdout);
        let passes = stdout.lines().filter(|l| l.starts_with("PASS")).count();
        let criteria: Vec<&str> = stdout
            .lines()
            .filter_map(|l| l.split_once('[').and_then(|(_, r)| r.split_once(']')).map(|(n, _)| n))
            .collect();
        let code = o.status.code();
        Ok((
            code == Some(0) && passes == 7 && criteria == ["1", "2", "3", "4", "6", "7", "8"],
            format!("exit {code:?}, {passes}/7 checks passed, criteria {}", criteria.join(",")),
        ))
    })();
    report(11, "verify command", t, outcome)
}

fn main() -> ExitCode {
    // cargo passes harness flags such as --list; run the suite only for a
    // plain invocation or a test filter
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let exec = Execution::default();
    let mut reports = Vec::new();
    let mut show = |r: CheckReport| {
        println!("{}", r.line());
        reports.push(r);
    };
    show(verify::check_reductions(100, exec));
    show(verify::check_gradients(exec));
    show(verify::check_simplex(1000, exec));
    show(verify::check_interventions(200, exec));
    show(k_ablation(exec));
    show(verify::check_delta_schedule(exec));
    show(verify::check_annealing(10_000));
    show(verify::check_knowledge_edit(50));
    show(verify::check_bias_mechanics(50, exec));
    show(verify::check_evaluation_plumbing(exec));
    show(verify_binary());
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} of {} criteria passed", reports.len() - failed, reports.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
