use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn backpack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_backpack"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn corpus(dir: &Path) -> PathBuf {
    let mut text = String::new();
    for i in 0..60 {
        text.push_str(&format!(
            "the king spoke to the queen and he said she was wise . the lord {} came home .\n",
            ["of the hall", "at night", "to the king"][i % 3]
        ));
    }
    let p = dir.join("corpus.txt");
    fs::write(&p, text).unwrap();
    p
}

/// Trains a very small model and returns its output directory.
fn train(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let c = corpus(dir);
    let out = dir.join(name);
    let o = backpack(&[
        "train",
        "--corpus",
        c.to_str().unwrap(),
        "--preset",
        "tiny",
        "--steps",
        "4",
        "--warmup",
        "1",
        "--batch",
        "2",
        "--seq-len",
        "16",
        "--eval-interval",
        "2",
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&backpack(&[])), 0);
    assert_eq!(code(&backpack(&["--help"])), 0);
    assert_eq!(code(&backpack(&["train", "--help"])), 0);
    assert_eq!(code(&backpack(&["frobnicate"])), 1);
    let o = backpack(&["train"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--corpus"));
    assert_eq!(code(&backpack(&["train", "--corpus", "x", "--steps", "many"])), 1);
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = backpack(&["train", "--corpus", "/no/such/file.txt", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = backpack(&["eval", "--checkpoint", "/no/such.ckpt", "--corpus", "/no/such.txt"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let cfg = dir.path().join("run.cfg");
    let out = dir.path().join("o");
    fs::write(
        &cfg,
        format!(
            "# small run\ncorpus = {}\nsteps = 3\nwarmup = 1\nbatch = 2\nseq-len = 8\nseed = 4\nout = {}\n",
            c.display(),
            out.display()
        ),
    )
    .unwrap();
    let o = backpack(&["train", "--config", cfg.to_str().unwrap(), "--steps", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = fs::read_to_string(out.join("resolved_config.txt")).unwrap();
    assert!(resolved.starts_with("command=train\n"));
    assert!(resolved.contains("steps=2\n"));
    assert!(resolved.contains("seed=4\n"));
    assert_eq!(fs::read_to_string(out.join("loss.csv")).unwrap().lines().count(), 3);

    fs::write(&cfg, "bogus = 1\n").unwrap();
    assert_eq!(code(&backpack(&["train", "--config", cfg.to_str().unwrap()])), 1);
}

#[test]
fn training_is_deterministic_and_commands_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(dir.path(), "a", "3");
    let b = train(dir.path(), "b", "3");
    for f in ["loss.csv", "model.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let ckpt = a.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let c = dir.path().join("corpus.txt");
    let out = |n: &str| dir.path().join(n).to_str().unwrap().to_string();

    let o = backpack(&["eval", "--checkpoint", ckpt, "--corpus", c.to_str().unwrap(), "--out", &out("ev")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eval = fs::read_to_string(dir.path().join("ev/eval.csv")).unwrap();
    let ppl: f64 = eval.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);

    let o = backpack(&["senses", "--checkpoint", ckpt, "--word", "king", "--top", "5", "--out", &out("s")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let senses = fs::read_to_string(dir.path().join("s/senses.csv")).unwrap();
    // tiny preset has 4 senses, five rows each
    assert_eq!(senses.lines().count(), 1 + 4 * 5);

    let gen = |name: &str| {
        let o = backpack(&["generate", "--checkpoint", ckpt, "--prompt", "the king", "--max-new", "6", "--samples", "2", "--seed", "9", "--out", &out(name)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(dir.path().join(name).join("generate.csv")).unwrap()
    };
    assert_eq!(gen("g1"), gen("g2"));

    let o = backpack(&["topic", "--checkpoint", ckpt, "--prompt", "the", "--words", "king,queen", "--samples", "2", "--max-new", "4", "--out", &out("t")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("t/topic.csv")).unwrap().lines().count(), 1 + 4 * 2);

    let o = backpack(&["edit", "--checkpoint", ckpt, "--target", "king", "--remove", "queen", "--add", "lord", "--out", &out("e")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = backpack(&["edit", "--checkpoint", ckpt, "--target", "zebra", "--remove", "queen", "--out", &out("e2")]);
    assert_eq!(code(&o), 2);

    let ws = dir.path().join("pairs.tsv");
    fs::write(&ws, "word1\tword2\tscore\nking\tqueen\t8\nking\tlord\t6\nhome\tnight\t1\nwise\tsaid\t3\n").unwrap();
    let o = backpack(&["wordsim", "--checkpoint", ckpt, "--dataset", ws.to_str().unwrap(), "--method", "min,embedding", "--out", &out("w")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(dir.path().join("w/wordsim.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("dataset,method,rho,coverage"));
    assert_eq!(report.lines().count(), 3);
}

#[test]
fn resume_continues_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let run = |steps: &str, out: &str, resume: Option<&Path>| {
        let out = dir.path().join(out);
        let mut args: Vec<String> = ["train", "--steps", steps, "--warmup", "1", "--batch", "2", "--seq-len", "8"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        args.extend(["--corpus".into(), c.display().to_string(), "--out".into(), out.display().to_string()]);
        if let Some(p) = resume {
            args.extend(["--resume".into(), p.display().to_string()]);
        }
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = backpack(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let half = run("2", "half", None);
    let a = run("4", "a", Some(&half.join("model.ckpt")));
    let b = run("4", "b", Some(&half.join("model.ckpt")));
    let log = fs::read_to_string(a.join("loss.csv")).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["3", "4"]);
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
}

#[test]
fn verify_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let o = backpack(&["verify", "--out", out.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 7);
    assert!(out.join("verify.csv").exists());
}
