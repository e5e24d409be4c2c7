//! Option schema and resolution: built-in defaults, then a `key=value` file,
//! then command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Text,
    Int,
    Float,
    Bool,
}

#[derive(Debug, Clone)]
pub struct OptSpec {
    pub key: &'static str,
    pub kind: Kind,
    pub default: Option<&'static str>,
    pub required: bool,
    pub help: &'static str,
}

const fn opt(key: &'static str, kind: Kind, default: Option<&'static str>, help: &'static str) -> OptSpec {
    OptSpec {
        key,
        kind,
        default,
        required: false,
        help,
    }
}

const fn req(key: &'static str, kind: Kind, help: &'static str) -> OptSpec {
    OptSpec {
        key,
        kind,
        default: None,
        required: true,
        help,
    }
}

use Kind::{Bool, Float, Int, Text};

pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub opts: Vec<OptSpec>,
}

fn common() -> Vec<OptSpec> {
    vec![
        opt("seed", Int, Some("0"), "random seed"),
        opt("out", Text, Some("out"), "output directory"),
        opt("exec", Text, Some("parallel"), "parallel or sequential"),
    ]
}

/// Every subcommand with its options (the common ones included).
pub fn commands() -> Vec<CommandSpec> {
    let ckpt = || req("checkpoint", Text, "model checkpoint");
    let specs = vec![
        CommandSpec {
            name: "train",
            about: "Train a model on a text corpus",
            opts: vec![
                req("corpus", Text, "training text file"),
                opt("tokenizer", Text, Some("word-lower"), "word, word-lower or byte"),
                opt("min-freq", Int, Some("1"), "minimum token count"),
                opt("vocab-size", Int, Some("2000"), "maximum vocabulary size, specials included"),
                opt("preset", Text, Some("tiny"), "tiny, micro-desk, micro, mini or small"),
                opt("kind", Text, Some("backpack"), "backpack or transformer"),
                opt("senses", Int, None, "override the preset's sense count"),
                opt("sense-hidden", Int, None, "hidden width of the sense output layer"),
                opt("steps", Int, Some("1000"), "optimizer steps"),
                opt("warmup", Int, Some("100"), "linear warmup steps"),
                opt("lr", Float, Some("3e-4"), "peak learning rate"),
                opt("batch", Int, Some("16"), "windows per step"),
                opt("seq-len", Int, None, "training window length (default: preset context)"),
                opt("heldout", Float, Some("0.1"), "fraction of the corpus held out"),
                opt("eval-interval", Int, Some("100"), "steps between held-out evaluations"),
                opt("eval-windows", Int, Some("200"), "held-out windows per evaluation"),
                opt("dtype", Text, Some("f64"), "checkpoint storage: f64 or f32"),
                opt("resume", Text, None, "checkpoint to continue from"),
            ],
        },
        CommandSpec {
            name: "eval",
            about: "Held-out perplexity",
            opts: vec![
                ckpt(),
                req("corpus", Text, "text file"),
                opt("heldout", Float, Some("0.1"), "score the final fraction; 1 scores everything"),
            ],
        },
        CommandSpec {
            name: "wordsim",
            about: "Word similarity correlation from sense cosines",
            opts: vec![
                ckpt(),
                req("dataset", Text, "TSV word pairs; comma-separated for several"),
                opt("method", Text, Some("all"), "sense:N, min, embedding or all"),
                opt("oov", Text, Some("skip"), "average, first or skip"),
            ],
        },
        CommandSpec {
            name: "senses",
            about: "Vocabulary projections of a word's senses",
            opts: vec![
                ckpt(),
                req("word", Text, "word to inspect"),
                opt("sense", Int, None, "single sense (default: all)"),
                opt("top", Int, Some("5"), "highest-scored words per sense"),
                opt("bottom", Int, Some("0"), "lowest-scored words per sense"),
            ],
        },
        CommandSpec {
            name: "generate",
            about: "Ancestral sampling",
            opts: vec![
                ckpt(),
                req("prompt", Text, "prompt text"),
                opt("max-new", Int, Some("50"), "tokens to sample"),
                opt("samples", Int, Some("1"), "number of samples"),
            ],
        },
        CommandSpec {
            name: "topic",
            about: "Topic-controlled generation",
            opts: vec![
                ckpt(),
                req("prompt", Text, "prompt text"),
                opt("topic", Text, None, "bundled topic label"),
                opt("words", Text, None, "comma-separated bag of words"),
                opt("strength", Text, Some("all"), "0-3 or all"),
                opt("samples", Int, Some("10"), "samples per strength"),
                opt("max-new", Int, Some("50"), "tokens to sample"),
                opt("normalizer", Text, Some("absolute"), "absolute or literal"),
            ],
        },
        CommandSpec {
            name: "debias",
            about: "Gender-bias ratio before and after sense scaling",
            opts: vec![
                ckpt(),
                opt("auto", Bool, Some("false"), "discover the bias sense"),
                opt("sense", Int, None, "bias sense to scale"),
                opt("baseline", Text, None, "transformer checkpoint for the nullspace baseline"),
                opt("fraction", Float, Some("1"), "fraction of the bias direction removed by the baseline"),
            ],
        },
        CommandSpec {
            name: "edit",
            about: "Edit a word's senses away from one word and towards another",
            opts: vec![
                ckpt(),
                req("target", Text, "word whose senses are edited"),
                req("remove", Text, "word to move away from"),
                opt("add", Text, None, "word to move towards"),
                opt("mode", Text, Some("faithful"), "faithful or corrected"),
                opt("prompt", Text, None, "prompt to score before and after (default: the target word)"),
            ],
        },
        CommandSpec {
            name: "verify",
            about: "Run the reduction, gradient and intervention self-checks",
            opts: vec![],
        },
    ];
    specs
        .into_iter()
        .map(|mut c| {
            c.opts.extend(common());
            c
        })
        .collect()
}

/// A usage or parse failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn text(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, UsageError> {
        self.text(key).ok_or_else(|| UsageError(format!("missing --{key}")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, UsageError> {
        self.require(key).map(PathBuf::from)
    }

    pub fn int(&self, key: &str) -> Result<Option<usize>, UsageError> {
        self.text(key)
            .map(|s| s.parse().map_err(|_| UsageError(format!("--{key}: `{s}` is not a non-negative integer"))))
            .transpose()
    }

    pub fn float(&self, key: &str) -> Result<Option<f64>, UsageError> {
        self.text(key)
            .map(|s| s.parse().map_err(|_| UsageError(format!("--{key}: `{s}` is not a number"))))
            .transpose()
    }

    /// An integer option that has a default, so it is always present.
    pub fn count(&self, key: &str) -> Result<usize, UsageError> {
        self.int(key)?.ok_or_else(|| UsageError(format!("missing --{key}")))
    }

    pub fn number(&self, key: &str) -> Result<f64, UsageError> {
        self.float(key)?.ok_or_else(|| UsageError(format!("missing --{key}")))
    }

    pub fn flag(&self, key: &str) -> bool {
        self.text(key) == Some("true")
    }

    pub fn seed(&self) -> u64 {
        self.text("seed").and_then(|s| s.parse().ok()).unwrap_or(0)
    }

    /// `key=value` lines, sorted by key.
    pub fn resolved(&self) -> String {
        let mut s = format!("command={}\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }
}

/// Parses a flat `key=value` file. Blank lines and `#` comments are ignored.
pub fn parse_file(text: &str) -> Result<BTreeMap<String, String>, UsageError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected key=value", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(UsageError(format!("config line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(UsageError(format!("config line {}: `{k}` set twice", n + 1)));
        }
    }
    Ok(out)
}

pub fn cli() -> Command {
    let mut root = Command::new("backpack")
        .about("Train, evaluate and intervene on Backpack language models")
        .version(env!("CARGO_PKG_VERSION"));
    for spec in commands() {
        let mut sub = Command::new(spec.name).about(spec.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key=value file; flags override it"),
        );
        for o in &spec.opts {
            let mut help = o.help.to_string();
            if let Some(d) = o.default {
                help.push_str(&format!(" [default: {d}]"));
            }
            if o.required {
                help.push_str(" (required)");
            }
            let arg = Arg::new(o.key).long(o.key).help(help);
            sub = sub.arg(match o.kind {
                Bool => arg.action(ArgAction::SetTrue),
                _ => arg.value_name("VALUE"),
            });
        }
        root = root.subcommand(sub);
    }
    root
}

/// What the command line asked for.
pub enum Parsed {
    Run(RunConfig),
    /// Help or version text to print before exiting successfully.
    Info(String),
}

pub fn parse_config(argv: &[String]) -> Result<Parsed, UsageError> {
    let mut cmd = cli();
    if argv.len() <= 1 {
        return Ok(Parsed::Info(cmd.render_help().to_string()));
    }
    let m = match cmd.try_get_matches_from_mut(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(Parsed::Info(e.to_string())),
                _ => {
                    let msg = e.to_string();
                    Err(UsageError(msg.trim_start_matches("error: ").trim_end().to_string()))
                }
            };
        }
    };
    let Some((name, sub)) = m.subcommand() else {
        return Ok(Parsed::Info(cmd.render_help().to_string()));
    };
    let spec = commands().into_iter().find(|c| c.name == name).expect("known subcommand");
    let file = match sub.get_one::<String>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("config file {path}: {e}")))?;
            parse_file(&text)?
        }
        None => BTreeMap::new(),
    };
    resolve(&spec, file, sub).map(Parsed::Run)
}

fn from_flags(spec: &CommandSpec, m: &ArgMatches) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for o in &spec.opts {
        if m.value_source(o.key) != Some(ValueSource::CommandLine) {
            continue;
        }
        let v = match o.kind {
            Bool => "true".to_string(),
            _ => m.get_one::<String>(o.key).expect("value given").clone(),
        };
        out.insert(o.key.to_string(), v);
    }
    out
}

fn resolve(spec: &CommandSpec, file: BTreeMap<String, String>, m: &ArgMatches) -> Result<RunConfig, UsageError> {
    merge(spec, file, from_flags(spec, m))
}

/// defaults < file < flags; unknown file keys and missing required keys are
/// errors, and typed values must parse.
pub fn merge(
    spec: &CommandSpec,
    file: BTreeMap<String, String>,
    flags: BTreeMap<String, String>,
) -> Result<RunConfig, UsageError> {
    let mut values = BTreeMap::new();
    for o in &spec.opts {
        if let Some(d) = o.default {
            values.insert(o.key.to_string(), d.to_string());
        }
    }
    for (k, v) in file.into_iter().chain(flags) {
        if !spec.opts.iter().any(|o| o.key == k) {
            return Err(UsageError(format!("unknown option `{k}` for `{}`", spec.name)));
        }
        values.insert(k, v);
    }
    for o in &spec.opts {
        let v = values.get(o.key);
        if o.required && v.is_none() {
            return Err(UsageError(format!("`{}` needs --{}", spec.name, o.key)));
        }
        let Some(v) = v else { continue };
        let ok = match o.kind {
            Text => true,
            Int => v.parse::<u64>().is_ok(),
            Float => v.parse::<f64>().map(f64::is_finite).unwrap_or(false),
            Bool => v == "true" || v == "false",
        };
        if !ok {
            return Err(UsageError(format!("--{}: invalid value `{v}`", o.key)));
        }
    }
    Ok(RunConfig {
        command: spec.name.to_string(),
        values,
    })
}
