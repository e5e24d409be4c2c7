use std::collections::HashMap;

use crate::error::{Error, Result};

pub const UNK: usize = 0;
pub const BOS: usize = 1;
const SPECIALS: [&str; 2] = ["<unk>", "<bos>"];

/// How text is split into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tokenizer {
    /// Runs of letters/digits (with inner apostrophes) and single punctuation
    /// marks; whitespace separates tokens and is not kept.
    Word { lowercase: bool },
    /// One token per UTF-8 byte.
    Byte,
}

impl Tokenizer {
    pub fn name(self) -> &'static str {
        match self {
            Tokenizer::Word { lowercase: false } => "word",
            Tokenizer::Word { lowercase: true } => "word-lower",
            Tokenizer::Byte => "byte",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Tokenizer::Word { lowercase: false }),
            "word-lower" => Ok(Tokenizer::Word { lowercase: true }),
            "byte" => Ok(Tokenizer::Byte),
            other => Err(Error::invalid(format!(
                "unknown tokenizer `{other}` (expected word, word-lower or byte)"
            ))),
        }
    }

    /// Splits `text` into token strings. Byte tokens are rendered by
    /// [`byte_token`].
    pub fn split(self, text: &str) -> Vec<String> {
        match self {
            Tokenizer::Byte => text.bytes().map(byte_token).collect(),
            Tokenizer::Word { lowercase } => {
                let text = if lowercase { text.to_lowercase() } else { text.to_string() };
                split_words(&text)
            }
        }
    }
}

/// Printable ASCII bytes stand for themselves; anything else is `<0xNN>`.
pub fn byte_token(b: u8) -> String {
    if b.is_ascii_graphic() {
        (b as char).to_string()
    } else {
        format!("<0x{b:02X}>")
    }
}

fn parse_byte_token(tok: &str) -> Option<u8> {
    if let Some(hex) = tok.strip_prefix("<0x").and_then(|t| t.strip_suffix('>')) {
        return u8::from_str_radix(hex, 16).ok();
    }
    match tok.as_bytes() {
        [b] => Some(*b),
        _ => None,
    }
}

fn split_words(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let inner_apostrophe = c == '\''
            && !cur.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if c.is_alphanumeric() || inner_apostrophe {
            cur.push(c);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn attaches_left(tok: &str) -> bool {
    matches!(tok, "." | "," | ";" | ":" | "!" | "?" | ")" | "]" | "}")
}

fn attaches_right(tok: &str) -> bool {
    matches!(tok, "(" | "[" | "{")
}

/// Token ↔ id map. Ids 0 and 1 are `<unk>` and `<bos>`; the rest follow
/// corpus frequency (descending, ties broken lexicographically).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokenizer: Tokenizer,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts tokens in `corpus`, keeps those seen at least `min_freq` times,
    /// and truncates to `max_size` entries including the two specials.
    pub fn build(corpus: &str, tokenizer: Tokenizer, min_freq: usize, max_size: Option<usize>) -> Result<Self> {
        let toks = tokenizer.split(corpus);
        if toks.is_empty() {
            return Err(Error::Data("corpus contains no tokens".into()));
        }
        if max_size.is_some_and(|m| m <= SPECIALS.len()) {
            return Err(Error::invalid(format!(
                "max vocabulary size must exceed the {} special tokens",
                SPECIALS.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in toks {
            *counts.entry(t).or_default() += 1;
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !SPECIALS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(m) = max_size {
            ranked.truncate(m - SPECIALS.len());
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokenizer, tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list (specials first).
    pub fn from_tokens(tokenizer: Tokenizer, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data("vocabulary must start with <unk>, <bos>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(['\n', '\r']) {
                return Err(Error::Data(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokenizer,
            tokens,
            index,
        })
    }

    pub fn tokenizer(&self) -> Tokenizer {
        self.tokenizer
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Id of a single token string, if present. Applies lowercasing in
    /// `word-lower` mode.
    pub fn id(&self, token: &str) -> Option<usize> {
        match self.tokenizer {
            Tokenizer::Word { lowercase: true } => self.index.get(&token.to_lowercase()).copied(),
            _ => self.index.get(token).copied(),
        }
    }

    /// Encodes text; unknown tokens map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.tokenizer
            .split(text)
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(UNK))
            .collect()
    }

    /// Splits a single word into known pieces: in word mode the word itself
    /// (or nothing if unknown), in byte mode its bytes.
    pub fn pieces(&self, word: &str) -> Vec<usize> {
        match self.tokenizer {
            Tokenizer::Byte => self.encode(word),
            Tokenizer::Word { .. } => self.id(word).into_iter().collect(),
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        match self.tokenizer {
            Tokenizer::Byte => {
                let bytes: Vec<u8> = ids
                    .iter()
                    .filter_map(|&i| self.token(i).and_then(parse_byte_token))
                    .collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Tokenizer::Word { .. } => {
                let mut out = String::new();
                let mut glue = true;
                for &i in ids {
                    let tok = self.token(i).unwrap_or(SPECIALS[UNK]);
                    if !glue && !attaches_left(tok) {
                        out.push(' ');
                    }
                    out.push_str(tok);
                    glue = attaches_right(tok);
                }
                out
            }
        }
    }
}
