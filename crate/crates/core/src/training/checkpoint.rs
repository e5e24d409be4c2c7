//! Binary checkpoints.
//!
//! Layout: `BKPK`, version byte `0x01`, then UTF-8 `key=value` header lines.
//! If a vocabulary is stored, a `[vocab]` line follows with one token per
//! line. A blank line ends the header. Tensor records follow until end of
//! file: `[u32 name length][name][u32 rank][u32 dim]*[dtype: 0=f64, 1=f32]`
//! `[little-endian data]`. Optimizer moments are stored as `adam.m.<param>`
//! and `adam.v.<param>` records after the parameters.

use std::collections::BTreeMap;
use std::path::Path;

use super::optim::OptimizerState;
use super::vocab::{Tokenizer, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{BackpackConfig, BackpackModel, ModelKind};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BKPK";
const VERSION: u8 = 1;
const VOCAB_MARKER: &str = "[vocab]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageDtype {
    F64,
    F32,
}

impl StorageDtype {
    fn byte(self) -> u8 {
        match self {
            StorageDtype::F64 => 0,
            StorageDtype::F32 => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: BackpackModel,
    pub vocab: Option<Vocabulary>,
    pub optimizer: Option<OptimizerState>,
    /// Seed of the batch stream; together with `step` it fixes the stream
    /// position for resuming.
    pub seed: u64,
    pub step: u64,
}

fn fail(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor, dtype: StorageDtype) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    out.push(dtype.byte());
    match dtype {
        StorageDtype::F64 => t.data().iter().for_each(|x| out.extend(x.to_le_bytes())),
        StorageDtype::F32 => t.data().iter().for_each(|x| out.extend((*x as f32).to_le_bytes())),
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(c: &Checkpoint, dtype: StorageDtype) -> Result<Vec<u8>> {
    let cfg = c.model.config();
    let mut header = BTreeMap::new();
    header.insert("kind", cfg.kind.name().to_string());
    header.insert("vocab_size", cfg.vocab_size.to_string());
    header.insert("model_dim", cfg.model_dim.to_string());
    header.insert("num_senses", cfg.num_senses.to_string());
    header.insert("layers", cfg.layers.to_string());
    header.insert("heads", cfg.heads.to_string());
    header.insert("seq_len", cfg.seq_len.to_string());
    header.insert("ff_mult", cfg.ff_mult.to_string());
    header.insert(
        "sense_hidden",
        cfg.sense_hidden.map_or_else(|| "default".to_string(), |h| h.to_string()),
    );
    header.insert("faithful_sense_ff", cfg.faithful_sense_ff.to_string());
    header.insert("step", c.step.to_string());
    header.insert("seed", c.seed.to_string());
    if let Some(opt) = &c.optimizer {
        header.insert("optimizer_step", opt.step.to_string());
    }
    if let Some(v) = &c.vocab {
        if v.len() != cfg.vocab_size {
            return Err(fail(format!(
                "vocabulary has {} tokens but the model expects {}",
                v.len(),
                cfg.vocab_size
            )));
        }
        header.insert("tokenizer", v.tokenizer().name().to_string());
    }

    let mut out = Vec::new();
    out.extend(MAGIC);
    out.push(VERSION);
    for (k, v) in &header {
        out.extend(format!("{k}={v}\n").as_bytes());
    }
    if let Some(v) = &c.vocab {
        out.extend(format!("{VOCAB_MARKER}\n").as_bytes());
        for t in v.tokens() {
            out.extend(t.as_bytes());
            out.push(b'\n');
        }
    }
    out.push(b'\n');
    for p in c.model.params() {
        write_record(&mut out, &p.name, &p.value, dtype);
    }
    if let Some(opt) = &c.optimizer {
        for (which, set) in [("m", &opt.m), ("v", &opt.v)] {
            for (p, t) in c.model.params().iter().zip(set) {
                write_record(&mut out, &format!("adam.{which}.{}", p.name), t, dtype);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(fail(format!("truncated file while reading {what}")));
        }
        self.pos += n;
        Ok(&self.buf[self.pos - n..self.pos])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail("truncated header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| fail("header is not UTF-8"))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32("record name length")?;
        let name = std::str::from_utf8(self.take(len, "record name")?)
            .map_err(|_| fail("record name is not UTF-8"))?
            .to_string();
        let rank = self.u32("rank")?;
        if rank > 8 {
            return Err(fail(format!("record `{name}` has implausible rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| self.u32("dimension")).collect::<Result<_>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| fail(format!("record `{name}` shape overflows")))?;
        let dtype = self.take(1, "dtype")?[0];
        let data: Vec<f64> = match dtype {
            0 => self
                .take(count.checked_mul(8).ok_or_else(|| fail("record too large"))?, "tensor data")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            1 => self
                .take(count.checked_mul(4).ok_or_else(|| fail("record too large"))?, "tensor data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => return Err(fail(format!("record `{name}` has unknown dtype {other}"))),
        };
        Ok((name, Tensor::new(shape, data)?))
    }
}

fn parse<T: std::str::FromStr>(header: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = header.get(key).ok_or_else(|| fail(format!("header is missing `{key}`")))?;
    raw.parse()
        .map_err(|_| fail(format!("header value `{key}={raw}` is malformed")))
}

/// Parses checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 5 {
        return Err(fail("file too short for a checkpoint"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic: not a backpack checkpoint"));
    }
    if bytes[4] != VERSION {
        return Err(fail(format!(
            "unsupported checkpoint version {} (this build reads version {VERSION})",
            bytes[4]
        )));
    }
    let mut r = Reader { buf: bytes, pos: 5 };
    let mut header = BTreeMap::new();
    let mut vocab_tokens = None;
    loop {
        let line = r.line()?;
        if line.is_empty() {
            break;
        }
        if line == VOCAB_MARKER {
            let n: usize = parse(&header, "vocab_size")?;
            let toks = (0..n).map(|_| r.line().map(str::to_string)).collect::<Result<Vec<_>>>()?;
            vocab_tokens = Some(toks);
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fail(format!("malformed header line `{line}`")))?;
        header.insert(k.to_string(), v.to_string());
    }

    let kind = ModelKind::parse(&parse::<String>(&header, "kind")?)?;
    let sense_hidden = match parse::<String>(&header, "sense_hidden")?.as_str() {
        "default" => None,
        h => Some(h.parse().map_err(|_| fail(format!("malformed sense_hidden `{h}`")))?),
    };
    let config = BackpackConfig {
        kind,
        vocab_size: parse(&header, "vocab_size")?,
        model_dim: parse(&header, "model_dim")?,
        num_senses: parse(&header, "num_senses")?,
        layers: parse(&header, "layers")?,
        heads: parse(&header, "heads")?,
        seq_len: parse(&header, "seq_len")?,
        ff_mult: parse(&header, "ff_mult")?,
        sense_hidden,
        faithful_sense_ff: parse(&header, "faithful_sense_ff")?,
    };
    config.validate().map_err(|e| fail(format!("stored config is invalid: {e}")))?;

    let mut records = Vec::new();
    while r.pos < bytes.len() {
        records.push(r.record()?);
    }
    let skeleton = BackpackModel::new(config.clone(), 0)?;
    let n = skeleton.params().len();
    if records.len() < n {
        return Err(fail(format!("expected {n} parameter records, found {}", records.len())));
    }
    let rest = records.split_off(n);
    let model = BackpackModel::from_tensors(config, records).map_err(|e| fail(e.to_string()))?;

    let optimizer = match header.get("optimizer_step") {
        None if rest.is_empty() => None,
        None => return Err(fail(format!("{} unexpected trailing records", rest.len()))),
        Some(_) => {
            if rest.len() != 2 * n {
                return Err(fail(format!("expected {} optimizer records, found {}", 2 * n, rest.len())));
            }
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for (i, (name, t)) in rest.into_iter().enumerate() {
                let (which, out) = if i < n { ("m", &mut m) } else { ("v", &mut v) };
                let p = &model.params()[i % n];
                if name != format!("adam.{which}.{}", p.name) || t.shape() != p.value.shape() {
                    return Err(fail(format!("optimizer record `{name}` does not match `{}`", p.name)));
                }
                out.push(t);
            }
            Some(OptimizerState {
                step: parse(&header, "optimizer_step")?,
                m,
                v,
            })
        }
    };

    let vocab = match vocab_tokens {
        None => None,
        Some(toks) => {
            let tokenizer = Tokenizer::parse(&parse::<String>(&header, "tokenizer")?)?;
            Some(Vocabulary::from_tokens(tokenizer, toks)?)
        }
    };
    Ok(Checkpoint {
        model,
        vocab,
        optimizer,
        seed: parse(&header, "seed")?,
        step: parse(&header, "step")?,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path, dtype: StorageDtype) -> Result<()> {
    let bytes = encode_checkpoint(c, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_opt: bool) -> Checkpoint {
        let vocab = Vocabulary::build("a b c d e f a b a", Tokenizer::Word { lowercase: true }, 1, None).unwrap();
        let cfg = BackpackConfig::new(vocab.len(), 8, 2, 1, 2, 6);
        let model = BackpackModel::new(cfg, 3).unwrap();
        let mut optimizer = with_opt.then(|| OptimizerState::new(&model));
        if let Some(o) = optimizer.as_mut() {
            o.step = 7;
            o.m[0].data_mut()[0] = 0.25;
        }
        Checkpoint {
            model,
            vocab: Some(vocab),
            optimizer,
            seed: 42,
            step: 7,
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = sample(true);
        let back = decode_checkpoint(&encode_checkpoint(&c, StorageDtype::F64).unwrap()).unwrap();
        assert_eq!(back.model.config(), c.model.config());
        for (a, b) in back.model.params().iter().zip(c.model.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.vocab, c.vocab);
        assert_eq!((back.seed, back.step), (42, 7));
        let toks = [2, 3, 4, 2];
        assert_eq!(
            back.model.lm_log_probs(&toks, None).unwrap(),
            c.model.lm_log_probs(&toks, None).unwrap()
        );
    }

    #[test]
    fn f32_storage_rounds_once() {
        let c = sample(false);
        let back = decode_checkpoint(&encode_checkpoint(&c, StorageDtype::F32).unwrap()).unwrap();
        assert!(back.optimizer.is_none());
        for (a, b) in back.model.params().iter().zip(c.model.params()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn structured_rejections() {
        let good = encode_checkpoint(&sample(true), StorageDtype::F64).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("version 2"));
        let truncated = &good[..good.len() - 3];
        assert!(decode_checkpoint(truncated).unwrap_err().to_string().contains("truncated"));
        // header claims a different width than the stored tensors
        let at = good.windows(11).position(|w| w == b"model_dim=8").unwrap();
        let mut bad = good.clone();
        bad[at + 10] = b'4';
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("shape"));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bkpk");
        let c = sample(false);
        save_checkpoint(&c, &path, StorageDtype::F64).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model.embeddings(), c.model.embeddings());
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
