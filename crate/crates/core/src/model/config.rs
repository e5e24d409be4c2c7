use crate::error::{Error, Result};

/// Which head sits on top of the contextualization Transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Sense vectors combined by per-sense key-query weights, tied log-linear head.
    Backpack,
    /// Plain Transformer LM (`logits = h Eᵀ`), used as a baseline.
    Transformer,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Backpack => "backpack",
            ModelKind::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "backpack" => Ok(ModelKind::Backpack),
            "transformer" => Ok(ModelKind::Transformer),
            other => Err(Error::invalid(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BackpackConfig {
    pub kind: ModelKind,
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_senses: usize,
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub ff_mult: usize,
    /// Hidden width of the final sense expansion (`d -> hidden -> k*d`).
    /// `None` means `ff_mult * d`.
    pub sense_hidden: Option<usize>,
    /// Reproduce the extra layer norm + residual in front of the final sense
    /// expansion.
    pub faithful_sense_ff: bool,
}

impl BackpackConfig {
    pub fn new(vocab_size: usize, model_dim: usize, num_senses: usize, layers: usize, heads: usize, seq_len: usize) -> Self {
        BackpackConfig {
            kind: ModelKind::Backpack,
            vocab_size,
            model_dim,
            num_senses,
            layers,
            heads,
            seq_len,
            ff_mult: 4,
            sense_hidden: None,
            faithful_sense_ff: true,
        }
    }

    /// d=64, k=4, L=2, 4 heads, 64-token context.
    pub fn tiny(vocab_size: usize) -> Self {
        Self::new(vocab_size, 64, 4, 2, 4, 64)
    }

    /// d=128, k=16, L=4, 4 heads, 128-token context.
    pub fn micro_desk(vocab_size: usize) -> Self {
        Self::new(vocab_size, 128, 16, 4, 4, 128)
    }

    /// Micro: 384 dims, 6 layers, 6 heads.
    pub fn micro() -> Self {
        Self::new(50257, 384, 16, 6, 6, 512)
    }

    /// Mini: 640 dims, 8 layers, 8 heads.
    pub fn mini() -> Self {
        Self::new(50257, 640, 16, 8, 8, 512)
    }

    /// Small: 768 dims, 12 layers, 12 heads.
    pub fn small() -> Self {
        Self::new(50257, 768, 16, 12, 12, 512)
    }

    pub const PRESETS: [&'static str; 5] = ["tiny", "micro-desk", "micro", "mini", "small"];

    /// Looks up a named preset. Desk presets take the vocabulary size from
    /// the caller; `micro`, `mini` and `small` use the 50257-entry GPT-2 vocabulary.
    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(vocab_size)),
            "micro-desk" => Ok(Self::micro_desk(vocab_size)),
            "micro" => Ok(Self::micro()),
            "mini" => Ok(Self::mini()),
            "small" => Ok(Self::small()),
            other => Err(Error::invalid(format!(
                "unknown preset `{other}` (expected one of {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn with_kind(mut self, kind: ModelKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_senses(mut self, k: usize) -> Self {
        self.num_senses = k;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Width of each per-sense key/query projection, `d / k`.
    pub fn sense_key_dim(&self) -> usize {
        self.model_dim / self.num_senses
    }

    pub fn ff_dim(&self) -> usize {
        self.ff_mult * self.model_dim
    }

    pub fn sense_hidden_dim(&self) -> usize {
        self.sense_hidden.unwrap_or_else(|| self.ff_dim())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(msg));
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.model_dim == 0 || self.seq_len == 0 || self.ff_mult == 0 {
            return fail("model_dim, seq_len and ff_mult must be positive".into());
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return fail(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.kind == ModelKind::Backpack {
            if self.num_senses == 0 {
                return fail("num_senses must be at least 1".into());
            }
            if !self.model_dim.is_multiple_of(self.num_senses) {
                return fail(format!(
                    "model_dim {} not divisible by num_senses {}",
                    self.model_dim, self.num_senses
                ));
            }
            if self.sense_hidden == Some(0) {
                return fail("sense_hidden must be positive".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_presets() {
        let shapes: Vec<_> = [BackpackConfig::micro(), BackpackConfig::mini(), BackpackConfig::small()]
            .iter()
            .map(|c| (c.model_dim, c.layers, c.heads, c.num_senses, c.vocab_size))
            .collect();
        assert_eq!(
            shapes,
            vec![(384, 6, 6, 16, 50257), (640, 8, 8, 16, 50257), (768, 12, 12, 16, 50257)]
        );
        for name in BackpackConfig::PRESETS {
            BackpackConfig::preset(name, 100).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn validation() {
        assert!(BackpackConfig::tiny(10).with_senses(3).validate().is_err());
        assert!(BackpackConfig::tiny(10).with_senses(0).validate().is_err());
        let mut c = BackpackConfig::tiny(10);
        c.heads = 5;
        assert!(c.validate().is_err());
        // k is irrelevant to a Transformer baseline
        let t = BackpackConfig::tiny(10).with_senses(3).with_kind(ModelKind::Transformer);
        assert!(t.validate().is_ok());
        assert!(BackpackConfig::preset("huge", 10).is_err());
    }
}
