use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A block of equal-length windows; `targets[b][t] = next token after
/// `inputs[b][t]``.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// Endless stream of batches of non-overlapping windows. Window order is
/// reshuffled every epoch from `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct BatchStream {
    ids: Arc<[usize]>,
    seq_len: usize,
    per_batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    pub fn new(ids: impl Into<Arc<[usize]>>, seq_len: usize, batch_tokens: usize, seed: u64) -> Result<Self> {
        let ids = ids.into();
        if seq_len == 0 || batch_tokens == 0 || !batch_tokens.is_multiple_of(seq_len) {
            return Err(Error::invalid(format!(
                "batch_tokens {batch_tokens} must be a positive multiple of seq_len {seq_len}"
            )));
        }
        if ids.len() <= seq_len {
            return Err(Error::Data(format!(
                "corpus of {} tokens is shorter than one window of {} (+1 target)",
                ids.len(),
                seq_len
            )));
        }
        let mut s = BatchStream {
            ids,
            seq_len,
            per_batch: batch_tokens / seq_len,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.shuffle();
        Ok(s)
    }

    /// Number of distinct windows per epoch.
    pub fn windows(&self) -> usize {
        (self.ids.len() - 1) / self.seq_len
    }

    pub fn windows_per_batch(&self) -> usize {
        self.per_batch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order = (0..self.windows()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn next_window(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut inputs = Vec::with_capacity(self.per_batch);
        let mut targets = Vec::with_capacity(self.per_batch);
        for _ in 0..self.per_batch {
            let start = self.next_window() * self.seq_len;
            inputs.push(self.ids[start..start + self.seq_len].to_vec());
            targets.push(self.ids[start + 1..start + self.seq_len + 1].to_vec());
        }
        Batch { inputs, targets }
    }

    /// Skips `n` batches (used when resuming).
    pub fn skip_batches(&mut self, n: usize) {
        for _ in 0..n * self.per_batch {
            self.next_window();
        }
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}
