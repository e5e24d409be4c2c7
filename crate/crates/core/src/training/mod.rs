//! Corpus handling, optimization and checkpoints.

mod batch;
mod checkpoint;
mod optim;
mod vocab;

use std::io::Write;

pub use batch::{Batch, BatchStream};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, StorageDtype,
};
pub use optim::{adamw_step, adamw_update, clip_global_norm, lr_schedule, AdamWConfig, OptimizerState};
pub use vocab::{byte_token, Tokenizer, Vocabulary, BOS, UNK};

use crate::error::{Error, Result};
use crate::model::{BackpackConfig, BackpackModel, LanguageModel};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: BackpackConfig,
    /// Tokens per optimizer step; a multiple of `seq_len`.
    pub batch_tokens: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub adamw: AdamWConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Seeds both parameter init and batch order.
    pub seed: u64,
    /// Training window length; at most `model.seq_len`.
    pub seq_len: usize,
    /// Held-out loss is measured every this many steps (and at the end).
    pub eval_interval: usize,
    /// Cap on held-out windows per measurement.
    pub eval_windows: Option<usize>,
    pub exec: Execution,
}

impl TrainConfig {
    pub fn new(model: BackpackConfig) -> Self {
        let seq_len = model.seq_len;
        TrainConfig {
            model,
            batch_tokens: 16 * seq_len,
            total_steps: 1000,
            warmup_steps: 100,
            peak_lr: 3e-4,
            adamw: AdamWConfig::default(),
            grad_clip: Some(1.0),
            seed: 0,
            seq_len,
            eval_interval: 100,
            eval_windows: None,
            exec: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.seq_len == 0 || self.seq_len > self.model.seq_len {
            return Err(Error::invalid(format!(
                "seq_len {} must be in 1..={}",
                self.seq_len, self.model.seq_len
            )));
        }
        if self.batch_tokens == 0 || !self.batch_tokens.is_multiple_of(self.seq_len) {
            return Err(Error::invalid(format!(
                "batch_tokens {} must be a positive multiple of seq_len {}",
                self.batch_tokens, self.seq_len
            )));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::invalid(format!("peak_lr {} must be non-negative", self.peak_lr)));
        }
        if self.eval_interval == 0 {
            return Err(Error::invalid("eval_interval must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        lr_schedule(step, self.warmup_steps, self.total_steps, self.peak_lr)
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,lr,train_loss,eval_loss";

    pub fn csv_row(&self) -> String {
        let eval = self.eval_loss.map(|e| e.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.step, self.lr, self.train_loss, eval)
    }
}

pub fn write_loss_csv(mut w: impl Write, log: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "{}", LossRecord::CSV_HEADER)?;
    for r in log {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Mean next-token loss over consecutive non-overlapping windows of `ids`.
/// Every window predicts `seq_len` tokens, so the mean is per token.
pub fn heldout_loss<M: LanguageModel>(
    model: &M,
    ids: &[usize],
    seq_len: usize,
    max_windows: Option<usize>,
    exec: Execution,
) -> Result<f64> {
    if seq_len == 0 || ids.len() <= seq_len {
        return Err(Error::Data(format!(
            "held-out set of {} tokens is shorter than one window of {seq_len}",
            ids.len()
        )));
    }
    let mut starts: Vec<usize> = (0..(ids.len() - 1) / seq_len).map(|w| w * seq_len).collect();
    if let Some(m) = max_windows {
        starts.truncate(m.max(1));
    }
    let losses = par::try_map(exec, &starts, |&s| -> Result<f64> {
        let lp = model.log_probs(&ids[s..s + seq_len])?;
        Ok(-(0..seq_len).map(|t| lp.row(t)[ids[s + t + 1]]).sum::<f64>())
    })?;
    Ok(losses.iter().sum::<f64>() / (starts.len() * seq_len) as f64)
}

/// Owns the model, optimizer state and batch stream of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    model: BackpackModel,
    optimizer: OptimizerState,
    stream: BatchStream,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, train_ids: &[usize]) -> Result<Self> {
        cfg.validate()?;
        let model = BackpackModel::new(cfg.model.clone(), cfg.seed)?;
        let optimizer = OptimizerState::new(&model);
        let stream = BatchStream::new(train_ids.to_vec(), cfg.seq_len, cfg.batch_tokens, cfg.seed)?;
        Ok(Trainer {
            cfg,
            model,
            optimizer,
            stream,
            step: 0,
        })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(cfg: TrainConfig, ckpt: Checkpoint, train_ids: &[usize]) -> Result<Self> {
        cfg.validate()?;
        if ckpt.model.config() != &cfg.model {
            return Err(Error::invalid("checkpoint model config differs from the training config"));
        }
        if ckpt.seed != cfg.seed {
            return Err(Error::invalid(format!(
                "checkpoint seed {} differs from configured seed {}",
                ckpt.seed, cfg.seed
            )));
        }
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::invalid("checkpoint has no optimizer state"))?;
        let step = ckpt.step as usize;
        if step > cfg.total_steps {
            return Err(Error::invalid(format!(
                "checkpoint step {step} is past total_steps {}",
                cfg.total_steps
            )));
        }
        let mut stream = BatchStream::new(train_ids.to_vec(), cfg.seq_len, cfg.batch_tokens, cfg.seed)?;
        stream.skip_batches(step);
        Ok(Trainer {
            cfg,
            model: ckpt.model,
            optimizer,
            stream,
            step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &BackpackModel {
        &self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// Runs one optimizer update and returns its record (without held-out
    /// loss).
    pub fn step(&mut self) -> Result<LossRecord> {
        if self.is_done() {
            return Err(Error::invalid("training already reached total_steps"));
        }
        let step = self.step + 1;
        let lr = self.cfg.lr_at(step)?;
        let batch = self.stream.next_batch();
        let (loss, mut grads) = self
            .model
            .loss_and_grads(&batch.inputs, &batch.targets, self.cfg.exec)
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::Numeric(format!("training diverged at step {step}: non-finite {op}")),
                other => other,
            })?;
        if let Some(c) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        adamw_step(&mut self.model, &grads, &mut self.optimizer, lr, &self.cfg.adamw)?;
        self.step = step;
        Ok(LossRecord {
            step,
            lr,
            train_loss: loss,
            eval_loss: None,
        })
    }

    pub fn checkpoint(&self, vocab: Option<Vocabulary>) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            vocab,
            optimizer: Some(self.optimizer.clone()),
            seed: self.cfg.seed,
            step: self.step as u64,
        }
    }

    pub fn into_model(self) -> BackpackModel {
        self.model
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: BackpackModel,
    pub optimizer: OptimizerState,
    pub log: Vec<LossRecord>,
}

/// Trains from scratch. `on_record` sees every step's record as it is
/// produced; held-out loss is filled in every `eval_interval` steps and at
/// the final step.
pub fn train(
    cfg: &TrainConfig,
    train_ids: &[usize],
    heldout_ids: &[usize],
    mut on_record: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg.clone(), train_ids)?;
    let mut log = Vec::with_capacity(cfg.total_steps);
    while !t.is_done() {
        let mut rec = t.step()?;
        if rec.step % cfg.eval_interval == 0 || rec.step == cfg.total_steps {
            rec.eval_loss = Some(heldout_loss(&t.model, heldout_ids, cfg.seq_len, cfg.eval_windows, cfg.exec)?);
        }
        log::debug!("step {} lr {:.3e} loss {:.4}", rec.step, rec.lr, rec.train_loss);
        on_record(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome {
        optimizer: t.optimizer,
        model: t.model,
        log,
    })
}

/// Splits token ids into training and held-out parts, holding out the final
/// `fraction` of the stream.
pub fn split_heldout(ids: &[usize], fraction: f64) -> Result<(&[usize], &[usize])> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("held-out fraction {fraction} must be in (0, 1)")));
    }
    let cut = ids.len() - ((ids.len() as f64 * fraction).round() as usize).min(ids.len());
    Ok(ids.split_at(cut))
}
