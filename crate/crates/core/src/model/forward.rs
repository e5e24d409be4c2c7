//! Graph construction for one sequence. Training and inference share these
//! builders, so a value computed here is bitwise identical whichever path
//! asked for it.

use std::collections::BTreeMap;

use super::config::ModelKind;
use super::params::{Linear, Norm};
use super::{BackpackModel, DeltaSchedule, SenseEdits};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub(crate) fn bind(g: &mut Graph, model: &BackpackModel, requires_grad: bool) -> Vec<Var> {
    model.params.iter().map(|p| g.param(&p.value, requires_grad)).collect()
}

fn norm(g: &mut Graph, p: &[Var], x: Var, n: Norm) -> Result<Var> {
    g.layer_norm(x, p[n.g], p[n.b])
}

fn linear(g: &mut Graph, p: &[Var], x: Var, l: Linear) -> Result<Var> {
    let y = g.matmul(x, p[l.w])?;
    g.add_row(y, p[l.b])
}

fn mlp(g: &mut Graph, p: &[Var], x: Var, fc: Linear, proj: Linear) -> Result<Var> {
    let h = linear(g, p, x, fc)?;
    let h = g.gelu(h)?;
    linear(g, p, h, proj)
}

pub(crate) fn check_tokens(model: &BackpackModel, tokens: &[usize]) -> Result<()> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if tokens.len() > cfg.seq_len {
        return Err(Error::OutOfRange {
            what: "sequence length",
            index: tokens.len(),
            limit: cfg.seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::OutOfRange {
            what: "token id",
            index: t,
            limit: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Final-layer-normed hidden states of the contextualization Transformer.
pub(crate) fn transformer(g: &mut Graph, model: &BackpackModel, p: &[Var], tokens: &[usize]) -> Result<Var> {
    let cfg = &model.config;
    let lay = &model.layout;
    let (d, nh, hd) = (cfg.model_dim, cfg.heads, cfg.head_dim());
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = g.gather_rows(p[lay.wte], tokens)?;
    let pos = g.gather_rows(p[lay.wpe], &positions)?;
    let mut x = g.add(tok, pos)?;
    let scale = 1.0 / (hd as f64).sqrt();
    for b in &lay.blocks {
        let a = norm(g, p, x, b.ln1)?;
        let qkv = linear(g, p, a, b.qkv)?;
        let mut heads = Vec::with_capacity(nh);
        for h in 0..nh {
            let q = g.slice_cols(qkv, h * hd, hd)?;
            let k = g.slice_cols(qkv, d + h * hd, hd)?;
            let v = g.slice_cols(qkv, 2 * d + h * hd, hd)?;
            let s = g.matmul_nt(q, k)?;
            let s = g.scale(s, scale)?;
            let w = g.softmax_rows(s, true)?;
            heads.push(g.matmul(w, v)?);
        }
        let att = if nh == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let att = linear(g, p, att, b.proj)?;
        x = g.add(x, att)?;
        let m = norm(g, p, x, b.ln2)?;
        let m = mlp(g, p, m, b.fc, b.fc_proj)?;
        x = g.add(x, m)?;
    }
    norm(g, p, x, lay.ln_f)
}

/// Sense vectors for `words`, one row of `k*d` values per word (sense ℓ in
/// columns `ℓd..(ℓ+1)d`). Each row depends only on its own word.
pub(crate) fn sense_rows(g: &mut Graph, model: &BackpackModel, p: &[Var], words: &[usize]) -> Result<Var> {
    let s = model
        .layout
        .sense
        .as_ref()
        .ok_or_else(|| Error::invalid("a transformer model has no sense vectors"))?;
    let r0 = g.gather_rows(p[model.layout.wte], words)?;
    let h0 = norm(g, p, r0, s.ln_in)?;
    let pre_out = match s.ln2 {
        Some(ln2) => {
            let r1 = g.add(h0, r0)?;
            let m = norm(g, p, r1, s.ln1)?;
            let m = mlp(g, p, m, s.fc, s.fc_proj)?;
            let r2 = g.add(r1, m)?;
            norm(g, p, r2, ln2)?
        }
        None => {
            let m = mlp(g, p, h0, s.fc, s.fc_proj)?;
            let r = g.add(h0, m)?;
            norm(g, p, r, s.ln1)?
        }
    };
    mlp(g, p, pre_out, s.out_fc, s.out_proj)
}

/// Per-sense causal weights, one `n×n` matrix per sense.
pub(crate) fn alphas(g: &mut Graph, model: &BackpackModel, p: &[Var], h: Var) -> Result<Vec<Var>> {
    let cfg = &model.config;
    let s = model
        .layout
        .sense
        .as_ref()
        .ok_or_else(|| Error::invalid("a transformer model has no contextualization weights"))?;
    let (d, dk) = (cfg.model_dim, cfg.sense_key_dim());
    let qk = g.matmul(h, p[s.qk])?;
    (0..cfg.num_senses)
        .map(|l| {
            let q = g.slice_cols(qk, l * dk, dk)?;
            let k = g.slice_cols(qk, d + l * dk, dk)?;
            let scores = g.matmul_nt(q, k)?;
            g.softmax_rows(scores, true)
        })
        .collect()
}

pub(crate) struct Forward {
    pub logits: Var,
    pub alphas: Vec<Var>,
    /// Sense rows per position (`n × k*d`); `None` for the transformer kind.
    pub senses: Option<Var>,
    pub output: Var,
}

pub(crate) fn forward(
    g: &mut Graph,
    model: &BackpackModel,
    p: &[Var],
    tokens: &[usize],
    edits: &SenseEdits,
    delta: Option<&DeltaSchedule>,
) -> Result<Forward> {
    check_tokens(model, tokens)?;
    let cfg = &model.config;
    let wte = p[model.layout.wte];
    let hidden = transformer(g, model, p, tokens)?;
    if cfg.kind == ModelKind::Transformer {
        if delta.is_some() {
            return Err(Error::invalid("δ reweighting needs a backpack model"));
        }
        let logits = g.matmul_nt(hidden, wte)?;
        return Ok(Forward {
            logits,
            alphas: Vec::new(),
            senses: None,
            output: hidden,
        });
    }
    let (n, k, d) = (tokens.len(), cfg.num_senses, cfg.model_dim);
    if let Some(delta) = delta {
        if delta.senses() != k || delta.len() != n {
            return Err(Error::shape(
                "delta",
                format!("schedule is {}×{n}×{n} for k={k}, n={n}", delta.senses()),
            ));
        }
        delta.validate()?;
    }
    let alphas = alphas(g, model, p, hidden)?;

    let mut unique = tokens.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let (edited, computed): (Vec<usize>, Vec<usize>) = unique.into_iter().partition(|t| edits.get(*t).is_some());
    let mut parts = Vec::new();
    if !computed.is_empty() {
        parts.push(sense_rows(g, model, p, &computed)?);
    }
    for &t in &edited {
        let row = edits.get(t).expect("partitioned on presence").reshape(&[1, k * d])?;
        parts.push(g.constant(row)?);
    }
    let table = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    let slot: BTreeMap<usize, usize> = computed.iter().chain(&edited).enumerate().map(|(i, &t)| (t, i)).collect();
    let rows: Vec<usize> = tokens.iter().map(|t| slot[t]).collect();
    let senses = g.gather_rows(table, &rows)?;

    let mut output: Option<Var> = None;
    for (l, &alpha) in alphas.iter().enumerate() {
        let c = g.slice_cols(senses, l * d, d)?;
        let w = match delta {
            Some(delta) => {
                let dl = g.constant(delta.sense_matrix(l))?;
                g.mul(alpha, dl)?
            }
            None => alpha,
        };
        let term = g.matmul(w, c)?;
        output = Some(match output {
            Some(o) => g.add(o, term)?,
            None => term,
        });
    }
    let output = output.expect("num_senses >= 1");
    let logits = g.matmul_nt(output, wte)?;
    Ok(Forward {
        logits,
        alphas,
        senses: Some(senses),
        output,
    })
}

/// Reads an `n×n` graph value for each sense into a flat `k×n×n` buffer.
pub(crate) fn collect_alphas(g: &Graph, alphas: &[Var]) -> Vec<f64> {
    alphas.iter().flat_map(|&a| g.value(a).data().iter().copied()).collect()
}

pub(crate) fn value(g: &Graph, v: Var) -> Tensor {
    g.value(v).clone()
}
