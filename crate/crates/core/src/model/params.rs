use std::sync::Arc;

use rand::Rng;

use super::config::{BackpackConfig, ModelKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    /// Whether AdamW applies weight decay to this tensor.
    pub decay: bool,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Indices of a LayerNorm's gain and bias.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
}

/// Indices of an affine map's weight and bias.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub ln1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: Norm,
    pub fc: Linear,
    pub fc_proj: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct SenseLayout {
    pub ln_in: Norm,
    pub ln1: Norm,
    pub fc: Linear,
    pub fc_proj: Linear,
    pub ln2: Option<Norm>,
    pub out_fc: Linear,
    pub out_proj: Linear,
    /// `[d, 2d]`: query columns then key columns, `d/k` per sense.
    pub qk: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub wte: usize,
    pub wpe: usize,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub sense: Option<SenseLayout>,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.push(format!("{prefix}.g"), vec![d], Init::Ones),
            b: self.push(format!("{prefix}.b"), vec![d], Init::Zeros),
        }
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> Linear {
        Linear {
            w: self.push(format!("{prefix}.w"), vec![input, output], Init::Normal),
            b: self.push(format!("{prefix}.b"), vec![output], Init::Zeros),
        }
    }
}

fn plan(cfg: &BackpackConfig) -> (Vec<(String, Vec<usize>, Init)>, Layout) {
    let d = cfg.model_dim;
    let mut b = Builder { specs: Vec::new() };
    let wte = b.push("wte".into(), vec![cfg.vocab_size, d], Init::Normal);
    let wpe = b.push("wpe".into(), vec![cfg.seq_len, d], Init::Normal);
    let blocks = (0..cfg.layers)
        .map(|l| Block {
            ln1: b.norm(&format!("h.{l}.ln1"), d),
            qkv: b.linear(&format!("h.{l}.attn.qkv"), d, 3 * d),
            proj: b.linear(&format!("h.{l}.attn.proj"), d, d),
            ln2: b.norm(&format!("h.{l}.ln2"), d),
            fc: b.linear(&format!("h.{l}.mlp.fc"), d, cfg.ff_dim()),
            fc_proj: b.linear(&format!("h.{l}.mlp.proj"), cfg.ff_dim(), d),
        })
        .collect();
    let ln_f = b.norm("ln_f", d);
    let sense = (cfg.kind == ModelKind::Backpack).then(|| SenseLayout {
        ln_in: b.norm("sense.ln_in", d),
        ln1: b.norm("sense.ln1", d),
        fc: b.linear("sense.mlp.fc", d, cfg.ff_dim()),
        fc_proj: b.linear("sense.mlp.proj", cfg.ff_dim(), d),
        ln2: cfg.faithful_sense_ff.then(|| b.norm("sense.ln2", d)),
        out_fc: b.linear("sense.out.fc", d, cfg.sense_hidden_dim()),
        out_proj: b.linear("sense.out.proj", cfg.sense_hidden_dim(), cfg.num_senses * d),
        qk: b.push("context.qk.w".into(), vec![d, 2 * d], Init::Normal),
    });
    (
        b.specs,
        Layout {
            wte,
            wpe,
            blocks,
            ln_f,
            sense,
        },
    )
}

pub(crate) fn init_params<R: Rng + ?Sized>(cfg: &BackpackConfig, rng: &mut R) -> (Vec<Param>, Layout) {
    let (specs, layout) = plan(cfg);
    let params = specs
        .into_iter()
        .map(|(name, shape, init)| {
            let value = match init {
                Init::Normal => Tensor::randn(&shape, INIT_STD, rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
            };
            Param {
                name,
                decay: shape.len() >= 2,
                value: Arc::new(value),
            }
        })
        .collect();
    (params, layout)
}

/// Rebuilds the layout for `cfg` and checks that `tensors` (in layout order)
/// have the expected names and shapes.
pub(crate) fn assemble(cfg: &BackpackConfig, tensors: Vec<(String, Tensor)>) -> Result<(Vec<Param>, Layout)> {
    let (specs, layout) = plan(cfg);
    if specs.len() != tensors.len() {
        return Err(Error::shape(
            "assemble",
            format!("expected {} parameter tensors, found {}", specs.len(), tensors.len()),
        ));
    }
    let params = specs
        .into_iter()
        .zip(tensors)
        .map(|((name, shape, _), (found, value))| {
            if name != found {
                return Err(Error::shape("assemble", format!("expected parameter `{name}`, found `{found}`")));
            }
            if value.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "assemble",
                    format!("parameter `{name}` has shape {:?}, expected {shape:?}", value.shape()),
                ));
            }
            Ok(Param {
                name,
                decay: shape.len() >= 2,
                value: Arc::new(value),
            })
        })
        .collect::<Result<_>>()?;
    Ok((params, layout))
}
