//! Pre-norm transformer encoder with a learned class token.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Init, LayerNorm, Linear};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive attention bias for masked keys; `exp` of it underflows to exactly zero.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
    /// Longest token sequence, excluding the class token.
    pub max_tokens: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct TransformerParams {
    pub config: TransformerConfig,
    blocks: Vec<Block>,
    class_token: ParamId,
    positions: ParamId,
    final_norm: LayerNorm,
}

#[derive(Debug, Clone, Copy)]
pub struct Encoded<'t> {
    /// `1 x d` class-token output.
    pub class_out: Var<'t>,
    /// `T x d` token outputs; masked rows are zero.
    pub token_outs: Var<'t>,
}

impl TransformerParams {
    pub fn new(init: &mut Init<'_>, config: TransformerConfig) -> Result<Self> {
        if config.heads == 0 || config.width % config.heads != 0 {
            return Err(Error::Invalid(format!(
                "width {} not divisible by {} heads",
                config.width, config.heads
            )));
        }
        let d = config.width;
        init.scoped("transformer", |init| {
            let blocks = (0..config.layers)
                .map(|l| {
                    init.scoped(&format!("block{l}"), |init| Block {
                        norm1: LayerNorm::new(init, "norm1", d),
                        qkv: Linear::new(init, "qkv", d, 3 * d),
                        proj: Linear::new(init, "proj", d, d),
                        norm2: LayerNorm::new(init, "norm2", d),
                        fc1: Linear::new(init, "fc1", d, config.mlp_ratio * d),
                        fc2: Linear::new(init, "fc2", config.mlp_ratio * d, d),
                    })
                })
                .collect();
            Ok(Self {
                config,
                blocks,
                class_token: init.normal("class_token", 1, d),
                positions: init.normal("positions", config.max_tokens + 1, d),
                final_norm: LayerNorm::new(init, "final_norm", d),
            })
        })
    }

    fn attention<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        block: &Block,
        x: Var<'t>,
        key_bias: Var<'t>,
    ) -> Result<Var<'t>> {
        let d = self.config.width;
        let dh = d / self.config.heads;
        let qkv = block.qkv.forward(tape, store, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads = (0..self.config.heads)
            .map(|h| {
                let q = qkv.slice(1, h * dh, dh)?;
                let k = qkv.slice(1, d + h * dh, dh)?;
                let v = qkv.slice(1, 2 * d + h * dh, dh)?;
                let weights = q.matmul(k.t())?.scale(scale).add(key_bias)?.softmax(1);
                weights.matmul(v)
            })
            .collect::<Result<Vec<_>>>()?;
        let merged = tape.concat(&heads, 1)?;
        block.proj.forward(tape, store, merged)
    }

    /// Encodes `T x d` tokens. `mask[i] == false` excludes token `i` from
    /// attention in both directions.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        tokens: Var<'t>,
        mask: &[bool],
    ) -> Result<Encoded<'t>> {
        let (t, d) = tokens.dims();
        if d != self.config.width {
            return Err(Error::Shape(format!(
                "tokens {t}x{d} for width {}",
                self.config.width
            )));
        }
        if t > self.config.max_tokens {
            return Err(Error::Invalid(format!(
                "{t} tokens exceeds max_tokens {}",
                self.config.max_tokens
            )));
        }
        if mask.len() != t {
            return Err(Error::Invalid(format!(
                "mask length {} for {t} tokens",
                mask.len()
            )));
        }
        let class = tape.param(store, self.class_token);
        let seq = if t == 0 {
            class
        } else {
            tape.concat(&[class, tokens], 0)?
        };
        let positions = tape.param(store, self.positions).slice(0, 0, t + 1)?;
        let mut x = seq.add(positions)?;

        let bias: Vec<f64> = std::iter::once(0.0)
            .chain(mask.iter().map(|&m| if m { 0.0 } else { MASKED }))
            .collect();
        let key_bias = tape.leaf(Tensor::row_vector(bias));

        for block in &self.blocks {
            let normed = block.norm1.forward(tape, store, x)?;
            x = x.add(self.attention(tape, store, block, normed, key_bias)?)?;
            let normed = block.norm2.forward(tape, store, x)?;
            let hidden = block.fc1.forward(tape, store, normed)?.gelu();
            x = x.add(block.fc2.forward(tape, store, hidden)?)?;
        }
        let out = self.final_norm.forward(tape, store, x)?;
        let class_out = out.slice(0, 0, 1)?;
        let token_outs = if t == 0 {
            tape.leaf(Tensor::zeros(0, d))
        } else {
            let keep: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            out.slice(0, 1, t)?
                .mul(tape.leaf(Tensor::matrix(t, 1, keep)?))?
        };
        Ok(Encoded {
            class_out,
            token_outs,
        })
    }
}
