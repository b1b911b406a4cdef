//! Parameter initialisation and the small layers shared by the network.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Registers parameters under a dotted name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_>) -> T) -> T {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut inner = Init {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut inner)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let t = Tensor::randn(rows, cols, INIT_STD, self.rng);
        self.store.add(self.full_name(name), t)
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let t = Tensor::uniform(rows, cols, bound, self.rng);
        self.store.add(self.full_name(name), t)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store
            .add(self.full_name(name), Tensor::full(rows, cols, v))
    }
}

/// `x · W + b` with `W: in×out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, input: usize, output: usize) -> Self {
        init.scoped(name, |init| Self {
            weight: init.normal("weight", input, output),
            bias: init.constant("bias", 1, output, 0.0),
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        x.matmul(w)?.add(b)
    }
}

/// Row-wise layer normalisation with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize) -> Self {
        init.scoped(name, |init| Self {
            gain: init.constant("gain", 1, width, 1.0),
            bias: init.constant("bias", 1, width, 0.0),
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        x.layer_norm(LAYER_NORM_EPS).mul(g)?.add(b)
    }
}

/// Mean cross-entropy of row-wise logits against integer targets.
pub fn cross_entropy<'t>(logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let (rows, cols) = logits.dims();
    assert_eq!(rows, targets.len(), "one target per logit row");
    let mut onehot = Tensor::zeros(rows, cols);
    for (r, &t) in targets.iter().enumerate() {
        onehot.set(r, t, 1.0);
    }
    let onehot = logits.tape().leaf(onehot);
    Ok(logits
        .log_softmax(1)
        .mul(onehot)?
        .sum()
        .scale(-1.0 / rows as f64))
}
