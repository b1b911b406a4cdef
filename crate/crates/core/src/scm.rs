//! Semantic component memory.
//!
//! Each of the `K` component types owns `H` learnable key vectors. Stroke
//! features are scored against every key with a Student-t kernel normalised
//! over component types (per head), the best head per component is kept,
//! and a softmax over components yields the assignment matrix `C`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{cross_entropy, Init, Linear};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_HEADS: usize = 4;
/// Lower/upper clamp applied to `C` before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    /// Degrees of freedom.
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            epsilon: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Confidence-weighted blend of stroke features and memory keys.
    Convex,
    /// Memory keys only (`C K`); stroke-level path only.
    KeysOnly,
    /// Stroke features only (`Q` or `C^T Q`).
    StrokesOnly,
}

/// Key bank stored as a `(K*H) x d` matrix; row `j*H + h` is head `h` of component `j`.
#[derive(Debug, Clone, Copy)]
pub struct MemoryBank {
    pub keys: ParamId,
    pub components: usize,
    pub heads: usize,
}

impl MemoryBank {
    pub fn new(init: &mut Init<'_>, components: usize, heads: usize, width: usize) -> Self {
        init.scoped("memory", |init| Self {
            keys: init.normal("keys", components * heads, width),
            components,
            heads,
        })
    }

    pub fn row(&self, component: usize, head: usize) -> usize {
        component * self.heads + head
    }

    /// Rows of one head across all components.
    pub fn head_rows(&self, head: usize) -> Vec<usize> {
        (0..self.components).map(|j| self.row(j, head)).collect()
    }
}

/// Per-head kernel scores, each `N x K` and row-normalised over components.
pub fn kernel_scores<'t>(
    q: Var<'t>,
    keys: Var<'t>,
    bank: &MemoryBank,
    cfg: &KernelConfig,
) -> Result<Vec<Var<'t>>> {
    if !q.value().is_finite() || !keys.value().is_finite() {
        return Err(Error::NonFinite("kernel input".into()));
    }
    if cfg.tau <= 0.0 || cfg.epsilon <= 0.0 {
        return Err(Error::Invalid(format!(
            "tau and epsilon must be positive: {cfg:?}"
        )));
    }
    let exponent = -(cfg.tau + 1.0) / 2.0;
    (0..bank.heads)
        .map(|h| {
            let head_keys = keys.gather_rows(&bank.head_rows(h))?;
            let t = q
                .sq_dist(head_keys)?
                .scale(1.0 / cfg.tau)
                .add_scalar(cfg.epsilon)
                .powf(exponent);
            t.div(t.sum_axis(1))
        })
        .collect()
}

/// Whether `epsilon` is small relative to the mean scaled squared distance.
pub fn epsilon_is_negligible(q: &Tensor, keys: &Tensor, cfg: &KernelConfig) -> bool {
    let (n, m) = (q.rows(), keys.rows());
    if n == 0 || m == 0 {
        return true;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            total += q
                .row(i)
                .iter()
                .zip(keys.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    cfg.epsilon < 0.01 * total / (n * m) as f64 / cfg.tau
}

#[derive(Debug, Clone)]
pub struct Assignment<'t> {
    /// `N x K`, rows sum to one.
    pub c: Var<'t>,
    /// Best head per (stroke, component).
    pub head_choice: Vec<Vec<usize>>,
    /// `N x 1` row maxima of `C`.
    pub max_conf: Var<'t>,
}

/// Max-pools scores over heads (ties to the lowest head), then softmax over components.
pub fn assign<'t>(scores: &[Var<'t>]) -> Result<Assignment<'t>> {
    let first = *scores
        .first()
        .ok_or_else(|| Error::Invalid("no heads".into()))?;
    let (n, k) = first.dims();
    let mut pooled = first;
    for s in &scores[1..] {
        pooled = pooled.maximum(*s)?;
    }
    let values: Vec<Tensor> = scores.iter().map(|s| s.value().clone()).collect();
    let head_choice = (0..n)
        .map(|i| {
            (0..k)
                .map(|j| {
                    let mut best = 0;
                    for h in 1..values.len() {
                        if values[h].get(i, j) > values[best].get(i, j) {
                            best = h;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect();
    let c = pooled.softmax(1);
    let (max_conf, _) = c.max_axis(1);
    Ok(Assignment {
        c,
        head_choice,
        max_conf,
    })
}

/// `Σ_h (C ∘ M_h) K_h`: each stroke's assignment applied to its own selected head keys.
fn assigned_keys<'t>(
    assignment: &Assignment<'t>,
    keys: Var<'t>,
    bank: &MemoryBank,
) -> Result<Var<'t>> {
    let tape = keys.tape();
    let (n, k) = assignment.c.dims();
    let mut total: Option<Var<'t>> = None;
    for h in 0..bank.heads {
        let mut mask = Tensor::zeros(n, k);
        let mut any = false;
        for i in 0..n {
            for j in 0..k {
                if assignment.head_choice[i][j] == h {
                    mask.set(i, j, 1.0);
                    any = true;
                }
            }
        }
        if !any {
            continue;
        }
        let part = assignment
            .c
            .mul(tape.leaf(mask))?
            .matmul(keys.gather_rows(&bank.head_rows(h))?)?;
        total = Some(match total {
            Some(t) => t.add(part)?,
            None => part,
        });
    }
    total.ok_or_else(|| Error::Invalid("empty head choice".into()))
}

/// Stroke-level fusion `F_s` (`N x d`).
pub fn fuse_stroke_level<'t>(
    q: Var<'t>,
    assignment: &Assignment<'t>,
    keys: Var<'t>,
    bank: &MemoryBank,
    mode: FusionMode,
) -> Result<Var<'t>> {
    match mode {
        FusionMode::StrokesOnly => Ok(q),
        FusionMode::KeysOnly => assigned_keys(assignment, keys, bank),
        FusionMode::Convex => {
            let ck = assigned_keys(assignment, keys, bank)?;
            let alpha = assignment.max_conf;
            alpha.one_minus().mul(q)?.add(alpha.mul(ck)?)
        }
    }
}

/// For each component, the head selected by the most strokes (ties to the lowest head).
pub fn majority_heads(head_choice: &[Vec<usize>], components: usize, heads: usize) -> Vec<usize> {
    (0..components)
        .map(|j| {
            let mut votes = vec![0usize; heads];
            for row in head_choice {
                votes[row[j]] += 1;
            }
            let mut best = 0;
            for h in 1..heads {
                if votes[h] > votes[best] {
                    best = h;
                }
            }
            best
        })
        .collect()
}

/// Component-level fusion `F_c` (`K x d`). The blend weight of component `j`
/// is its highest assignment over strokes.
pub fn fuse_component_level<'t>(
    q: Var<'t>,
    assignment: &Assignment<'t>,
    keys: Var<'t>,
    bank: &MemoryBank,
    mode: FusionMode,
) -> Result<Var<'t>> {
    let pooled = assignment.c.t().matmul(q)?;
    match mode {
        FusionMode::StrokesOnly => Ok(pooled),
        FusionMode::KeysOnly => Err(Error::Invalid(
            "keys_only fusion is not defined for component tokens".into(),
        )),
        FusionMode::Convex => {
            let (g, _) = assignment.c.max_axis(0);
            let g = g.t();
            let chosen = majority_heads(&assignment.head_choice, bank.components, bank.heads);
            let rows: Vec<usize> = chosen
                .iter()
                .enumerate()
                .map(|(j, &h)| bank.row(j, h))
                .collect();
            let kbar = keys.gather_rows(&rows)?;
            g.one_minus().mul(pooled)?.add(g.mul(kbar)?)
        }
    }
}

/// Mean cross-entropy of the key classifier over every head of every key.
pub fn key_classifier_loss<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    keys: Var<'t>,
    bank: &MemoryBank,
    classifier: &Linear,
) -> Result<Var<'t>> {
    let logits = classifier.forward(tape, store, keys)?;
    let targets: Vec<usize> = (0..bank.components * bank.heads)
        .map(|r| r / bank.heads)
        .collect();
    cross_entropy(logits, &targets)
}

/// Balance weights `(positive, negative)` from a binary target: the positive
/// term is weighted by the fraction of zeros and vice versa. A target with
/// only one class gets weight 1 on that class.
pub fn balance_weights(target: &Tensor) -> (f64, f64) {
    let total = target.len() as f64;
    let ones = target.data().iter().filter(|&&v| v > 0.5).count() as f64;
    let zeros = total - ones;
    if ones == 0.0 {
        (0.0, 1.0)
    } else if zeros == 0.0 {
        (1.0, 0.0)
    } else {
        (zeros / total, ones / total)
    }
}

/// Balanced binary cross-entropy on the assignment matrix, averaged over `N*K`.
pub fn assignment_loss<'t>(c: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let (n, k) = c.dims();
    if target.dims() != (n, k) {
        return Err(Error::shape_pair(
            "assignment_loss",
            &[n, k],
            target.shape(),
        ));
    }
    let tape = c.tape();
    let (w_pos, w_neg) = balance_weights(target);
    let clamped = c.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let gt = tape.leaf(target.clone());
    let pos = gt.mul(clamped.ln())?.sum().scale(w_pos);
    let neg = gt
        .one_minus()
        .mul(clamped.one_minus().ln())?
        .sum()
        .scale(w_neg);
    Ok(pos.add(neg)?.scale(-1.0 / (n * k) as f64))
}

/// One-hot `N x K` matrix from per-stroke component ids.
pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(labels.len(), k);
    for (i, &j) in labels.iter().enumerate() {
        t.set(i, j, 1.0);
    }
    t
}
