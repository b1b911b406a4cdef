//! The full recognition network, its supervision scenarios, and losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::embedding::EmbeddingParams;
use crate::error::{Error, Result};
use crate::graph::{GraphParams, DEFAULT_K};
use crate::layers::{cross_entropy, Init, Linear};
use crate::param::ParamStore;
use crate::scm::{
    self, assign, assignment_loss, fuse_component_level, fuse_stroke_level, kernel_scores,
    key_classifier_loss, Assignment, FusionMode, KernelConfig, MemoryBank,
};
use crate::sketch::{LabelSpace, Sketch, DEFAULT_MAX_STROKES};
use crate::tensor::Tensor;
use crate::transformer::{Encoded, TransformerConfig, TransformerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub max_strokes: usize,
    pub knn_k: usize,
    pub memory_heads: usize,
    pub kernel: KernelConfig,
    pub layers: usize,
    pub attention_heads: usize,
    pub mlp_ratio: usize,
    pub num_categories: usize,
    pub num_components: usize,
}

impl ModelConfig {
    pub fn preset(preset: Preset, num_categories: usize, num_components: usize) -> Self {
        let (width, layers, attention_heads, mlp_ratio) = match preset {
            Preset::Desk => (64, 2, 4, 2),
            Preset::Full => (768, 12, 12, 4),
        };
        Self {
            width,
            max_strokes: DEFAULT_MAX_STROKES,
            knn_k: DEFAULT_K,
            memory_heads: scm::DEFAULT_HEADS,
            kernel: KernelConfig::default(),
            layers,
            attention_heads,
            mlp_ratio,
            num_categories,
            num_components,
        }
    }

    pub fn max_tokens(&self) -> usize {
        self.max_strokes.max(self.num_components)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Category labels plus per-stroke component labels.
    LabelsFull,
    /// Category labels plus the category-to-component composition table.
    PriorInfo,
    /// Category labels only.
    CategoryOnly,
}

/// Which sequence the transformer reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPath {
    /// `N` fused stroke tokens.
    Stroke,
    /// `K` fused component tokens.
    Component,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub key: f64,
    pub assignment: f64,
    pub segmentation: f64,
    pub composition: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            key: 1.0,
            assignment: 20.0,
            segmentation: 10.0,
            composition: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub fusion: FusionMode,
    /// Only consulted for `category_only`; other scenarios fix their path.
    pub token_path: Option<TokenPath>,
    pub weights: LossWeights,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, fusion: FusionMode) -> Self {
        Self {
            scenario,
            fusion,
            token_path: None,
            weights: LossWeights::default(),
        }
    }

    pub fn with_path(mut self, path: TokenPath) -> Self {
        self.token_path = Some(path);
        self
    }

    pub fn path(&self) -> TokenPath {
        match self.scenario {
            Scenario::LabelsFull => TokenPath::Stroke,
            Scenario::PriorInfo => TokenPath::Component,
            Scenario::CategoryOnly => self.token_path.unwrap_or(TokenPath::Stroke),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.scenario, self.token_path) {
            (Scenario::LabelsFull, Some(TokenPath::Component)) => {
                return Err(Error::Config("labels_full reads stroke tokens".into()))
            }
            (Scenario::PriorInfo, Some(TokenPath::Stroke)) => {
                return Err(Error::Config("prior_info reads component tokens".into()))
            }
            _ => {}
        }
        if self.path() == TokenPath::Component && self.fusion == FusionMode::KeysOnly {
            return Err(Error::Config(
                "keys_only fusion applies to stroke tokens only".into(),
            ));
        }
        Ok(())
    }

    pub fn uses_assignment_loss(&self) -> bool {
        self.scenario == Scenario::LabelsFull
    }

    pub fn uses_segmentation_loss(&self) -> bool {
        self.scenario == Scenario::LabelsFull
    }

    pub fn uses_composition_loss(&self) -> bool {
        self.scenario == Scenario::PriorInfo
    }

    pub fn label(&self) -> String {
        let scenario = match self.scenario {
            Scenario::LabelsFull => "labels_full",
            Scenario::PriorInfo => "prior_info",
            Scenario::CategoryOnly => "category_only",
        };
        let fusion = match self.fusion {
            FusionMode::Convex => "convex",
            FusionMode::KeysOnly => "keys_only",
            FusionMode::StrokesOnly => "strokes_only",
        };
        let path = match self.path() {
            TokenPath::Stroke => "stroke",
            TokenPath::Component => "component",
        };
        format!("{scenario}/{path}/{fusion}")
    }
}

/// Loss values of one sample or averaged over many. Absent parts are not
/// part of the active scenario.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l1: f64,
    pub l2: Option<f64>,
    pub l4: f64,
    pub l5: Option<f64>,
    pub l6: Option<f64>,
}

impl LossParts {
    /// `λ1 L1 + λ2 L2 + (L4 + λs L5 + λc L6)`, in the same evaluation order as the tape.
    pub fn total(&self, w: &LossWeights) -> f64 {
        let mut head = w.key * self.l1;
        if let Some(l2) = self.l2 {
            head += w.assignment * l2;
        }
        let mut l3 = self.l4;
        if let Some(l5) = self.l5 {
            l3 += w.segmentation * l5;
        }
        if let Some(l6) = self.l6 {
            l3 += w.composition * l6;
        }
        head + l3
    }

    pub fn mean(parts: &[LossParts]) -> LossParts {
        let n = parts.len() as f64;
        let avg = |f: &dyn Fn(&LossParts) -> f64| parts.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&LossParts) -> Option<f64>| {
            if parts.iter().all(|p| f(p).is_some()) && !parts.is_empty() {
                Some(parts.iter().map(|p| f(p).unwrap_or(0.0)).sum::<f64>() / n)
            } else {
                None
            }
        };
        LossParts {
            l1: avg(&|p| p.l1),
            l2: avg_opt(&|p| p.l2),
            l4: avg(&|p| p.l4),
            l5: avg_opt(&|p| p.l5),
            l6: avg_opt(&|p| p.l6),
        }
    }
}

pub struct Losses<'t> {
    pub total: Var<'t>,
    pub parts: LossParts,
}

/// Balanced binary cross-entropy on logits; weights as in [`scm::balance_weights`].
pub fn balanced_bce_with_logits<'t>(logits: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if logits.dims() != target.dims() {
        return Err(Error::shape_pair(
            "balanced_bce",
            logits.value().shape(),
            target.shape(),
        ));
    }
    let tape = logits.tape();
    let (w_pos, w_neg) = scm::balance_weights(target);
    let y = tape.leaf(target.clone());
    let pos = y.mul(logits.neg().softplus())?.sum().scale(w_pos);
    let neg = y.one_minus().mul(logits.softplus())?.sum().scale(w_neg);
    Ok(pos.add(neg)?.scale(1.0 / target.len() as f64))
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub embedding: EmbeddingParams,
    pub graph: GraphParams,
    pub memory: MemoryBank,
    pub key_classifier: Linear,
    pub transformer: TransformerParams,
    pub category_head: Linear,
    pub segment_head: Linear,
    pub existence_head: Linear,
}

pub struct Forward<'t> {
    pub embeddings: Var<'t>,
    pub q: Var<'t>,
    pub keys: Var<'t>,
    pub assignment: Assignment<'t>,
    pub encoded: Encoded<'t>,
    /// `1 x categories`.
    pub class_logits: Var<'t>,
    /// `N x K`, stroke path only.
    pub segment_logits: Option<Var<'t>>,
    /// `K x 1`, component path only.
    pub existence_logits: Option<Var<'t>>,
    pub clamped_neighbourhoods: usize,
}

impl Network {
    /// Registers all parameters in a fresh store, deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let d = config.width;
        let net = Self {
            config,
            embedding: EmbeddingParams::new(&mut init, d, config.max_strokes)?,
            graph: GraphParams::new(&mut init, d, config.knn_k),
            memory: MemoryBank::new(&mut init, config.num_components, config.memory_heads, d),
            key_classifier: Linear::new(&mut init, "key_classifier", d, config.num_components),
            transformer: TransformerParams::new(
                &mut init,
                TransformerConfig {
                    layers: config.layers,
                    heads: config.attention_heads,
                    width: d,
                    mlp_ratio: config.mlp_ratio,
                    max_tokens: config.max_tokens(),
                },
            )?,
            category_head: Linear::new(&mut init, "category_head", d, config.num_categories),
            segment_head: Linear::new(&mut init, "segment_head", d, config.num_components),
            existence_head: Linear::new(&mut init, "existence_head", d, 1),
        };
        Ok((net, store))
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        sketch: &Sketch,
        scenario: &ScenarioConfig,
    ) -> Result<Forward<'t>> {
        scenario.validate()?;
        if sketch.num_strokes() > self.config.max_strokes {
            return Err(Error::Invalid(format!(
                "{} strokes exceeds max_strokes {}",
                sketch.num_strokes(),
                self.config.max_strokes
            )));
        }
        let embeddings = self.embedding.embed_sketch(tape, store, sketch)?;
        let (q, clamped) = self.graph.forward(tape, store, embeddings)?;
        let keys = tape.param(store, self.memory.keys);
        let scores = kernel_scores(q, keys, &self.memory, &self.config.kernel)?;
        let assignment = assign(&scores)?;

        let (tokens, path) = match scenario.path() {
            TokenPath::Stroke => (
                fuse_stroke_level(q, &assignment, keys, &self.memory, scenario.fusion)?,
                TokenPath::Stroke,
            ),
            TokenPath::Component => (
                fuse_component_level(q, &assignment, keys, &self.memory, scenario.fusion)?,
                TokenPath::Component,
            ),
        };
        let mask = vec![true; tokens.dims().0];
        let encoded = self.transformer.encode(tape, store, tokens, &mask)?;
        let class_logits = self.category_head.forward(tape, store, encoded.class_out)?;
        let (segment_logits, existence_logits) = match path {
            TokenPath::Stroke => (
                Some(self.segment_head.forward(tape, store, encoded.token_outs)?),
                None,
            ),
            TokenPath::Component => (
                None,
                Some(
                    self.existence_head
                        .forward(tape, store, encoded.token_outs)?,
                ),
            ),
        };
        Ok(Forward {
            embeddings,
            q,
            keys,
            assignment,
            encoded,
            class_logits,
            segment_logits,
            existence_logits,
            clamped_neighbourhoods: clamped,
        })
    }

    /// Scenario-dependent training objective for one sample.
    pub fn losses<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        fwd: &Forward<'t>,
        sketch: &Sketch,
        label_space: &LabelSpace,
        scenario: &ScenarioConfig,
    ) -> Result<Losses<'t>> {
        let w = &scenario.weights;
        let l1 = key_classifier_loss(tape, store, fwd.keys, &self.memory, &self.key_classifier)?;
        let l4 = cross_entropy(fwd.class_logits, &[sketch.category])?;
        let mut head = l1.scale(w.key);
        let mut l3 = l4;
        let mut parts = LossParts {
            l1: l1.item(),
            l4: l4.item(),
            ..Default::default()
        };

        if scenario.uses_assignment_loss() || scenario.uses_segmentation_loss() {
            let labels = sketch.stroke_components.as_ref().ok_or_else(|| {
                Error::Data("labels_full needs per-stroke component labels".into())
            })?;
            let l2 = assignment_loss(
                fwd.assignment.c,
                &scm::one_hot(labels, self.config.num_components),
            )?;
            let seg = fwd
                .segment_logits
                .ok_or_else(|| Error::Invalid("segmentation needs stroke tokens".into()))?;
            let l5 = cross_entropy(seg, labels)?;
            parts.l2 = Some(l2.item());
            parts.l5 = Some(l5.item());
            head = head.add(l2.scale(w.assignment))?;
            l3 = l3.add(l5.scale(w.segmentation))?;
        }
        if scenario.uses_composition_loss() {
            let target = label_space.composition_vector(sketch.category)?;
            let logits = fwd
                .existence_logits
                .ok_or_else(|| Error::Invalid("composition loss needs component tokens".into()))?;
            let l6 = balanced_bce_with_logits(logits, &Tensor::matrix(target.len(), 1, target)?)?;
            parts.l6 = Some(l6.item());
            l3 = l3.add(l6.scale(w.composition))?;
        }
        Ok(Losses {
            total: head.add(l3)?,
            parts,
        })
    }

    /// Read-only inference on one (already normalised) sketch.
    pub fn predict(
        &self,
        store: &ParamStore,
        sketch: &Sketch,
        scenario: &ScenarioConfig,
    ) -> Result<Prediction> {
        let tape = Tape::new();
        let fwd = self.forward(&tape, store, sketch, scenario)?;
        let category_probs = fwd.class_logits.softmax(1).value().data().to_vec();
        let stroke_components = match (scenario.scenario, fwd.segment_logits) {
            (Scenario::LabelsFull, Some(seg)) => {
                let probs = seg.softmax(1).value().clone();
                Some(
                    (0..probs.rows())
                        .map(|i| {
                            let row = probs.row(i);
                            let best = argmax(row);
                            (best, row[best])
                        })
                        .collect(),
                )
            }
            _ => None,
        };
        let existence = match (scenario.scenario, fwd.existence_logits) {
            (Scenario::PriorInfo, Some(logits)) => Some(logits.sigmoid().value().data().to_vec()),
            _ => None,
        };
        let assignment = fwd.assignment.c.value().to_rows();
        let stroke_features = fwd.q.value().clone();
        let prediction = Prediction {
            category_probs,
            stroke_components,
            existence,
            assignment,
            head_choice: fwd.assignment.head_choice,
            stroke_features,
        };
        Ok(prediction)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub category_probs: Vec<f64>,
    /// Per stroke: predicted component and its probability (labels_full only).
    pub stroke_components: Option<Vec<(usize, f64)>>,
    /// Per component existence probability (prior_info only).
    pub existence: Option<Vec<f64>>,
    pub assignment: Vec<Vec<f64>>,
    pub head_choice: Vec<Vec<usize>>,
    pub stroke_features: Tensor,
}

impl Prediction {
    pub fn category(&self) -> usize {
        argmax(&self.category_probs)
    }

    /// Component ids read from the assignment matrix (argmax per stroke).
    pub fn assigned_components(&self) -> Vec<usize> {
        self.assignment.iter().map(|r| argmax(r)).collect()
    }
}

/// Index of the largest value; ties to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let full = ModelConfig::preset(Preset::Full, 20, 87);
        assert_eq!(
            (full.width, full.layers, full.attention_heads),
            (768, 12, 12)
        );
        let desk = ModelConfig::preset(Preset::Desk, 5, 8);
        assert_eq!((desk.width, desk.layers, desk.attention_heads), (64, 2, 4));
        assert_eq!(desk.kernel.tau, 1.0);
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!(
            (w.key, w.assignment, w.segmentation, w.composition),
            (1.0, 20.0, 10.0, 10.0)
        );
    }

    #[test]
    fn scenario_paths_and_validation() {
        let s = ScenarioConfig::new(Scenario::PriorInfo, FusionMode::Convex);
        assert_eq!(s.path(), TokenPath::Component);
        assert!(
            ScenarioConfig::new(Scenario::PriorInfo, FusionMode::KeysOnly)
                .validate()
                .is_err()
        );
        let c = ScenarioConfig::new(Scenario::CategoryOnly, FusionMode::StrokesOnly)
            .with_path(TokenPath::Component);
        assert!(c.validate().is_ok());
        assert!(
            ScenarioConfig::new(Scenario::LabelsFull, FusionMode::Convex)
                .with_path(TokenPath::Component)
                .validate()
                .is_err()
        );
    }

    #[test]
    fn total_of_unit_parts() {
        let parts = LossParts {
            l1: 1.0,
            l2: Some(1.0),
            l4: 1.0,
            l5: Some(1.0),
            l6: None,
        };
        // 1 + 20 + L3 with L3 = 1 + 10.
        assert_eq!(parts.total(&LossWeights::default()), 1.0 + 20.0 + 11.0);
        let only = LossParts {
            l1: 0.5,
            l4: 0.25,
            ..Default::default()
        };
        assert_eq!(only.total(&LossWeights::default()), 0.75);
    }

    #[test]
    fn balanced_bce_hand_value() {
        // y = [1,1,0,0], logits [2,2,-2,-2]: every term is ln(1 + e^-2), weights 1/2 each.
        let tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(4, 1, vec![2.0, 2.0, -2.0, -2.0]).unwrap());
        let y = Tensor::matrix(4, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let l = balanced_bce_with_logits(z, &y).unwrap().item();
        let term = (1.0 + (-2f64).exp()).ln();
        assert!((l - (0.5 * 2.0 * term + 0.5 * 2.0 * term) / 4.0).abs() < 1e-15);
        assert!((l - 0.063464).abs() < 1e-6);
    }

    #[test]
    fn balanced_bce_all_positive_is_plain_bce() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(2, 1, vec![0.3, -1.2]).unwrap());
        let y = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let l = balanced_bce_with_logits(z, &y).unwrap().item();
        let plain = ((1.0 + (-0.3f64).exp()).ln() + (1.0 + 1.2f64.exp()).ln()) / 2.0;
        assert!((l - plain).abs() < 1e-15);

        let saturated = tape.leaf(Tensor::matrix(2, 1, vec![40.0, 40.0]).unwrap());
        assert!(balanced_bce_with_logits(saturated, &y).unwrap().item() < 1e-15);
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    }
}
