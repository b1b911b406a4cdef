//! Explainable sketch recognition over strokes.
//!
//! Strokes are embedded, fused over a dynamic stroke graph, softly assigned
//! to semantic component types through learnable multi-head memory keys,
//! and classified by a transformer encoder. The assignment matrix doubles
//! as the explanation of which components a sketch was recognized from.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod scm;
pub mod sketch;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use autograd::{Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use config::{RunConfig, TrainSettings};
pub use error::{Error, Result};
pub use metrics::Metrics;
pub use model::{
    LossParts, LossWeights, ModelConfig, Network, Prediction, Preset, Scenario, ScenarioConfig,
    TokenPath,
};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use scm::FusionMode;
pub use sketch::{Dataset, LabelSpace, PenState, Point, Sketch, Split, Stroke};
pub use synth::{synthesize_dataset, SynthSpec};
pub use tensor::Tensor;
