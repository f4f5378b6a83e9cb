//! Efficient-attention transformer variants built on a minimal f64 autodiff
//! engine: a full-attention reference, the PerceiverAR-style latent
//! cross-attention baseline, three enhanced variants that keep refining the
//! history (V1 full, V2 segmented, V3 projected), and the LLP architecture
//! of overlapping half-segment blocks.
//!
//! Alongside the models: a byte-level autoregressive LM harness (training,
//! perplexity, sampling, checkpointing), an exact integer attention-cost
//! model, and a receptive-field propagation analyzer.

pub mod attention;
pub mod checkpoint;
pub mod complexity;
pub mod error;
mod fastmath;
pub mod gradcheck;
pub mod graph;
pub mod lm;
pub mod mask;
pub mod model;
pub mod receptive;
pub mod params;
pub mod tensor;

pub use attention::{multi_head_attention, scaled_dot_attention, AttentionParams, PeKind};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use complexity::{attention_steps, complexity_report, ComplexityInputs, ComplexityRow};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use lm::{generate, perplexity, tokenize_bytes, train, AdamState, Schedule, TrainConfig};
pub use mask::{causal_mask, MaskSpec};
pub use model::{build_model, forward, Model, ModelConfig, Variant};
pub use params::ParamStore;
pub use receptive::{empirical_sensitivity, symbolic_reach, verify_propagation, ReachabilityMap};
pub use tensor::{matmul, Tensor};
