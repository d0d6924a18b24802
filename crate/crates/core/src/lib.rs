//! Desk-scale machine-unlearning laboratory around a miniature contrastive
//! dual encoder.
//!
//! The pipeline: generate a synthetic concept-paired dataset, pretrain the
//! two-tower encoder with the contrastive loss, compute forget and retain
//! gradients once, rank layers by importance and gradient alignment, take the
//! Pareto front, binary-search a step size per candidate layer, and apply the
//! single-layer edit that removes the target concept while preserving
//! zero-shot utility. Iterative GA/FT/GAFT baselines, selection-strategy
//! ablations, evaluation harnesses, and the gap-ratio benchmark summary sit
//! alongside.
//!
//! Core math is generic over the scalar type ([`tensor::Scalar`]); the
//! pipeline runs at `f64` (the [`Tensor64`] alias and the `Tensor` default),
//! which the finite-difference gradient checks require.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gapratio;
pub mod io;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod selection;
pub mod tensor;
pub mod train;
pub mod unlearn;

pub use error::{Error, Result};

/// Double-precision tensor: the canonical scalar for the whole pipeline.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision tensor, for callers that only need the generic math.
pub type Tensor32 = tensor::Tensor<f32>;

pub use config::RunConfig;
pub use data::{ConceptSpec, DatasetSplit, GeneratedData, Prototypes};
pub use eval::{EvalReport, Evaluator, SimilarityMatrix};
pub use model::{Architecture, DualEncoderModel, LayerId, TowerKind};
pub use objectives::{GradientSnapshot, LossKind, PairBatch};
pub use rng::Rng;
pub use selection::{LayerMetrics, ParetoFront, SelectionStrategy};
pub use unlearn::{BaselineConfig, BaselineMethod, SearchTrace, UnlearnDelta};
