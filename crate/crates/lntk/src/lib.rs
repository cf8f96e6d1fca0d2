//! Linearized (NTK-regime) LoRA fine-tuning laboratory.
//!
//! The library trains low-rank adapters `delta = u v^T` on linearized
//! models with block-diagonal per-coordinate features, certifies the
//! optimization landscape (SOSP certificates, rank deficiency under
//! random PSD perturbations, multistart optimality against a convex
//! proximal-gradient oracle), reduces minimizer rank constructively,
//! and Monte-Carlo checks a 1/sqrt(N) excess-risk bound.

pub mod bound;
pub mod error;
pub mod io;
pub mod landscape;
pub mod model;
pub mod optim;
pub mod prox;
pub mod reduce;

pub use error::{Error, Result};
pub use model::{
    BlockShape, FeatureMap, Label, LinearizedDataset, LinearizedSample, LoraFactors, LossKind,
    PsdPerturbation, UpdateMatrix,
};
pub use optim::{rank_threshold, InitScheme, TrainConfig, TrainOutcome, TrainTrace};
