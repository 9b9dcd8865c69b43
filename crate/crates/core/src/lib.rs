// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interpretability probes for latent multi-hop recall in small decoder-only
//! transformers: residual patching, vocabulary projection, attention
//! knockout and back-patching, plus the dataset and experiment plumbing
//! around them.

pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod intervention;
pub mod model;
pub mod probes;
pub mod render;
pub mod report;
pub mod synthetic;
pub mod tokenizer;
pub mod trace;
pub mod weights;

pub use config::{Architecture, ModelConfig};
pub use engine::Engine;
pub use error::{Error, Result};
pub use intervention::{
    BackPatchSpec, Coordinate, EdgeBlock, InterventionPlan, KnockoutSpec, LayerWindow, PatchSpec,
};
pub use model::{DecodeMode, DecodeParams, DecodeState, Model};
pub use tokenizer::{TokenSequence, Tokenizer};
pub use trace::{CaptureSpec, ForwardTrace, HiddenVector, LogitCapture, SublayerKind};
pub use probes::{entity_match, EntityAliasSet, PatchscopeTask, ProbeResult};
