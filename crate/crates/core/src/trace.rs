// SPDX-License-Identifier: MIT OR Apache-2.0

//! What a forward pass records.
//!
//! Layer indexing: `residual_in[l]` is the residual stream entering block
//! `l`; `residual_in[n_layers]` is the stream leaving the last block, before
//! the final normalization. Every probe and patch coordinate uses this
//! convention.

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The two residual writers inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SublayerKind {
    Attention,
    Mlp,
}

impl SublayerKind {
    pub const ALL: [SublayerKind; 2] = [SublayerKind::Attention, SublayerKind::Mlp];

    pub fn as_str(self) -> &'static str {
        match self {
            SublayerKind::Attention => "attention",
            SublayerKind::Mlp => "mlp",
        }
    }
}

/// Which positions get logits computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogitCapture {
    #[default]
    All,
    Last,
}

/// Opt-in capture of internal state. Attention tensors are off unless asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CaptureSpec {
    pub residuals: bool,
    pub sublayer_updates: bool,
    pub attention_weights: bool,
    /// Scaled query-key scores before the causal mask and any knockout.
    pub attention_scores: bool,
    pub logits: LogitCapture,
}

impl CaptureSpec {
    /// Logits only.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn residuals() -> Self {
        CaptureSpec {
            residuals: true,
            ..Self::default()
        }
    }

    pub fn streams() -> Self {
        CaptureSpec {
            residuals: true,
            sublayer_updates: true,
            ..Self::default()
        }
    }

    pub fn everything() -> Self {
        CaptureSpec {
            residuals: true,
            sublayer_updates: true,
            attention_weights: true,
            attention_scores: true,
            logits: LogitCapture::All,
        }
    }
}

/// Everything recorded by one forward pass over one prompt.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub n_tokens: usize,
    /// `[n_tokens, vocab]`, or `[1, vocab]` for the last position only.
    pub logits: Array2<f32>,
    /// `n_layers + 1` entries of `[n_tokens, d_model]` when captured.
    pub residual_in: Vec<Array2<f32>>,
    /// `n_layers` entries of `[n_tokens, d_model]` when captured.
    pub attention_updates: Vec<Array2<f32>>,
    pub mlp_updates: Vec<Array2<f32>>,
    /// `n_layers` entries of `[heads, query, key]` when captured.
    pub attention_weights: Vec<Array3<f32>>,
    pub attention_scores: Vec<Array3<f32>>,
}

impl ForwardTrace {
    /// Logits at the last position.
    pub fn last_logits(&self) -> ArrayView1<'_, f32> {
        self.logits.row(self.logits.nrows() - 1)
    }

    pub fn has_residuals(&self) -> bool {
        !self.residual_in.is_empty()
    }

    pub fn has_sublayer_updates(&self) -> bool {
        !self.mlp_updates.is_empty()
    }

    pub fn residual(&self, layer: usize, position: usize) -> Result<ArrayView1<'_, f32>> {
        if self.residual_in.is_empty() {
            return Err(Error::Contract("trace did not capture residual streams".into()));
        }
        let m = self.residual_in.get(layer).ok_or_else(|| {
            Error::Coordinate(format!(
                "layer {layer} outside [0, {}]",
                self.residual_in.len() - 1
            ))
        })?;
        check_position(position, m.nrows())?;
        Ok(m.row(position))
    }

    pub fn sublayer_update(
        &self,
        kind: SublayerKind,
        layer: usize,
        position: usize,
    ) -> Result<ArrayView1<'_, f32>> {
        let updates = match kind {
            SublayerKind::Attention => &self.attention_updates,
            SublayerKind::Mlp => &self.mlp_updates,
        };
        if updates.is_empty() {
            return Err(Error::Contract("trace did not capture sublayer updates".into()));
        }
        let m = updates
            .get(layer)
            .ok_or_else(|| Error::Coordinate(format!("layer {layer} has no sublayer update")))?;
        check_position(position, m.nrows())?;
        Ok(m.row(position))
    }

    /// Number of blocks whose updates were captured.
    pub fn n_update_layers(&self) -> usize {
        self.mlp_updates.len()
    }
}

fn check_position(position: usize, len: usize) -> Result<()> {
    if position >= len {
        return Err(Error::Coordinate(format!(
            "position {position} outside prompt of {len} tokens"
        )));
    }
    Ok(())
}

/// Where a recorded vector came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorOrigin {
    pub prompt_id: String,
    pub layer: usize,
    pub position: usize,
}

/// A residual-stream vector together with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenVector {
    pub values: Vec<f32>,
    pub origin: VectorOrigin,
}

impl HiddenVector {
    pub fn new(values: Vec<f32>, origin: VectorOrigin) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(HiddenVector { values, origin })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}
