// SPDX-License-Identifier: MIT OR Apache-2.0

//! Intervention plans: residual overwrites and attention-edge knockouts.
//!
//! A plan is an immutable description applied by [`Model::forward`]. Three
//! constructors cover the experiments: cross-prompt patching
//! ([`make_patch_plan`]), back-patching a later layer's state into an
//! earlier layer of the same prompt ([`make_backpatch_plan`]), and blocking
//! query→key attention over a window of layers ([`make_knockout_plan`]).

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trace::{CaptureSpec, ForwardTrace, HiddenVector, VectorOrigin};

/// Replace `residual_in[layer][position]` before block `layer` runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualOverwrite {
    pub layer: usize,
    pub position: usize,
    pub values: Vec<f32>,
}

/// Force the pre-softmax score of `query -> key` to −∞ at `layer`.
/// `head: None` blocks the edge in every head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeBlock {
    pub layer: usize,
    pub head: Option<usize>,
    pub query: usize,
    pub key: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    overwrites: Vec<ResidualOverwrite>,
    blocks: Vec<EdgeBlock>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum PlanRecord {
    Overwrite(ResidualOverwrite),
    Block(EdgeBlock),
}

impl InterventionPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.overwrites.is_empty() && self.blocks.is_empty()
    }

    pub fn overwrites(&self) -> &[ResidualOverwrite] {
        &self.overwrites
    }

    pub fn blocks(&self) -> &[EdgeBlock] {
        &self.blocks
    }

    pub fn with_overwrite(mut self, layer: usize, position: usize, values: Vec<f32>) -> Self {
        self.overwrites.push(ResidualOverwrite {
            layer,
            position,
            values,
        });
        self
    }

    pub fn with_block(mut self, block: EdgeBlock) -> Self {
        self.blocks.push(block);
        self
    }

    /// Combine two plans. Overwriting the same coordinate twice is rejected
    /// unless both plans write the same vector.
    pub fn union(&self, other: &InterventionPlan) -> Result<InterventionPlan> {
        let mut out = self.clone();
        for ow in &other.overwrites {
            match out
                .overwrites
                .iter()
                .find(|o| o.layer == ow.layer && o.position == ow.position)
            {
                Some(existing) if existing.values != ow.values => {
                    return Err(Error::Contract(format!(
                        "plans overwrite (layer {}, position {}) with different vectors",
                        ow.layer, ow.position
                    )))
                }
                Some(_) => {}
                None => out.overwrites.push(ow.clone()),
            }
        }
        for b in &other.blocks {
            if !out.blocks.contains(b) {
                out.blocks.push(*b);
            }
        }
        Ok(out)
    }

    /// Check every coordinate against the model and prompt length.
    pub fn validate(&self, config: &ModelConfig, n_tokens: usize) -> Result<()> {
        for ow in &self.overwrites {
            if ow.layer > config.n_layers {
                return Err(Error::Coordinate(format!(
                    "overwrite layer {} outside [0, {}]",
                    ow.layer, config.n_layers
                )));
            }
            if ow.position >= n_tokens {
                return Err(Error::Coordinate(format!(
                    "overwrite position {} outside prompt of {n_tokens} tokens",
                    ow.position
                )));
            }
            if ow.values.len() != config.d_model {
                return Err(Error::Dimension {
                    expected: config.d_model,
                    actual: ow.values.len(),
                });
            }
            if ow.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite);
            }
        }
        for b in &self.blocks {
            if b.layer >= config.n_layers {
                return Err(Error::Coordinate(format!(
                    "knockout layer {} outside [0, {}]",
                    b.layer,
                    config.n_layers - 1
                )));
            }
            if b.query >= n_tokens || b.key > b.query {
                return Err(Error::Coordinate(format!(
                    "knockout edge {} -> {} invalid for {n_tokens} tokens (key must not follow query)",
                    b.query, b.key
                )));
            }
            if let Some(h) = b.head {
                if h >= config.n_heads {
                    return Err(Error::Coordinate(format!(
                        "knockout head {h} outside [0, {})",
                        config.n_heads
                    )));
                }
            }
        }
        Ok(())
    }

    /// Line-delimited JSON, one record per overwrite or block.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let records = self
            .overwrites
            .iter()
            .cloned()
            .map(PlanRecord::Overwrite)
            .chain(self.blocks.iter().copied().map(PlanRecord::Block));
        for r in records {
            out.push_str(&serde_json::to_string(&r).expect("plan records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut plan = InterventionPlan::empty();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<PlanRecord>(line)? {
                PlanRecord::Overwrite(o) => plan.overwrites.push(o),
                PlanRecord::Block(b) => plan.blocks.push(b),
            }
        }
        Ok(plan)
    }

    pub(crate) fn index(&self) -> PlanIndex<'_> {
        let mut overwrites: HashMap<usize, Vec<&ResidualOverwrite>> = HashMap::new();
        for ow in &self.overwrites {
            overwrites.entry(ow.layer).or_default().push(ow);
        }
        let mut all_heads = HashSet::new();
        let mut per_head = HashSet::new();
        for b in &self.blocks {
            match b.head {
                None => all_heads.insert((b.layer, b.query, b.key)),
                Some(h) => per_head.insert((b.layer, h, b.query, b.key)),
            };
        }
        PlanIndex {
            overwrites,
            all_heads,
            per_head,
        }
    }
}

/// Per-forward lookup tables built from a plan.
pub(crate) struct PlanIndex<'a> {
    overwrites: HashMap<usize, Vec<&'a ResidualOverwrite>>,
    all_heads: HashSet<(usize, usize, usize)>,
    per_head: HashSet<(usize, usize, usize, usize)>,
}

impl PlanIndex<'_> {
    pub(crate) fn overwrites_at(&self, layer: usize) -> &[&ResidualOverwrite] {
        self.overwrites.get(&layer).map_or(&[], |v| v.as_slice())
    }

    pub(crate) fn has_blocks_at(&self, layer: usize) -> bool {
        self.all_heads.iter().any(|&(l, _, _)| l == layer)
            || self.per_head.iter().any(|&(l, _, _, _)| l == layer)
    }

    pub(crate) fn is_blocked(&self, layer: usize, head: usize, query: usize, key: usize) -> bool {
        self.all_heads.contains(&(layer, query, key))
            || self.per_head.contains(&(layer, head, query, key))
    }
}

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

/// A (prompt, layer, position) address in the residual stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coordinate {
    pub prompt_id: String,
    pub layer: usize,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub source: Coordinate,
    pub target: Coordinate,
    pub vector: HiddenVector,
}

/// Re-feed the state recorded at `source_layer` into `target_layer` at the
/// same position of the same prompt. Requires `target_layer < source_layer`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackPatchSpec {
    pub prompt_id: String,
    pub position: usize,
    pub source_layer: usize,
    pub target_layer: usize,
}

impl BackPatchSpec {
    pub fn new(
        prompt_id: impl Into<String>,
        position: usize,
        source_layer: usize,
        target_layer: usize,
    ) -> Result<Self> {
        let spec = BackPatchSpec {
            prompt_id: prompt_id.into(),
            position,
            source_layer,
            target_layer,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        if self.target_layer >= self.source_layer {
            return Err(Error::Contract(format!(
                "back-patch target layer {} must be strictly below source layer {}",
                self.target_layer, self.source_layer
            )));
        }
        Ok(())
    }
}

/// Inclusive range of `len` consecutive layers starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerWindow {
    pub start: usize,
    pub len: usize,
}

impl LayerWindow {
    pub fn new(start: usize, len: usize) -> Self {
        LayerWindow { start, len }
    }

    /// `[first, last]`; rejects `last < first`.
    pub fn inclusive(first: usize, last: usize) -> Result<Self> {
        if last < first {
            return Err(Error::Contract(format!(
                "empty layer window [{first}, {last}]"
            )));
        }
        Ok(LayerWindow {
            start: first,
            len: last - first + 1,
        })
    }

    /// Last layer of the window, `None` when it covers no layers.
    pub fn last(&self) -> Option<usize> {
        (self.len > 0).then(|| self.start + self.len - 1)
    }

    pub fn layers(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Windows of `len` layers starting at every layer, stride 1, truncated at
/// the top of the stack.
pub fn sliding_windows(n_layers: usize, len: usize) -> Vec<LayerWindow> {
    if len == 0 {
        return Vec::new();
    }
    (0..n_layers)
        .map(|start| LayerWindow::new(start, len.min(n_layers - start)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnockoutSpec {
    /// Destination of the information (the attending position).
    pub query: usize,
    /// Origin of the information (the attended position).
    pub key: usize,
    pub window: LayerWindow,
    /// Restrict to one head; `None` blocks all heads.
    pub head: Option<usize>,
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// `residual_in[layer][position]` of a clean run over `tokens`.
pub fn record_hidden(
    model: &Model,
    tokens: &[u32],
    prompt_id: &str,
    position: usize,
    layer: usize,
) -> Result<HiddenVector> {
    let config = model.config();
    if layer > config.n_layers {
        return Err(Error::Coordinate(format!(
            "layer {layer} outside [0, {}]",
            config.n_layers
        )));
    }
    if position >= tokens.len() {
        return Err(Error::Coordinate(format!(
            "position {position} outside prompt of {} tokens",
            tokens.len()
        )));
    }
    let trace = model.forward(tokens, &InterventionPlan::empty(), &CaptureSpec::residuals())?;
    hidden_from_trace(&trace, prompt_id, layer, position)
}

/// Extract a recorded vector from an existing trace.
pub fn hidden_from_trace(
    trace: &ForwardTrace,
    prompt_id: &str,
    layer: usize,
    position: usize,
) -> Result<HiddenVector> {
    let row = trace.residual(layer, position)?;
    HiddenVector::new(
        row.to_vec(),
        VectorOrigin {
            prompt_id: prompt_id.to_owned(),
            layer,
            position,
        },
    )
}

/// Replace the target coordinate with the spec's vector.
pub fn make_patch_plan(spec: &PatchSpec, config: &ModelConfig) -> Result<InterventionPlan> {
    if spec.vector.dim() != config.d_model {
        return Err(Error::Dimension {
            expected: config.d_model,
            actual: spec.vector.dim(),
        });
    }
    if spec.target.layer > config.n_layers {
        return Err(Error::Coordinate(format!(
            "target layer {} outside [0, {}]",
            spec.target.layer, config.n_layers
        )));
    }
    Ok(InterventionPlan::empty().with_overwrite(
        spec.target.layer,
        spec.target.position,
        spec.vector.values.clone(),
    ))
}

/// Overwrite `residual_in[target][pos]` with the clean run's
/// `residual_in[source][pos]`.
pub fn make_backpatch_plan(
    spec: &BackPatchSpec,
    clean_trace: &ForwardTrace,
) -> Result<InterventionPlan> {
    spec.check()?;
    let source = clean_trace.residual(spec.source_layer, spec.position)?;
    if spec.target_layer >= clean_trace.residual_in.len() {
        return Err(Error::Coordinate(format!(
            "target layer {} outside trace",
            spec.target_layer
        )));
    }
    Ok(InterventionPlan::empty().with_overwrite(spec.target_layer, spec.position, source.to_vec()))
}

/// Block `query -> key` in every layer of the window.
pub fn make_knockout_plan(spec: &KnockoutSpec, config: &ModelConfig) -> Result<InterventionPlan> {
    if spec.key > spec.query {
        return Err(Error::Coordinate(format!(
            "knockout key {} follows query {}",
            spec.key, spec.query
        )));
    }
    let mut plan = InterventionPlan::empty();
    let Some(last) = spec.window.last() else {
        return Ok(plan);
    };
    if last >= config.n_layers {
        return Err(Error::Coordinate(format!(
            "knockout window [{}, {last}] exceeds layer range [0, {}]",
            spec.window.start,
            config.n_layers - 1
        )));
    }
    for layer in spec.window.layers() {
        plan.blocks.push(EdgeBlock {
            layer,
            head: spec.head,
            query: spec.query,
            key: spec.key,
        });
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Architecture;

    fn config() -> ModelConfig {
        ModelConfig {
            architecture: Architecture::PreLayerNormLearnedPositions,
            n_layers: 4,
            d_model: 4,
            n_heads: 2,
            head_dim: 2,
            d_ff: 8,
            vocab_size: 10,
            max_context: 16,
            norm_epsilon: 1e-5,
            rope_theta: 10_000.0,
            eos_token_id: None,
        }
    }

    #[test]
    fn backpatch_requires_strictly_lower_target() {
        assert!(matches!(
            BackPatchSpec::new("p", 0, 5, 5),
            Err(Error::Contract(_))
        ));
        assert!(BackPatchSpec::new("p", 0, 5, 6).is_err());
        assert!(BackPatchSpec::new("p", 0, 5, 4).is_ok());
    }

    #[test]
    fn zero_length_window_is_empty_plan() {
        let spec = KnockoutSpec {
            query: 3,
            key: 1,
            window: LayerWindow::new(2, 0),
            head: None,
        };
        assert!(make_knockout_plan(&spec, &config()).unwrap().is_empty());
        assert!(LayerWindow::inclusive(3, 2).is_err());
    }

    #[test]
    fn knockout_covers_each_window_layer() {
        let spec = KnockoutSpec {
            query: 3,
            key: 1,
            window: LayerWindow::inclusive(1, 3).unwrap(),
            head: None,
        };
        let plan = make_knockout_plan(&spec, &config()).unwrap();
        let layers: Vec<_> = plan.blocks().iter().map(|b| b.layer).collect();
        assert_eq!(layers, [1, 2, 3]);
        let too_far = KnockoutSpec {
            window: LayerWindow::new(2, 3),
            ..spec
        };
        assert!(make_knockout_plan(&too_far, &config()).is_err());
    }

    #[test]
    fn sliding_windows_truncate_at_top() {
        let w = sliding_windows(4, 3);
        assert_eq!(w.len(), 4);
        assert_eq!(w[0], LayerWindow::new(0, 3));
        assert_eq!(w[2], LayerWindow::new(2, 2));
        assert_eq!(w[3].last(), Some(3));
        assert!(sliding_windows(4, 0).is_empty());
    }

    #[test]
    fn validate_catches_bad_coordinates() {
        let c = config();
        let plan = InterventionPlan::empty().with_overwrite(5, 0, vec![0.0; 4]);
        assert!(matches!(plan.validate(&c, 3), Err(Error::Coordinate(_))));
        let plan = InterventionPlan::empty().with_overwrite(1, 0, vec![0.0; 3]);
        assert!(matches!(plan.validate(&c, 3), Err(Error::Dimension { .. })));
        let plan = InterventionPlan::empty().with_block(EdgeBlock {
            layer: 0,
            head: None,
            query: 1,
            key: 2,
        });
        assert!(plan.validate(&c, 3).is_err());
    }

    #[test]
    fn union_rejects_conflicting_overwrites() {
        let a = InterventionPlan::empty().with_overwrite(1, 0, vec![1.0; 4]);
        let b = InterventionPlan::empty().with_overwrite(1, 0, vec![2.0; 4]);
        assert!(a.union(&b).is_err());
        assert_eq!(a.union(&a).unwrap(), a);
    }

    #[test]
    fn jsonl_round_trip() {
        let plan = InterventionPlan::empty()
            .with_overwrite(2, 1, vec![0.5, -1.0, 0.0, 3.0])
            .with_block(EdgeBlock {
                layer: 1,
                head: Some(0),
                query: 4,
                key: 2,
            });
        let text = plan.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().next().unwrap().contains(r#""op":"overwrite""#));
        assert_eq!(InterventionPlan::from_jsonl(&text).unwrap(), plan);
    }

    #[test]
    fn patch_plan_checks_dimension() {
        let spec = PatchSpec {
            source: Coordinate {
                prompt_id: "a".into(),
                layer: 0,
                position: 0,
            },
            target: Coordinate {
                prompt_id: "b".into(),
                layer: 1,
                position: 2,
            },
            vector: HiddenVector::new(
                vec![0.0; 3],
                VectorOrigin {
                    prompt_id: "a".into(),
                    layer: 0,
                    position: 0,
                },
            )
            .unwrap(),
        };
        assert!(matches!(
            make_patch_plan(&spec, &config()),
            Err(Error::Dimension { expected: 4, actual: 3 })
        ));
    }
}
