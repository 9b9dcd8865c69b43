// SPDX-License-Identifier: MIT OR Apache-2.0

//! Random checkpoints in either family's tensor layout, for tests and
//! smoke runs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::Dtype;

use crate::config::{Architecture, ModelConfig};
use crate::error::{Error, Result};

pub fn tiny_config(architecture: Architecture) -> ModelConfig {
    ModelConfig {
        architecture,
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        head_dim: 8,
        d_ff: 32,
        vocab_size: 40,
        max_context: 32,
        norm_epsilon: 1e-5,
        rope_theta: 10_000.0,
        eos_token_id: None,
    }
}

struct Builder {
    rng: ChaCha8Rng,
    tensors: Vec<(String, Vec<usize>, Vec<u8>)>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, values: impl Iterator<Item = f32>) {
        let bytes = values.flat_map(f32::to_le_bytes).collect();
        self.tensors.push((name, shape, bytes));
    }

    fn random(&mut self, name: String, shape: Vec<usize>, scale: f32, zero: bool) {
        let n: usize = shape.iter().product();
        let vals: Vec<f32> = (0..n)
            .map(|_| {
                let u = self.rng.random_range(-1.0f32..1.0);
                if zero {
                    0.0
                } else {
                    u * scale
                }
            })
            .collect();
        self.push(name, shape, vals.into_iter());
    }

    fn gain(&mut self, name: String, d: usize) {
        let vals: Vec<f32> = (0..d)
            .map(|_| 1.0 + self.rng.random_range(-0.1f32..0.1))
            .collect();
        self.push(name, vec![d], vals.into_iter());
    }

    fn finish(self) -> Vec<u8> {
        let views: Vec<(String, TensorView<'_>)> = self
            .tensors
            .iter()
            .map(|(n, s, b)| (n.clone(), TensorView::new(Dtype::F32, s.clone(), b).expect("sized")))
            .collect();
        safetensors::serialize(views, None).expect("serializable")
    }
}

/// Serialized safetensors bytes for a random model. Blocks listed in
/// `silent_layers` write nothing to the residual stream.
pub fn random_checkpoint(config: &ModelConfig, seed: u64, silent_layers: &[usize]) -> Vec<u8> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        tensors: Vec::new(),
    };
    let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
    let w = 1.0 / (d as f32).sqrt();
    match config.architecture {
        Architecture::PreLayerNormLearnedPositions => {
            b.random("wte.weight".into(), vec![v, d], 0.5, false);
            b.random("wpe.weight".into(), vec![config.max_context, d], 0.1, false);
            for l in 0..config.n_layers {
                let h = format!("h.{l}");
                let silent = silent_layers.contains(&l);
                for ln in ["ln_1", "ln_2"] {
                    b.gain(format!("{h}.{ln}.weight"), d);
                    b.random(format!("{h}.{ln}.bias"), vec![d], 0.05, false);
                }
                b.random(format!("{h}.attn.c_attn.weight"), vec![d, 3 * d], w * 1.5, false);
                b.random(format!("{h}.attn.c_attn.bias"), vec![3 * d], 0.05, false);
                b.random(format!("{h}.attn.c_proj.weight"), vec![d, d], w, silent);
                b.random(format!("{h}.attn.c_proj.bias"), vec![d], 0.05, silent);
                b.random(format!("{h}.mlp.c_fc.weight"), vec![d, ff], w, false);
                b.random(format!("{h}.mlp.c_fc.bias"), vec![ff], 0.05, false);
                b.random(format!("{h}.mlp.c_proj.weight"), vec![ff, d], w, silent);
                b.random(format!("{h}.mlp.c_proj.bias"), vec![d], 0.05, silent);
            }
            b.gain("ln_f.weight".into(), d);
            b.random("ln_f.bias".into(), vec![d], 0.05, false);
        }
        Architecture::RmsNormRotaryGatedMlp => {
            b.random("model.embed_tokens.weight".into(), vec![v, d], 0.5, false);
            for l in 0..config.n_layers {
                let h = format!("model.layers.{l}");
                let silent = silent_layers.contains(&l);
                b.gain(format!("{h}.input_layernorm.weight"), d);
                b.gain(format!("{h}.post_attention_layernorm.weight"), d);
                for p in ["q_proj", "k_proj", "v_proj"] {
                    b.random(format!("{h}.self_attn.{p}.weight"), vec![d, d], w * 1.5, false);
                }
                b.random(format!("{h}.self_attn.o_proj.weight"), vec![d, d], w, silent);
                b.random(format!("{h}.mlp.gate_proj.weight"), vec![ff, d], w, false);
                b.random(format!("{h}.mlp.up_proj.weight"), vec![ff, d], w, false);
                b.random(format!("{h}.mlp.down_proj.weight"), vec![d, ff], w, silent);
            }
            b.gain("model.norm.weight".into(), d);
            b.random("lm_head.weight".into(), vec![v, d], w, false);
        }
    }
    b.finish()
}

/// Write `config.json` and `model.safetensors` for a random model.
pub fn write_checkpoint_dir(dir: &Path, config: &ModelConfig, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&cfg, e))?;
    let weights = dir.join("model.safetensors");
    std::fs::write(&weights, random_checkpoint(config, seed, &[]))
        .map_err(|e| Error::io(&weights, e))?;
    Ok(())
}
