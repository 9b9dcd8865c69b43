// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::path::PathBuf;

use hopscope::synthetic::{random_checkpoint, tiny_config};
use hopscope::weights::TensorFile;
use hopscope::{Architecture, Engine, Model, Tokenizer};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn tokenizer() -> Tokenizer {
    Tokenizer::from_dir(fixtures().join("tokenizer")).expect("fixture tokenizer")
}

pub fn gpt2_engine() -> Engine {
    let model = Model::load_dir(fixtures().join("models/gpt2-facts")).expect("gpt2 fixture");
    Engine::new(model, tokenizer()).expect("engine")
}

pub fn llama_model() -> Model {
    Model::load_dir(fixtures().join("models/llama-tiny")).expect("llama fixture")
}

pub fn prompts() -> Vec<String> {
    std::fs::read_to_string(fixtures().join("prompts.txt"))
        .expect("prompts.txt")
        .lines()
        .map(str::to_owned)
        .collect()
}

pub fn tiny(arch: Architecture, seed: u64) -> Model {
    let cfg = tiny_config(arch);
    let file = TensorFile::from_bytes(random_checkpoint(&cfg, seed, &[])).unwrap();
    Model::from_tensors(&file, cfg).unwrap()
}

/// Largest absolute difference scaled by the largest reference magnitude.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

/// Golden logits and ids for one family, in prompt order.
pub fn golden_logits(family: &str) -> Vec<(Vec<u32>, Vec<usize>, Vec<f64>)> {
    let file = TensorFile::open(fixtures().join(format!("golden/logits_{family}.safetensors")))
        .expect("golden logits");
    let mut out = Vec::new();
    for i in 0.. {
        let key = format!("logits.{i}");
        if !file.contains(&key) {
            break;
        }
        let (shape, logits) = file.f64(&key).unwrap();
        let (_, ids) = file.f64(&format!("ids.{i}")).unwrap();
        out.push((ids.into_iter().map(|v| v as u32).collect(), shape, logits));
    }
    out
}
