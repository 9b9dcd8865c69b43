// SPDX-License-Identifier: MIT OR Apache-2.0

//! A model paired with its tokenizer, for text-in/text-out calls.

use std::path::Path;

use crate::error::{Error, Result};
use crate::intervention::InterventionPlan;
use crate::model::{DecodeParams, Model};
use crate::tokenizer::{TokenSequence, Tokenizer};

#[derive(Debug, Clone)]
pub struct Engine {
    pub model: Model,
    pub tokenizer: Tokenizer,
}

impl Engine {
    pub fn new(model: Model, tokenizer: Tokenizer) -> Result<Self> {
        if tokenizer.vocab_size() > model.config().vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} tokens but the model vocabulary has {}",
                tokenizer.vocab_size(),
                model.config().vocab_size
            )));
        }
        Ok(Engine { model, tokenizer })
    }

    /// Load a model directory and a tokenizer directory.
    pub fn load(model_dir: impl AsRef<Path>, tokenizer_dir: impl AsRef<Path>) -> Result<Self> {
        Self::new(Model::load_dir(model_dir)?, Tokenizer::from_dir(tokenizer_dir)?)
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        self.tokenizer.encode(text)
    }

    /// Decode generated ids, dropping the end-of-text token.
    pub fn decode_generated(&self, ids: &[u32]) -> Result<String> {
        let eos = self.model.config().eos_token_id;
        let kept: Vec<u32> = ids.iter().copied().filter(|&t| Some(t) != eos).collect();
        self.tokenizer.decode(&kept)
    }

    pub fn generate_text(
        &self,
        prompt: &str,
        params: &DecodeParams,
        plan: &InterventionPlan,
    ) -> Result<Vec<String>> {
        let tokens = self.encode(prompt)?;
        self.generate_ids(&tokens.ids, params, plan)
    }

    pub fn generate_ids(
        &self,
        tokens: &[u32],
        params: &DecodeParams,
        plan: &InterventionPlan,
    ) -> Result<Vec<String>> {
        self.model
            .generate(tokens, params, plan)?
            .iter()
            .map(|s| self.decode_generated(s))
            .collect()
    }

    /// Greedy continuation of `prompt`.
    pub fn greedy(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        let mut out = self.generate_text(
            prompt,
            &DecodeParams::greedy(max_new_tokens),
            &InterventionPlan::empty(),
        )?;
        Ok(out.remove(0))
    }

    /// First token of `name` as it appears mid-sentence (after a space).
    pub fn first_token_of(&self, name: &str) -> Result<u32> {
        let seq = self.encode(&format!(" {name}"))?;
        seq.ids
            .first()
            .copied()
            .ok_or_else(|| Error::Tokenizer(format!("{name:?} encodes to no tokens")))
    }
}
