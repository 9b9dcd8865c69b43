// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reading entities out of hidden states.
//!
//! Two readouts: the identity-description Patchscope, which patches a vector
//! into the placeholder of a few-shot "Name: Name is ..." prompt and lets the
//! model describe it, and vocabulary projection of residual vectors or
//! sublayer updates.

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::intervention::InterventionPlan;
use crate::model::{argmax, DecodeParams, DecodeState, Model};
use crate::trace::{ForwardTrace, HiddenVector, SublayerKind};

/// The few-shot identity-description prompt; its last token is the placeholder.
pub const IDENTITY_PROMPT: &str = include_str!("../resources/identity_prompt.txt");

/// Probe generations stop after this many tokens.
pub const PROBE_MAX_NEW_TOKENS: usize = 20;

/// The identity-description prompt, tokenized, with its prefix already run
/// through the model.
#[derive(Debug, Clone)]
pub struct PatchscopeTask {
    pub prompt: String,
    pub tokens: Vec<u32>,
    pub placeholder: usize,
    pub params: DecodeParams,
    prefix: DecodeState,
}

impl PatchscopeTask {
    /// Three seeded samples of 20 tokens at temperature 1.
    pub fn default_params(seed: u64) -> DecodeParams {
        DecodeParams::sampled(3, 1.0, seed, PROBE_MAX_NEW_TOKENS)
    }

    pub fn new(engine: &Engine, params: DecodeParams) -> Result<Self> {
        Self::with_prompt(engine, IDENTITY_PROMPT, params)
    }

    /// Any prompt whose last token is the placeholder and appears nowhere else.
    pub fn with_prompt(engine: &Engine, prompt: &str, params: DecodeParams) -> Result<Self> {
        params.validate()?;
        let tokens = engine.encode(prompt)?.ids;
        let Some(&last) = tokens.last() else {
            return Err(Error::Contract("identity prompt is empty".into()));
        };
        if tokens.iter().filter(|&&t| t == last).count() != 1 {
            return Err(Error::Contract(format!(
                "placeholder token {last} occurs more than once in the identity prompt"
            )));
        }
        let placeholder = tokens.len() - 1;
        let prefix = engine
            .model
            .prefill(&tokens[..placeholder], &InterventionPlan::empty())?;
        Ok(PatchscopeTask {
            prompt: prompt.to_owned(),
            tokens,
            placeholder,
            params,
            prefix,
        })
    }

    /// Generate from the prompt with `vector` written into the placeholder's
    /// residual stream at `target_layer`.
    pub fn generate(
        &self,
        engine: &Engine,
        vector: &[f32],
        target_layer: usize,
        seed: u64,
    ) -> Result<Vec<String>> {
        let plan = InterventionPlan::empty().with_overwrite(
            target_layer,
            self.placeholder,
            vector.to_vec(),
        );
        let state = engine
            .model
            .extend(&self.prefix, &self.tokens[self.placeholder..], &plan)?;
        engine
            .model
            .decode(&state, &self.params.with_seed(seed))?
            .iter()
            .map(|ids| engine.decode_generated(ids))
            .collect()
    }

    pub fn probe(
        &self,
        engine: &Engine,
        vector: &HiddenVector,
        target_layer: usize,
        aliases: &EntityAliasSet,
        seed: u64,
    ) -> Result<ProbeResult> {
        let generations = self.generate(engine, &vector.values, target_layer, seed)?;
        let matched = entity_match(&generations, aliases);
        Ok(ProbeResult {
            prompt_id: vector.origin.prompt_id.clone(),
            source_layer: vector.origin.layer,
            source_position: vector.origin.position,
            target_layer,
            generations,
            matched,
            rank: None,
        })
    }
}

/// Record `residual_in[source_layer][source_position]` of `source_tokens`
/// and decode it through the task at `target_layer`.
#[allow(clippy::too_many_arguments)]
pub fn patchscope_decode(
    engine: &Engine,
    task: &PatchscopeTask,
    prompt_id: &str,
    source_tokens: &[u32],
    source_position: usize,
    source_layer: usize,
    target_layer: usize,
    aliases: &EntityAliasSet,
    seed: u64,
) -> Result<ProbeResult> {
    let v = crate::intervention::record_hidden(
        &engine.model,
        source_tokens,
        prompt_id,
        source_position,
        source_layer,
    )?;
    task.probe(engine, &v, target_layer, aliases, seed)
}

/// One probe outcome with full coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub prompt_id: String,
    pub source_layer: usize,
    pub source_position: usize,
    pub target_layer: usize,
    pub generations: Vec<String>,
    pub matched: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

impl ProbeResult {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }
}

// ---------------------------------------------------------------------------
// Alias matching
// ---------------------------------------------------------------------------

pub const NORMALIZATION_POLICY: &str = "casefold-strip-punct-articles-collapse-ws";

/// Surface strings that count as naming one entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityAliasSet {
    pub canonical: String,
    pub aliases: Vec<String>,
    pub policy: String,
}

impl EntityAliasSet {
    pub fn new(canonical: impl Into<String>, aliases: impl IntoIterator<Item = String>) -> Self {
        let canonical = canonical.into();
        let mut all = vec![canonical.clone()];
        for a in aliases {
            if !all.contains(&a) {
                all.push(a);
            }
        }
        EntityAliasSet {
            canonical,
            aliases: all,
            policy: NORMALIZATION_POLICY.to_owned(),
        }
    }

    pub fn single(name: &str) -> Self {
        Self::new(name, std::iter::empty())
    }
}

/// Case-fold, turn punctuation into spaces, drop English articles and
/// collapse whitespace.
pub fn normalize(text: &str) -> String {
    let folded: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    folded
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Does any generation mention any alias? Containment is checked on whole
/// words so that "Ann" does not fire inside "Annapolis".
pub fn entity_match(generations: &[String], aliases: &EntityAliasSet) -> bool {
    let needles: Vec<String> = aliases
        .aliases
        .iter()
        .map(|a| normalize(a))
        .filter(|a| !a.is_empty())
        .map(|a| format!(" {a} "))
        .collect();
    generations.iter().any(|g| {
        let hay = format!(" {} ", normalize(g));
        needles.iter().any(|n| hay.contains(n.as_str()))
    })
}

// ---------------------------------------------------------------------------
// Vocabulary projection
// ---------------------------------------------------------------------------

/// All token ids by descending projected logit; ties go to the lower id.
pub fn vocab_project(model: &Model, vector: &[f32]) -> Result<Vec<u32>> {
    let logits = model.project(vector)?;
    let mut ids: Vec<u32> = (0..logits.len() as u32).collect();
    ids.sort_by(|&a, &b| {
        logits[b as usize]
            .total_cmp(&logits[a as usize])
            .then(a.cmp(&b))
    });
    Ok(ids)
}

/// Top-1 of [`vocab_project`] without the full sort.
pub fn top_token(model: &Model, vector: &[f32]) -> Result<u32> {
    Ok(argmax(&model.project(vector)?))
}

/// 0-based position of `token` in [`vocab_project`]'s order.
pub fn projected_rank(model: &Model, vector: &[f32], token: u32) -> Result<usize> {
    let logits = model.project(vector)?;
    let t = token as usize;
    if t >= logits.len() {
        return Err(Error::TokenOutOfRange {
            id: token,
            vocab_size: logits.len(),
        });
    }
    let target = logits[t];
    Ok(logits
        .iter()
        .enumerate()
        .filter(|&(i, &l)| l > target || (l == target && i < t))
        .count())
}

/// First layer per sublayer kind whose update projects to `token` as top-1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Promotion {
    pub attention: Option<usize>,
    pub mlp: Option<usize>,
}

impl Promotion {
    pub fn get(&self, kind: SublayerKind) -> Option<usize> {
        match kind {
            SublayerKind::Attention => self.attention,
            SublayerKind::Mlp => self.mlp,
        }
    }

    /// Earliest layer over both kinds.
    pub fn first(&self) -> Option<usize> {
        match (self.attention, self.mlp) {
            (Some(a), Some(m)) => Some(a.min(m)),
            (a, m) => a.or(m),
        }
    }
}

pub fn sublayer_promotion(
    model: &Model,
    trace: &ForwardTrace,
    position: usize,
    token: u32,
) -> Result<Promotion> {
    if !trace.has_sublayer_updates() {
        return Err(Error::Contract(
            "sublayer promotion needs a trace with captured sublayer updates".into(),
        ));
    }
    let mut out = Promotion::default();
    for kind in SublayerKind::ALL {
        for layer in 0..trace.n_update_layers() {
            let update = trace.sublayer_update(kind, layer, position)?;
            if top_token(model, &update.to_vec())? == token {
                match kind {
                    SublayerKind::Attention => out.attention = Some(layer),
                    SublayerKind::Mlp => out.mlp = Some(layer),
                }
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gens(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn matching_examples() {
        let lennon = EntityAliasSet::single("John Lennon");
        assert!(entity_match(&gens(&["John Lennon was an English musician"]), &lennon));
        assert!(!entity_match(&gens(&["the beatles"]), &lennon));
        assert!(entity_match(&gens(&["  JOHN  LENNON: singer"]), &lennon));
        assert!(!entity_match(&gens(&[]), &lennon));
    }

    #[test]
    fn matching_respects_word_boundaries() {
        let ann = EntityAliasSet::single("Ann");
        assert!(!entity_match(&gens(&["Annapolis is a city"]), &ann));
        assert!(entity_match(&gens(&["it was Ann."]), &ann));
    }

    #[test]
    fn articles_and_punctuation_are_ignored() {
        let beatles = EntityAliasSet::new("The Beatles", ["Beatles".to_string()]);
        assert!(entity_match(&gens(&["a song by the Beatles!"]), &beatles));
        assert_eq!(normalize("  The  U.K.,  an island "), "u k island");
    }

    #[test]
    fn canonical_name_is_always_an_alias() {
        let s = EntityAliasSet::new("Yoko Ono", ["Ono".to_string(), "Yoko Ono".to_string()]);
        assert_eq!(s.aliases, vec!["Yoko Ono".to_string(), "Ono".to_string()]);
    }

    #[test]
    fn promotion_first_takes_the_minimum() {
        let p = Promotion {
            attention: Some(4),
            mlp: Some(2),
        };
        assert_eq!(p.first(), Some(2));
        assert_eq!(Promotion::default().first(), None);
    }
}
