// SPDX-License-Identifier: MIT OR Apache-2.0

//! Two-hop queries built from an offline triplet dump.
//!
//! A dump is line-delimited JSON with tagged records:
//!
//! ```text
//! {"kind":"entity","id":"Q1","name":"Imagine","type":"song","aliases":["Imagine"]}
//! {"kind":"triplet","subject":"Q1","relation":"performer","object":"Q2"}
//! ```
//!
//! Relation templates and the entity-type registry are separate JSON files.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::probes::{entity_match, EntityAliasSet};
use crate::tokenizer::Tokenizer;

/// Greedy answers are judged on this many generated tokens.
pub const ANSWER_MAX_NEW_TOKENS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactTriplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: String,
    pub name: String,
    pub aliases: EntityAliasSet,
    pub entity_type: String,
}

/// `template` has one `{}` slot; `bare` is the same phrase with the slot
/// and its preposition removed ("the performer").
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTemplate {
    pub id: String,
    pub template: String,
    pub bare: String,
}

impl RelationTemplate {
    pub fn new(id: &str, template: &str, bare: &str) -> Result<Self> {
        if template.matches("{}").count() != 1 {
            return Err(Error::Dataset(format!(
                "template for {id:?} must have exactly one {{}} slot: {template:?}"
            )));
        }
        Ok(RelationTemplate {
            id: id.to_owned(),
            template: template.to_owned(),
            bare: bare.to_owned(),
        })
    }

    pub fn render(&self, subject: &str) -> String {
        self.template.replacen("{}", subject, 1)
    }

    /// Byte length of the text before the slot.
    fn slot_offset(&self) -> usize {
        self.template.find("{}").expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoHopQuery {
    pub id: String,
    pub e1: String,
    pub r1: String,
    pub e2: String,
    pub r2: String,
    pub e3: String,
    pub e1_name: String,
    pub e2_aliases: EntityAliasSet,
    pub e3_aliases: EntityAliasSet,
    pub prompt: String,
    pub first_hop_prompt: String,
    pub second_hop_prompt: String,
    /// Two-hop prompt with e1 removed ("The spouse of the performer is").
    pub no_e1_prompt: String,
    /// Two-hop prompt with r1 removed ("The spouse of Imagine is").
    pub no_r1_prompt: String,
    /// Last token of e1's surface form.
    pub t1: usize,
    /// Last prompt token.
    pub t2: usize,
    pub bridge_type: String,
}

// ---------------------------------------------------------------------------
// Knowledge base
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum DumpRecord {
    Entity {
        id: String,
        name: String,
        #[serde(rename = "type")]
        entity_type: String,
        #[serde(default)]
        aliases: Vec<String>,
    },
    Triplet {
        subject: String,
        relation: String,
        object: String,
    },
}

#[derive(Deserialize)]
struct RelationRow {
    id: String,
    template: String,
    bare: String,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    pub entities: BTreeMap<String, EntityRecord>,
    pub relations: BTreeMap<String, RelationTemplate>,
    pub types: Vec<String>,
    /// In dump order.
    pub triplets: Vec<FactTriplet>,
    /// SHA-256 of the dump bytes.
    pub dump_digest: String,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl KnowledgeBase {
    pub fn load(dump: &Path, relations: &Path, types: &Path) -> Result<Self> {
        let relations: Vec<RelationRow> = serde_json::from_str(&read(relations)?)?;
        let types: Vec<String> = serde_json::from_str(&read(types)?)?;
        let relations = relations
            .iter()
            .map(|r| RelationTemplate::new(&r.id, &r.template, &r.bare))
            .collect::<Result<Vec<_>>>()?;
        Self::parse(dump, &read(dump)?, relations, types)
    }

    /// Parse dump text; `origin` is only used in error messages.
    pub fn parse(
        origin: &Path,
        dump: &str,
        relations: Vec<RelationTemplate>,
        types: Vec<String>,
    ) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut kb = KnowledgeBase {
            relations: relations.into_iter().map(|r| (r.id.clone(), r)).collect(),
            types,
            dump_digest: hex::encode(Sha256::digest(dump.as_bytes())),
            ..Default::default()
        };
        let mut pending = Vec::new();
        for (i, line) in dump.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: DumpRecord =
                serde_json::from_str(line).map_err(|e| parse_err(n, e.to_string()))?;
            match record {
                DumpRecord::Entity {
                    id,
                    name,
                    entity_type,
                    aliases,
                } => {
                    if name.trim().is_empty() {
                        return Err(parse_err(n, format!("entity {id} has an empty name")));
                    }
                    if !kb.types.contains(&entity_type) {
                        return Err(parse_err(n, format!("unregistered entity type {entity_type:?}")));
                    }
                    if kb.entities.contains_key(&id) {
                        return Err(parse_err(n, format!("duplicate entity id {id}")));
                    }
                    let record = EntityRecord {
                        aliases: EntityAliasSet::new(name.clone(), aliases),
                        id: id.clone(),
                        name,
                        entity_type,
                    };
                    kb.entities.insert(id, record);
                }
                DumpRecord::Triplet {
                    subject,
                    relation,
                    object,
                } => pending.push((
                    n,
                    FactTriplet {
                        subject,
                        relation,
                        object,
                    },
                )),
            }
        }
        // triplets may precede the entities they mention
        for (n, t) in pending {
            for e in [&t.subject, &t.object] {
                if !kb.entities.contains_key(e) {
                    return Err(parse_err(n, format!("unknown entity {e}")));
                }
            }
            if !kb.relations.contains_key(&t.relation) {
                return Err(parse_err(n, format!("relation {:?} has no template", t.relation)));
            }
            if t.subject == t.object {
                return Err(parse_err(n, format!("self-referential triplet on {}", t.subject)));
            }
            kb.triplets.push(t);
        }
        Ok(kb)
    }

    fn entity(&self, id: &str) -> Result<&EntityRecord> {
        self.entities
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("unknown entity {id}")))
    }

    fn relation(&self, id: &str) -> Result<&RelationTemplate> {
        self.relations
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("relation {id:?} has no template")))
    }

    /// Every composable pair `(a, b)` with `a.object == b.subject`, in dump
    /// order. Pairs that loop back to their start (`e1 == e3`) are skipped.
    pub fn compositions(&self) -> Vec<(&FactTriplet, &FactTriplet)> {
        let mut by_subject: HashMap<&str, Vec<&FactTriplet>> = HashMap::new();
        for t in &self.triplets {
            by_subject.entry(t.subject.as_str()).or_default().push(t);
        }
        let mut out = Vec::new();
        for a in &self.triplets {
            for b in by_subject.get(a.object.as_str()).into_iter().flatten() {
                if b.object != a.subject {
                    out.push((a, *b));
                }
            }
        }
        out
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn question(phrase: &str) -> String {
    format!("{} is", capitalize(phrase))
}

/// Compose `a` then `b` into a query and locate its anchor tokens.
pub fn compose_two_hop(
    kb: &KnowledgeBase,
    tokenizer: &Tokenizer,
    a: &FactTriplet,
    b: &FactTriplet,
) -> Result<TwoHopQuery> {
    if a.object != b.subject {
        return Err(Error::Dataset(format!(
            "cannot compose: object {} of the first fact is not subject {} of the second",
            a.object, b.subject
        )));
    }
    let (e1, e2, e3) = (kb.entity(&a.subject)?, kb.entity(&a.object)?, kb.entity(&b.object)?);
    let (r1, r2) = (kb.relation(&a.relation)?, kb.relation(&b.relation)?);

    let prompt = question(&r2.render(&r1.render(&e1.name)));
    let e1_start = r2.slot_offset() + r1.slot_offset();
    // capitalization can change the byte length of a leading non-ASCII letter
    let e1_start = e1_start + prompt.len() - (r2.render(&r1.render(&e1.name)).len() + 3);
    let e1_end = e1_start + e1.name.len();

    let id = format!("{}/{}/{}/{}/{}", e1.id, r1.id, e2.id, r2.id, e3.id);
    let tokens = tokenizer.encode(&prompt)?;
    let t1 = tokens.token_ending_at(e1_end).ok_or_else(|| {
        Error::Dataset(format!(
            "{id}: the last token of {:?} merges with the following text",
            e1.name
        ))
    })?;
    let t2 = tokens.len() - 1;
    if t1 >= t2 {
        return Err(Error::Dataset(format!("{id}: t1 is not before the last token")));
    }
    Ok(TwoHopQuery {
        id,
        e1: e1.id.clone(),
        r1: r1.id.clone(),
        e2: e2.id.clone(),
        r2: r2.id.clone(),
        e3: e3.id.clone(),
        e1_name: e1.name.clone(),
        e2_aliases: e2.aliases.clone(),
        e3_aliases: e3.aliases.clone(),
        first_hop_prompt: question(&r1.render(&e1.name)),
        second_hop_prompt: question(&r2.render(&e2.name)),
        no_e1_prompt: question(&r2.render(&r1.bare)),
        no_r1_prompt: question(&r2.render(&e1.name)),
        prompt,
        t1,
        t2,
        bridge_type: e2.entity_type.clone(),
    })
}

// ---------------------------------------------------------------------------
// Build
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub dump_sha256: String,
    pub seed: u64,
    pub per_type_cap: Option<usize>,
    pub n_entities: usize,
    pub n_triplets: usize,
    pub n_compositions: usize,
    pub n_queries: usize,
    pub per_type: BTreeMap<String, usize>,
    pub dropped: Vec<Dropped>,
}

#[derive(Debug, Clone)]
pub struct BuiltDataset {
    pub queries: Vec<TwoHopQuery>,
    pub manifest: BuildManifest,
}

/// Compose every pair, drop ill-anchored queries, then optionally cap each
/// bridge type.
pub fn build_dataset(
    kb: &KnowledgeBase,
    tokenizer: &Tokenizer,
    per_type_cap: Option<usize>,
    seed: u64,
) -> Result<BuiltDataset> {
    let pairs = kb.compositions();
    let mut queries = Vec::new();
    let mut dropped = Vec::new();
    for (a, b) in &pairs {
        match compose_two_hop(kb, tokenizer, a, b) {
            Ok(q) => queries.push(q),
            Err(Error::Dataset(reason)) => dropped.push(Dropped {
                id: format!("{}/{}/{}/{}/{}", a.subject, a.relation, a.object, b.relation, b.object),
                reason,
            }),
            Err(e) => return Err(e),
        }
    }
    if let Some(cap) = per_type_cap {
        queries = balanced_sample(&queries, cap, seed)?;
    }
    let mut per_type = BTreeMap::new();
    for q in &queries {
        *per_type.entry(q.bridge_type.clone()).or_insert(0) += 1;
    }
    let manifest = BuildManifest {
        dump_sha256: kb.dump_digest.clone(),
        seed,
        per_type_cap,
        n_entities: kb.entities.len(),
        n_triplets: kb.triplets.len(),
        n_compositions: pairs.len(),
        n_queries: queries.len(),
        per_type,
        dropped,
    };
    Ok(BuiltDataset { queries, manifest })
}

/// At most `cap` queries per bridge type, chosen reproducibly from `seed`.
/// Survivors keep their input order.
pub fn balanced_sample(queries: &[TwoHopQuery], cap: usize, seed: u64) -> Result<Vec<TwoHopQuery>> {
    if cap == 0 {
        return Err(Error::Dataset("per-type cap must be at least 1".into()));
    }
    let mut by_type: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        by_type.entry(q.bridge_type.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for idx in by_type.values() {
        if idx.len() <= cap {
            keep.extend_from_slice(idx);
        } else {
            keep.extend(sample(&mut rng, idx.len(), cap).into_iter().map(|j| idx[j]));
        }
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| queries[i].clone()).collect())
}

// ---------------------------------------------------------------------------
// Model-dependent filtering
// ---------------------------------------------------------------------------

/// Memoized greedy answers of one model.
pub struct AnswerJudge<'a> {
    engine: &'a Engine,
    cache: Mutex<HashMap<String, String>>,
}

impl<'a> AnswerJudge<'a> {
    pub fn new(engine: &'a Engine) -> Self {
        AnswerJudge {
            engine,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn answer(&self, prompt: &str) -> Result<String> {
        if let Some(a) = self.cache.lock().expect("not poisoned").get(prompt) {
            return Ok(a.clone());
        }
        let a = self.engine.greedy(prompt, ANSWER_MAX_NEW_TOKENS)?;
        self.cache
            .lock()
            .expect("not poisoned")
            .insert(prompt.to_owned(), a.clone());
        Ok(a)
    }

    pub fn answers_with(&self, prompt: &str, aliases: &EntityAliasSet) -> Result<bool> {
        Ok(entity_match(&[self.answer(prompt)?], aliases))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutReason {
    /// e3 is produced even without e1.
    Popularity,
    /// e3 is produced even without r1.
    Correlation,
}

/// `None` keeps the query.
pub fn shortcut_filter(judge: &AnswerJudge<'_>, query: &TwoHopQuery) -> Result<Option<ShortcutReason>> {
    if judge.answers_with(&query.no_e1_prompt, &query.e3_aliases)? {
        return Ok(Some(ShortcutReason::Popularity));
    }
    if judge.answers_with(&query.no_r1_prompt, &query.e3_aliases)? {
        return Ok(Some(ShortcutReason::Correlation));
    }
    Ok(None)
}

pub fn is_correct_case(judge: &AnswerJudge<'_>, q: &TwoHopQuery) -> Result<bool> {
    Ok(judge.answers_with(&q.prompt, &q.e3_aliases)?
        && judge.answers_with(&q.first_hop_prompt, &q.e2_aliases)?)
}

pub fn is_incorrect_case(judge: &AnswerJudge<'_>, q: &TwoHopQuery) -> Result<bool> {
    Ok(judge.answers_with(&q.first_hop_prompt, &q.e2_aliases)?
        && judge.answers_with(&q.second_hop_prompt, &q.e3_aliases)?
        && !judge.answers_with(&q.prompt, &q.e3_aliases)?)
}

fn select(
    queries: &[TwoHopQuery],
    pred: impl Fn(&TwoHopQuery) -> Result<bool> + Sync,
) -> Result<Vec<TwoHopQuery>> {
    let flags = queries.par_iter().map(&pred).collect::<Result<Vec<_>>>()?;
    Ok(queries
        .iter()
        .zip(flags)
        .filter(|(_, f)| *f)
        .map(|(q, _)| q.clone())
        .collect())
}

pub fn subset_correct(judge: &AnswerJudge<'_>, queries: &[TwoHopQuery]) -> Result<Vec<TwoHopQuery>> {
    select(queries, |q| is_correct_case(judge, q))
}

pub fn subset_incorrect(
    judge: &AnswerJudge<'_>,
    queries: &[TwoHopQuery],
) -> Result<Vec<TwoHopQuery>> {
    select(queries, |q| is_incorrect_case(judge, q))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterManifest {
    pub model: String,
    pub n_input: usize,
    pub n_kept: usize,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub dropped: Vec<Dropped>,
}

#[derive(Debug, Clone)]
pub struct FilteredDataset {
    pub kept: Vec<TwoHopQuery>,
    pub correct: Vec<TwoHopQuery>,
    pub incorrect: Vec<TwoHopQuery>,
    pub manifest: FilterManifest,
}

/// Shortcut filtering followed by the correct/incorrect split.
pub fn filter_dataset(engine: &Engine, model_name: &str, queries: &[TwoHopQuery]) -> Result<FilteredDataset> {
    let judge = AnswerJudge::new(engine);
    let reasons = queries
        .par_iter()
        .map(|q| shortcut_filter(&judge, q))
        .collect::<Result<Vec<_>>>()?;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (q, r) in queries.iter().zip(reasons) {
        match r {
            None => kept.push(q.clone()),
            Some(reason) => dropped.push(Dropped {
                id: q.id.clone(),
                reason: serde_json::to_value(reason)?
                    .as_str()
                    .unwrap_or_default()
                    .to_owned(),
            }),
        }
    }
    let correct = subset_correct(&judge, &kept)?;
    let incorrect = subset_incorrect(&judge, &kept)?;
    let manifest = FilterManifest {
        model: model_name.to_owned(),
        n_input: queries.len(),
        n_kept: kept.len(),
        n_correct: correct.len(),
        n_incorrect: incorrect.len(),
        dropped,
    };
    Ok(FilteredDataset {
        kept,
        correct,
        incorrect,
        manifest,
    })
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

pub fn queries_to_jsonl(queries: &[TwoHopQuery]) -> String {
    let mut out = String::new();
    for q in queries {
        out.push_str(&serde_json::to_string(q).expect("plain data"));
        out.push('\n');
    }
    out
}

pub fn read_queries(path: &Path) -> Result<Vec<TwoHopQuery>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write `queries.jsonl` and `manifest.json` into `dir`.
pub fn write_built(dir: &Path, built: &BuiltDataset) -> Result<(PathBuf, PathBuf)> {
    let q = dir.join("queries.jsonl");
    let m = dir.join("manifest.json");
    write_file(&q, &queries_to_jsonl(&built.queries))?;
    write_file(&m, &(serde_json::to_string_pretty(&built.manifest)? + "\n"))?;
    Ok((q, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb(dump: &str) -> Result<KnowledgeBase> {
        let rel = vec![
            RelationTemplate::new("performer", "the performer of {}", "the performer").unwrap(),
            RelationTemplate::new("spouse", "the spouse of {}", "the spouse").unwrap(),
        ];
        KnowledgeBase::parse(
            Path::new("dump.jsonl"),
            dump,
            rel,
            vec!["song".into(), "person".into()],
        )
    }

    const DUMP: &str = r#"{"kind":"entity","id":"Q1","name":"Imagine","type":"song","aliases":["Imagine"]}
{"kind":"entity","id":"Q2","name":"John Lennon","type":"person","aliases":["John Lennon","Lennon"]}
{"kind":"entity","id":"Q3","name":"Yoko Ono","type":"person"}
{"kind":"triplet","subject":"Q1","relation":"performer","object":"Q2"}
{"kind":"triplet","subject":"Q2","relation":"spouse","object":"Q3"}
{"kind":"triplet","subject":"Q3","relation":"spouse","object":"Q2"}
"#;

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = format!("{DUMP}{{\"kind\":\"triplet\",\"subject\":\"Q1\"}}\n");
        match kb(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
        let unknown = format!("{DUMP}{{\"kind\":\"triplet\",\"subject\":\"Q1\",\"relation\":\"mother\",\"object\":\"Q2\"}}\n");
        assert!(matches!(kb(&unknown), Err(Error::Parse { line: 7, .. })));
    }

    #[test]
    fn compositions_skip_cycles() {
        let kb = kb(DUMP).unwrap();
        let pairs = kb.compositions();
        // Q1->Q2->Q3 and Q3->Q2->? (Q2 spouse Q3 loops back)
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].0.subject, "Q1");
    }

    #[test]
    fn template_needs_one_slot() {
        assert!(RelationTemplate::new("x", "the x of", "the x").is_err());
        assert!(RelationTemplate::new("x", "{} {}", "the x").is_err());
    }

    #[test]
    fn capitalize_handles_unicode() {
        assert_eq!(capitalize("ébauche"), "Ébauche");
        assert_eq!(question("the spouse of X"), "The spouse of X is");
    }

    fn query(id: &str, ty: &str) -> TwoHopQuery {
        TwoHopQuery {
            id: id.into(),
            e1: String::new(),
            r1: String::new(),
            e2: String::new(),
            r2: String::new(),
            e3: String::new(),
            e1_name: String::new(),
            e2_aliases: EntityAliasSet::single("a"),
            e3_aliases: EntityAliasSet::single("b"),
            prompt: String::new(),
            first_hop_prompt: String::new(),
            second_hop_prompt: String::new(),
            no_e1_prompt: String::new(),
            no_r1_prompt: String::new(),
            t1: 0,
            t2: 1,
            bridge_type: ty.into(),
        }
    }

    #[test]
    fn balanced_sample_caps_each_type() {
        let mut qs: Vec<_> = (0..37).map(|i| query(&format!("p{i}"), "person")).collect();
        qs.extend((0..150).map(|i| query(&format!("c{i}"), "city")));
        let out = balanced_sample(&qs, 100, 0).unwrap();
        assert_eq!(out.iter().filter(|q| q.bridge_type == "person").count(), 37);
        assert_eq!(out.iter().filter(|q| q.bridge_type == "city").count(), 100);
        assert_eq!(out, balanced_sample(&qs, 100, 0).unwrap());
        let one = balanced_sample(&qs, 1, 5).unwrap();
        assert_eq!(one.len(), 2);
        assert!(balanced_sample(&qs, 0, 0).is_err());
    }
}
