// SPDX-License-Identifier: MIT OR Apache-2.0

//! The four analyses and their raw records.
//!
//! Runners only emit [`RawRecord`]s. Every table, grid and stage statistic is
//! recomputed from those records by [`crate::report`], so a run can be
//! re-rendered without the model.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{TwoHopQuery, ANSWER_MAX_NEW_TOKENS};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::intervention::{
    make_knockout_plan, sliding_windows, InterventionPlan, KnockoutSpec,
};
use crate::model::DecodeParams;
use crate::probes::{entity_match, top_token, PatchscopeTask};
use crate::trace::{CaptureSpec, SublayerKind};

pub const DEFAULT_WINDOW_LEN: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Correct,
    Incorrect,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Correct => "correct",
            Subset::Incorrect => "incorrect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    T1,
    T2,
}

impl Anchor {
    pub fn as_str(self) -> &'static str {
        match self {
            Anchor::T1 => "t1",
            Anchor::T2 => "t2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    FirstHop,
    SecondHop,
    Propagation,
    Backpatch,
}

impl Analysis {
    pub const ALL: [Analysis; 4] = [
        Analysis::FirstHop,
        Analysis::SecondHop,
        Analysis::Propagation,
        Analysis::Backpatch,
    ];

    pub fn parse(id: &str) -> Option<Vec<Analysis>> {
        Some(match id {
            "first-hop" => vec![Analysis::FirstHop],
            "second-hop" => vec![Analysis::SecondHop],
            "propagation" => vec![Analysis::Propagation],
            "backpatch" => vec![Analysis::Backpatch],
            "all" => Analysis::ALL.to_vec(),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub analyses: Vec<Analysis>,
    pub seed: u64,
    pub window_len: usize,
    /// Sampling parameters for Patchscope generations; the seed is replaced
    /// per cell.
    pub probe_params: DecodeParams,
    /// Evaluate every grid cell. When off, scans stop as soon as the
    /// per-query statistics are settled and no heat-maps can be drawn.
    pub full_grids: bool,
}

impl RunSettings {
    pub fn new(analyses: Vec<Analysis>, seed: u64) -> Self {
        RunSettings {
            analyses,
            seed,
            window_len: DEFAULT_WINDOW_LEN,
            probe_params: PatchscopeTask::default_params(seed),
            full_grids: true,
        }
    }

    fn has(&self, a: Analysis) -> bool {
        self.analyses.contains(&a)
    }
}

// ---------------------------------------------------------------------------
// Raw records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub model: String,
    pub n_layers: usize,
    pub settings: RunSettings,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryInfo {
    pub subset: Subset,
    pub query_id: String,
    pub bridge_type: String,
    pub t1: usize,
    pub t2: usize,
    /// Clean greedy continuation.
    pub answer: String,
    pub answer_first_token: u32,
    pub e2_first_token: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchscopeCell {
    pub subset: Subset,
    pub query_id: String,
    pub anchor: Anchor,
    pub source_layer: usize,
    pub target_layer: usize,
    pub generations: Vec<String>,
    pub matched_e2: bool,
    pub matched_e3: bool,
}

/// Top-1 projected token of one sublayer update at t2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionCell {
    pub subset: Subset,
    pub query_id: String,
    pub kind: SublayerKind,
    pub layer: usize,
    pub top_token: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnockoutCell {
    pub subset: Subset,
    pub query_id: String,
    pub window_start: usize,
    pub window_len: usize,
    pub output: String,
    /// Correct cases: the answer is lost. Incorrect cases: the text changed.
    pub critical: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackpatchCell {
    pub subset: Subset,
    pub query_id: String,
    pub anchor: Anchor,
    pub source_layer: usize,
    pub target_layer: usize,
    pub output: String,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub subset: Subset,
    pub query_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum RawRecord {
    Run(RunInfo),
    Query(QueryInfo),
    Patchscope(PatchscopeCell),
    Projection(ProjectionCell),
    Knockout(KnockoutCell),
    Backpatch(BackpatchCell),
    Failure(QueryFailure),
}

pub fn records_to_jsonl(records: &[RawRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("plain data"));
        out.push('\n');
    }
    out
}

pub fn records_from_jsonl(path: &std::path::Path, text: &str) -> Result<Vec<RawRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

/// Stable per-cell seed.
pub fn cell_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn config_hash(engine: &Engine, settings: &RunSettings) -> String {
    let text = serde_json::to_string(&(engine.model.config(), settings)).expect("plain data");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// `(ℓ_s, ℓ_t)` for every block input pair with `ℓ_t < ℓ_s`: `C(L, 2)` pairs.
pub fn backpatch_pairs(n_layers: usize) -> Vec<(usize, usize)> {
    (1..n_layers)
        .flat_map(|s| (0..s).map(move |t| (s, t)))
        .collect()
}

pub struct Runner<'a> {
    engine: &'a Engine,
    task: PatchscopeTask,
    settings: RunSettings,
}

struct QueryRun<'r, 'a> {
    runner: &'r Runner<'a>,
    query: &'r TwoHopQuery,
    subset: Subset,
    tokens: Vec<u32>,
    out: Vec<RawRecord>,
}

impl<'a> Runner<'a> {
    pub fn new(engine: &'a Engine, settings: RunSettings) -> Result<Self> {
        if settings.window_len == 0 {
            return Err(Error::Config("knockout window length must be at least 1".into()));
        }
        let task = PatchscopeTask::new(engine, settings.probe_params)?;
        Ok(Runner {
            engine,
            task,
            settings,
        })
    }

    pub fn run_info(&self, model: &str) -> RunInfo {
        RunInfo {
            model: model.to_owned(),
            n_layers: self.engine.model.n_layers(),
            settings: self.settings.clone(),
            config_hash: config_hash(self.engine, &self.settings),
        }
    }

    /// Run every configured analysis on every query. Records come back in
    /// query order regardless of scheduling.
    pub fn run(&self, subset: Subset, queries: &[TwoHopQuery]) -> Vec<RawRecord> {
        queries
            .par_iter()
            .map(|q| self.run_query(subset, q))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    }

    pub fn run_query(&self, subset: Subset, query: &TwoHopQuery) -> Vec<RawRecord> {
        let mut qr = QueryRun {
            runner: self,
            query,
            subset,
            tokens: Vec::new(),
            out: Vec::new(),
        };
        match qr.execute() {
            Ok(()) => qr.out,
            Err(e) => {
                let mut out = qr.out;
                out.push(RawRecord::Failure(QueryFailure {
                    subset,
                    query_id: query.id.clone(),
                    message: e.to_string(),
                }));
                out
            }
        }
    }
}

impl QueryRun<'_, '_> {
    fn settings(&self) -> &RunSettings {
        &self.runner.settings
    }

    fn execute(&mut self) -> Result<()> {
        let q = self.query;
        let engine = self.runner.engine;
        let model = &engine.model;
        self.tokens = engine.encode(&q.prompt)?.ids;
        if self.tokens.len() != q.t2 + 1 || q.t1 >= q.t2 {
            return Err(Error::Dataset(format!(
                "anchors t1={} t2={} do not fit the {}-token prompt",
                q.t1,
                q.t2,
                self.tokens.len()
            )));
        }
        let clean = model.generate(
            &self.tokens,
            &DecodeParams::greedy(ANSWER_MAX_NEW_TOKENS),
            &InterventionPlan::empty(),
        )?;
        let answer_ids = &clean[0];
        let answer = engine.decode_generated(answer_ids)?;
        self.out.push(RawRecord::Query(QueryInfo {
            subset: self.subset,
            query_id: q.id.clone(),
            bridge_type: q.bridge_type.clone(),
            t1: q.t1,
            t2: q.t2,
            answer: answer.clone(),
            answer_first_token: answer_ids[0],
            e2_first_token: engine.first_token_of(&q.e2_aliases.canonical)?,
        }));

        let s = self.settings().clone();
        if s.has(Analysis::FirstHop) {
            self.patchscope_grid(Anchor::T1, true, false)?;
        }
        let need_e3 = s.has(Analysis::SecondHop);
        let need_e2 = s.has(Analysis::Propagation);
        if need_e2 || need_e3 {
            self.patchscope_grid(Anchor::T2, need_e2, need_e3)?;
            self.projections()?;
        }
        if need_e2 {
            self.knockouts(&answer)?;
        }
        if s.has(Analysis::Backpatch) {
            self.backpatch(Anchor::T1)?;
            self.backpatch(Anchor::T2)?;
        }
        Ok(())
    }

    fn position(&self, anchor: Anchor) -> usize {
        match anchor {
            Anchor::T1 => self.query.t1,
            Anchor::T2 => self.query.t2,
        }
    }

    /// Patchscope every (source, target) pair over `[0, L]²` at `anchor`.
    fn patchscope_grid(&mut self, anchor: Anchor, want_e2: bool, want_e3: bool) -> Result<()> {
        let engine = self.runner.engine;
        let q = self.query;
        let n_layers = engine.model.n_layers();
        let position = self.position(anchor);
        let trace = engine.model.forward(
            &self.tokens,
            &InterventionPlan::empty(),
            &CaptureSpec::residuals(),
        )?;
        let mut found_e2 = !want_e2;
        let mut found_e3 = !want_e3;
        for source in 0..=n_layers {
            let v = trace.residual(source, position)?.to_vec();
            for target in 0..=n_layers {
                if !self.settings().full_grids && found_e2 && found_e3 {
                    return Ok(());
                }
                let seed = cell_seed(
                    self.settings().seed,
                    &[&q.id, anchor.as_str(), &source.to_string(), &target.to_string()],
                );
                let generations = self.runner.task.generate(engine, &v, target, seed)?;
                let matched_e2 = entity_match(&generations, &q.e2_aliases);
                let matched_e3 = entity_match(&generations, &q.e3_aliases);
                found_e2 |= matched_e2;
                found_e3 |= matched_e3;
                self.out.push(RawRecord::Patchscope(PatchscopeCell {
                    subset: self.subset,
                    query_id: q.id.clone(),
                    anchor,
                    source_layer: source,
                    target_layer: target,
                    generations,
                    matched_e2,
                    matched_e3,
                }));
            }
        }
        Ok(())
    }

    fn projections(&mut self) -> Result<()> {
        let model = &self.runner.engine.model;
        let trace = model.forward(
            &self.tokens,
            &InterventionPlan::empty(),
            &CaptureSpec::streams(),
        )?;
        for kind in SublayerKind::ALL {
            for layer in 0..trace.n_update_layers() {
                let u = trace.sublayer_update(kind, layer, self.query.t2)?;
                self.out.push(RawRecord::Projection(ProjectionCell {
                    subset: self.subset,
                    query_id: self.query.id.clone(),
                    kind,
                    layer,
                    top_token: top_token(model, &u.to_vec())?,
                }));
            }
        }
        Ok(())
    }

    fn knockouts(&mut self, clean_answer: &str) -> Result<()> {
        let engine = self.runner.engine;
        let q = self.query;
        let config = engine.model.config();
        let window_len = self.settings().window_len;
        for window in sliding_windows(config.n_layers, window_len) {
            let plan = make_knockout_plan(
                &KnockoutSpec {
                    query: q.t2,
                    key: q.t1,
                    window,
                    head: None,
                },
                config,
            )?;
            let output = engine
                .generate_ids(&self.tokens, &DecodeParams::greedy(ANSWER_MAX_NEW_TOKENS), &plan)?
                .remove(0);
            let critical = match self.subset {
                Subset::Correct => !entity_match(&[output.clone()], &q.e3_aliases),
                Subset::Incorrect => output != clean_answer,
            };
            self.out.push(RawRecord::Knockout(KnockoutCell {
                subset: self.subset,
                query_id: q.id.clone(),
                window_start: window.start,
                window_len,
                output,
                critical,
            }));
        }
        Ok(())
    }

    fn backpatch(&mut self, anchor: Anchor) -> Result<()> {
        let engine = self.runner.engine;
        let model = &engine.model;
        let q = self.query;
        let position = self.position(anchor);
        let clean = model.forward(
            &self.tokens,
            &InterventionPlan::empty(),
            &CaptureSpec::residuals(),
        )?;
        let prefix = model.prefill(&self.tokens[..position], &InterventionPlan::empty())?;
        let params = DecodeParams::greedy(ANSWER_MAX_NEW_TOKENS);
        for (source, target) in backpatch_pairs(model.n_layers()) {
            let plan = InterventionPlan::empty().with_overwrite(
                target,
                position,
                clean.residual(source, position)?.to_vec(),
            );
            let state = model.extend(&prefix, &self.tokens[position..], &plan)?;
            let ids = model.decode(&state, &params)?.remove(0);
            let output = engine.decode_generated(&ids)?;
            let success = entity_match(&[output.clone()], &q.e3_aliases);
            self.out.push(RawRecord::Backpatch(BackpatchCell {
                subset: self.subset,
                query_id: q.id.clone(),
                anchor,
                source_layer: source,
                target_layer: target,
                output,
                success,
            }));
            if success && !self.settings().full_grids {
                break;
            }
        }
        Ok(())
    }
}

/// Convenience: run both subsets and prepend the run header.
pub fn run_experiment(
    engine: &Engine,
    model_name: &str,
    settings: RunSettings,
    subsets: &BTreeMap<Subset, Vec<TwoHopQuery>>,
) -> Result<Vec<RawRecord>> {
    let runner = Runner::new(engine, settings)?;
    let mut records = vec![RawRecord::Run(runner.run_info(model_name))];
    for (subset, queries) in subsets {
        records.extend(runner.run(*subset, queries));
    }
    Ok(records)
}
