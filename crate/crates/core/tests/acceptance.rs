// SPDX-License-Identifier: MIT OR Apache-2.0

//! One line per acceptance criterion. Runs as a plain binary so every
//! criterion reports even when an earlier one fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hopscope::dataset::{
    build_dataset, filter_dataset, write_built, BuiltDataset, FilteredDataset, KnowledgeBase,
    TwoHopQuery,
};
use hopscope::experiment::{
    backpatch_pairs, records_to_jsonl, Analysis, RawRecord, Runner, RunSettings, Subset,
};
use hopscope::model::argmax;
use hopscope::probes::{top_token, IDENTITY_PROMPT};
use hopscope::render::{render_dir, RECORDS_FILE};
use hopscope::report::{build_report, Normalization};
use hopscope::{
    BackPatchSpec, CaptureSpec, DecodeParams, EdgeBlock, Engine, InterventionPlan, Model,
    PatchscopeTask,
};

use common::{fixtures, golden_logits, gpt2_engine, llama_model, prompts, rel_err};

type Outcome = Result<String, String>;

/// Non-shortcut compositions that must survive filtering, as (e1, r1, r2).
const KEPT_FIXTURES: [(&str, &str, &str); 2] = [
    ("Imagine", "performer", "birthplace"),
    ("Ulysses", "author", "birthplace"),
];

/// Compositions crafted so that an ablated prompt already yields e3.
const SHORTCUT_FIXTURES: [(&str, &str, &str); 2] = [
    ("Imagine", "performer", "spouse"),
    ("Dracula", "author", "birthplace"),
];

const DESK_QUERIES: usize = 10;

struct Ctx {
    engine: Engine,
    built: BuiltDataset,
    filtered: FilteredDataset,
}

fn ctx() -> &'static Ctx {
    static CTX: OnceLock<Ctx> = OnceLock::new();
    CTX.get_or_init(|| {
        let engine = gpt2_engine();
        let built = build_dataset(&load_kb(), &engine.tokenizer, None, 0).expect("dataset");
        let filtered = filter_dataset(&engine, "gpt2-facts", &built.queries).expect("filter");
        Ctx {
            engine,
            built,
            filtered,
        }
    })
}

fn load_kb() -> KnowledgeBase {
    let kb = fixtures().join("kb");
    KnowledgeBase::load(
        &kb.join("dump.jsonl"),
        &kb.join("relations.json"),
        &kb.join("types.json"),
    )
    .expect("fixture knowledge base")
}

fn desk_queries() -> Result<Vec<TwoHopQuery>, String> {
    let correct = &ctx().filtered.correct;
    if correct.len() < DESK_QUERIES {
        return Err(format!(
            "only {} correct cases in the fixture, need {DESK_QUERIES}",
            correct.len()
        ));
    }
    Ok(correct[..DESK_QUERIES].to_vec())
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn identity_patch() -> Outcome {
    let start = Instant::now();
    let engine = &ctx().engine;
    let model = &engine.model;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for p in prompts().iter().take(50) {
        let ids = engine.encode(p).map_err(err)?.ids;
        let clean = model
            .forward(&ids, &InterventionPlan::empty(), &CaptureSpec::residuals())
            .map_err(err)?;
        for _ in 0..10 {
            let layer = rng.random_range(0..=model.n_layers());
            let pos = rng.random_range(0..ids.len());
            let v = clean.residual(layer, pos).map_err(err)?.to_vec();
            let plan = InterventionPlan::empty().with_overwrite(layer, pos, v);
            let patched = model.forward(&ids, &plan, &CaptureSpec::none()).map_err(err)?;
            for (a, b) in patched.logits.iter().zip(clean.logits.iter()) {
                ensure((a - b).abs() <= 1e-5 * b.abs(), || {
                    format!("{p:?} layer {layer} position {pos}: {a} vs {b}")
                })?;
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(checked == 500, || format!("only {checked} patches checked"))?;
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{checked} self-patches unchanged in {secs:.1}s"))
}

fn golden_parity() -> Outcome {
    let mut worst = Vec::new();
    let llama = llama_model();
    for (family, model) in [("gpt2", &ctx().engine.model), ("llama", &llama)] {
        let golden = golden_logits(family);
        ensure(golden.len() == 20, || format!("{family}: {} golden prompts", golden.len()))?;
        let mut max_err = 0.0f64;
        for (i, (ids, _, want)) in golden.iter().enumerate() {
            let t = model
                .forward(ids, &InterventionPlan::empty(), &CaptureSpec::none())
                .map_err(err)?;
            let got: Vec<f64> = t.logits.iter().map(|&v| v as f64).collect();
            ensure(got.len() == want.len(), || format!("{family} prompt {i}: shape"))?;
            let e = rel_err(&got, want);
            ensure(e <= 1e-4, || format!("{family} prompt {i}: relative error {e:e}"))?;
            max_err = max_err.max(e);
        }
        worst.push(format!("{family} max {max_err:.1e}"));
    }
    Ok(format!("20 prompts per family within 1e-4 ({})", worst.join(", ")))
}

fn softmax_oracle(scores: &[f32], allowed: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(allowed)
        .filter(|(_, a)| **a)
        .map(|(s, _)| *s as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; scores.len()];
    }
    let e: Vec<f64> = scores
        .iter()
        .zip(allowed)
        .map(|(s, a)| if *a { (*s as f64 - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn knockout() -> Outcome {
    let engine = &ctx().engine;
    let model = &engine.model;
    let prompts = prompts();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = &prompts[rng.random_range(0..prompts.len())];
        let ids = engine.encode(p).map_err(err)?.ids;
        let layer = rng.random_range(0..model.n_layers());
        let query = rng.random_range(1..ids.len());
        let key = rng.random_range(0..=query);
        let plan = InterventionPlan::empty().with_block(EdgeBlock {
            layer,
            head: None,
            query,
            key,
        });
        let t = model.forward(&ids, &plan, &CaptureSpec::everything()).map_err(err)?;
        let (scores, weights) = (&t.attention_scores[layer], &t.attention_weights[layer]);
        for h in 0..model.config().n_heads {
            ensure(weights[[h, query, key]] == 0.0, || {
                format!("layer {layer} head {h} ({query}->{key}) kept weight {}", weights[[h, query, key]])
            })?;
            let allowed: Vec<bool> = (0..ids.len()).map(|k| k <= query && k != key).collect();
            let row: Vec<f32> = (0..ids.len()).map(|k| scores[[h, query, k]]).collect();
            let want = softmax_oracle(&row, &allowed);
            for (k, w) in want.iter().enumerate() {
                let d = (weights[[h, query, k]] as f64 - w).abs();
                worst = worst.max(d);
                ensure(d <= 1e-6, || format!("layer {layer} head {h} key {k}: off by {d:e}"))?;
            }
        }
    }
    Ok(format!("100 triples, blocked weights 0, max deviation {worst:.1e}"))
}

fn substitution() -> Outcome {
    let engine = &ctx().engine;
    let tok = &engine.tokenizer;
    let words: Vec<String> = (0..tok.vocab_size() as u32)
        .filter_map(|id| tok.token_str(id))
        .filter_map(|s| s.strip_prefix('Ġ'))
        .filter(|w| w.len() >= 3 && w.chars().all(|c| c.is_ascii_alphabetic()))
        .map(str::to_owned)
        .collect();
    ensure(words.len() >= 30, || format!("only {} candidate words", words.len()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let picked: Vec<&String> = sample(&mut rng, words.len(), 30)
        .into_iter()
        .map(|i| &words[i])
        .collect();
    let params = DecodeParams::greedy(20);
    let task = PatchscopeTask::new(engine, params).map_err(err)?;
    let stem = IDENTITY_PROMPT.strip_suffix(" x").ok_or("identity prompt must end in \" x\"")?;
    let mut same = 0;
    let mut first_miss = None;
    for w in &picked {
        let text = format!("{stem} {w}");
        let ids = engine.encode(&text).map_err(err)?.ids;
        ensure(ids.len() == task.tokens.len(), || format!("{w:?} is not a single token here"))?;
        let clean = engine
            .model
            .forward(&ids, &InterventionPlan::empty(), &CaptureSpec::residuals())
            .map_err(err)?;
        let v = clean.residual(0, task.placeholder).map_err(err)?.to_vec();
        let patched = task.generate(engine, &v, 0, 0).map_err(err)?.remove(0);
        let textual = engine.greedy(&text, 20).map_err(err)?;
        if patched == textual {
            same += 1;
        } else if first_miss.is_none() {
            first_miss = Some(format!("{w}: {patched:?} vs {textual:?}"));
        }
    }
    ensure(same == 30, || format!("{same}/30 identical; {}", first_miss.unwrap_or_default()))?;
    Ok("30/30 layer-0 patches generate the substituted text".into())
}

fn projection() -> Outcome {
    let engine = &ctx().engine;
    let model: &Model = &engine.model;
    let l = model.n_layers();
    let mut agree = 0;
    let ps = prompts();
    for p in &ps {
        let ids = engine.encode(p).map_err(err)?.ids;
        let t = model
            .forward(&ids, &InterventionPlan::empty(), &CaptureSpec::residuals())
            .map_err(err)?;
        let last = ids.len() - 1;
        let v = t.residual(l, last).map_err(err)?.to_vec();
        let greedy = argmax(t.last_logits().as_slice().expect("contiguous"));
        agree += (top_token(model, &v).map_err(err)? == greedy) as usize;
    }
    ensure(ps.len() == 100 && agree == 100, || format!("{agree}/{} agree", ps.len()))?;
    Ok("100/100 final-stream projections equal the greedy token".into())
}

fn backpatch() -> Outcome {
    let engine = &ctx().engine;
    let l = engine.model.n_layers();
    let pairs = backpatch_pairs(l);
    ensure(pairs.len() == l * (l - 1) / 2, || format!("{} pairs for L={l}", pairs.len()))?;
    ensure(pairs.iter().all(|&(s, t)| t < s), || "non-lower pair".into())?;
    let distinct: BTreeSet<_> = pairs.iter().collect();
    ensure(distinct.len() == pairs.len(), || "duplicate pair".into())?;
    for s in 0..l {
        ensure(BackPatchSpec::new("q", 0, s, s).is_err(), || format!("({s},{s}) accepted"))?;
        ensure(BackPatchSpec::new("q", 0, s, s + 1).is_err(), || {
            format!("({s},{}) accepted", s + 1)
        })?;
    }
    let queries = desk_queries()?;
    let mut settings = RunSettings::new(vec![Analysis::Backpatch], 0);
    settings.full_grids = false;
    let runner = Runner::new(engine, settings).map_err(err)?;
    let records = runner.run(Subset::Correct, &queries);
    let mut hit: BTreeMap<String, bool> = queries.iter().map(|q| (q.id.clone(), false)).collect();
    for r in &records {
        match r {
            RawRecord::Backpatch(c) if c.success => {
                hit.insert(c.query_id.clone(), true);
            }
            RawRecord::Failure(f) => return Err(format!("{}: {}", f.query_id, f.message)),
            _ => {}
        }
    }
    let ok = hit.values().filter(|&&h| h).count();
    ensure(ok == DESK_QUERIES, || format!("any-pair success {ok}/{DESK_QUERIES}"))?;
    Ok(format!(
        "C({l},2) = {} pairs, lower-or-equal targets rejected, any-pair success {ok}/{DESK_QUERIES}",
        pairs.len()
    ))
}

fn matches_fixture(q: &TwoHopQuery, f: &(&str, &str, &str)) -> bool {
    q.e1_name == f.0 && q.r1 == f.1 && q.r2 == f.2
}

fn dataset() -> Outcome {
    let c = ctx();
    let dir = tempfile::tempdir().map_err(err)?;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let built = build_dataset(&load_kb(), &c.engine.tokenizer, None, 0).map_err(err)?;
        let (q, m) = write_built(&dir.path().join(run), &built).map_err(err)?;
        files.push((std::fs::read(q).map_err(err)?, std::fs::read(m).map_err(err)?));
    }
    ensure(files[0] == files[1], || "rebuilt query file or manifest differs".into())?;
    let capped_a = build_dataset(&load_kb(), &c.engine.tokenizer, Some(5), 9).map_err(err)?;
    let capped_b = build_dataset(&load_kb(), &c.engine.tokenizer, Some(5), 9).map_err(err)?;
    ensure(capped_a.queries == capped_b.queries, || "capped sample differs".into())?;

    let dropped: BTreeSet<&str> = c.filtered.manifest.dropped.iter().map(|d| d.id.as_str()).collect();
    for f in &SHORTCUT_FIXTURES {
        let q = c.built.queries.iter().find(|q| matches_fixture(q, f));
        let q = q.ok_or_else(|| format!("shortcut fixture {f:?} not built"))?;
        ensure(dropped.contains(q.id.as_str()), || format!("shortcut fixture {f:?} kept"))?;
    }
    for f in &KEPT_FIXTURES {
        ensure(c.filtered.kept.iter().any(|q| matches_fixture(q, f)), || {
            format!("fixture {f:?} was dropped")
        })?;
    }
    let correct: BTreeSet<&str> = c.filtered.correct.iter().map(|q| q.id.as_str()).collect();
    let overlap = c.filtered.incorrect.iter().filter(|q| correct.contains(q.id.as_str())).count();
    ensure(overlap == 0, || format!("{overlap} queries in both subsets"))?;
    Ok(format!(
        "{} queries byte-identical across rebuilds, 2 shortcuts dropped, 2 controls kept, {} correct / {} incorrect disjoint",
        c.built.queries.len(),
        c.filtered.correct.len(),
        c.filtered.incorrect.len()
    ))
}

fn derived_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != RECORDS_FILE {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn report_reproducibility() -> Outcome {
    let engine = &ctx().engine;
    let queries = desk_queries()?;
    let mut settings = RunSettings::new(Analysis::ALL.to_vec(), 0);
    settings.probe_params = DecodeParams::sampled(1, 1.0, 0, 8);
    let runner = Runner::new(engine, settings).map_err(err)?;
    let mut records = vec![RawRecord::Run(runner.run_info("gpt2-facts"))];
    records.extend(runner.run(Subset::Correct, &queries[..2]));
    let dir = tempfile::tempdir().map_err(err)?;
    std::fs::write(dir.path().join(RECORDS_FILE), records_to_jsonl(&records)).map_err(err)?;
    render_dir(dir.path(), dir.path(), Normalization::OfSuccesses).map_err(err)?;
    let first = derived_files(dir.path());
    for sub in ["grids", "figures"] {
        std::fs::remove_dir_all(dir.path().join(sub)).map_err(err)?;
    }
    for name in first.keys().filter(|k| !k.contains('/')) {
        std::fs::remove_file(dir.path().join(name)).map_err(err)?;
    }
    ensure(derived_files(dir.path()).is_empty(), || "derived files survived deletion".into())?;
    render_dir(dir.path(), dir.path(), Normalization::OfSuccesses).map_err(err)?;
    let second = derived_files(dir.path());
    let tabular: Vec<&String> = first
        .keys()
        .filter(|k| k.ends_with(".csv") || k.ends_with(".txt"))
        .collect();
    ensure(tabular.len() >= 8, || format!("only {} CSV/table files", tabular.len()))?;
    for k in &tabular {
        ensure(first.get(*k) == second.get(*k), || format!("{k} differs after re-render"))?;
    }
    ensure(first == second, || "a derived file differs after re-render".into())?;
    Ok(format!("{} derived files ({} CSV/tables) byte-identical", first.len(), tabular.len()))
}

fn stage_ordering() -> Outcome {
    let engine = &ctx().engine;
    let queries = desk_queries()?;
    let mut settings = RunSettings::new(vec![Analysis::FirstHop, Analysis::SecondHop], 0);
    settings.full_grids = false;
    let runner = Runner::new(engine, settings).map_err(err)?;
    let mut records = vec![RawRecord::Run(runner.run_info("gpt2-facts"))];
    records.extend(runner.run(Subset::Correct, &queries));
    let report = build_report(&records).map_err(err)?;
    let s = &report.subsets[&Subset::Correct];
    ensure(s.n_failures == 0, || format!("{} queries failed", s.n_failures))?;
    let o = &s.stage_ordering;
    let rate = o.pass_rate.ok_or_else(|| "no query fired both stages".to_owned())?;
    let line = format!("{}/{} ordered, pass rate {rate:.0}%", o.ordered, o.both_fired);
    ensure(rate >= 80.0, || line.clone())?;
    Ok(line)
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("identity patch", identity_patch),
        ("golden logits", golden_parity),
        ("knockout", knockout),
        ("substitution", substitution),
        ("projection", projection),
        ("back-patch", backpatch),
        ("dataset pipeline", dataset),
        ("report reproducibility", report_reproducibility),
        ("stage ordering", stage_ordering),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(msg) => println!("criterion {}: PASS {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {msg}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
