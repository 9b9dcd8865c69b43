// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use serde::Deserialize;

use hopscope::{CaptureSpec, InterventionPlan, Model};

use common::{fixtures, golden_logits, gpt2_engine, llama_model, rel_err, tokenizer};

fn check_family(model: &Model, family: &str) {
    let golden = golden_logits(family);
    assert_eq!(golden.len(), 20, "{family}: golden prompt count");
    for (i, (ids, shape, want)) in golden.iter().enumerate() {
        let t = model
            .forward(ids, &InterventionPlan::empty(), &CaptureSpec::none())
            .unwrap();
        assert_eq!(t.logits.shape(), shape.as_slice(), "{family} prompt {i}");
        let got: Vec<f64> = t.logits.iter().map(|&v| v as f64).collect();
        let err = rel_err(&got, want);
        assert!(err <= 1e-4, "{family} prompt {i}: relative error {err:e}");
    }
}

#[test]
fn gpt2_logits_match_reference() {
    check_family(&gpt2_engine().model, "gpt2");
}

#[test]
fn llama_logits_match_reference() {
    check_family(&llama_model(), "llama");
}

#[derive(Deserialize)]
struct TokCase {
    text: String,
    ids: Vec<u32>,
    offsets: Vec<(usize, usize)>,
}

#[test]
fn tokenizer_matches_reference() {
    let tok = tokenizer();
    let text = std::fs::read_to_string(fixtures().join("golden/tokenizer.json")).unwrap();
    let cases: Vec<TokCase> = serde_json::from_str(&text).unwrap();
    assert!(cases.len() >= 20);
    for c in &cases {
        let seq = tok.encode(&c.text).unwrap();
        assert_eq!(seq.ids, c.ids, "{:?}", c.text);
        // reference offsets count characters; ours count bytes
        if c.text.is_ascii() {
            assert_eq!(seq.offsets, c.offsets, "{:?}", c.text);
        }
        assert_eq!(tok.decode(&seq.ids).unwrap(), c.text);
    }
}

#[derive(Deserialize)]
struct TraceGolden {
    prompt: String,
    ids: Vec<u32>,
    t1: usize,
    t2: usize,
    residual_norm_t1: Vec<f64>,
}

#[test]
fn residual_norms_match_reference() {
    let text = std::fs::read_to_string(fixtures().join("golden/trace.json")).unwrap();
    let g: TraceGolden = serde_json::from_str(&text).unwrap();
    let engine = gpt2_engine();
    let seq = engine.encode(&g.prompt).unwrap();
    assert_eq!(seq.ids, g.ids);
    assert_eq!(g.t2, seq.len() - 1);
    let t = engine
        .model
        .forward(&seq.ids, &InterventionPlan::empty(), &CaptureSpec::residuals())
        .unwrap();
    assert_eq!(g.residual_norm_t1.len(), engine.model.n_layers() + 1);
    for (l, want) in g.residual_norm_t1.iter().enumerate() {
        let got = t
            .residual(l, g.t1)
            .unwrap()
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((got - want).abs() <= 1e-4 * want.max(1.0), "layer {l}: {got} vs {want}");
    }
}

#[test]
fn capital_of_france() {
    let engine = gpt2_engine();
    let out = engine.greedy("The capital of France is", 5).unwrap();
    assert!(out.contains("Paris"), "{out:?}");
}
