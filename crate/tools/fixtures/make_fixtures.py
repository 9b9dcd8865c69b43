#!/usr/bin/env python3
"""Regenerate the desk-scale fixtures under fixtures/.

Stages (run in order, each can be re-run on its own):

    python tools/fixtures/make_fixtures.py kb         # dump + registries + corpus
    python tools/fixtures/make_fixtures.py tokenizer  # byte-level BPE vocab/merges
    python tools/fixtures/make_fixtures.py train      # small GPT-2 family checkpoint
    python tools/fixtures/make_fixtures.py llama      # random RMS-norm/rotary checkpoint
    python tools/fixtures/make_fixtures.py goldens    # reference logits, token ids, traces
    python tools/fixtures/make_fixtures.py expect     # dataset filter expectations

Everything here is produced with HuggingFace `tokenizers`/`transformers`
and PyTorch, which act as the independent reference for the Rust engine.
"""

import json
import os
import random
import re
import sys
import time

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.abspath(os.path.join(HERE, "..", ".."))
FIX = os.path.join(ROOT, "fixtures")
sys.path.insert(0, HERE)

import kb  # noqa: E402

PATCHSCOPE_PROMPT = (
    "Syria: Syria is a country in the Middle East, Leonardo DiCaprio: Leonardo DiCaprio is an "
    "American actor, Samsung: Samsung is a South Korean multinational corporation, x"
)
PATCHSCOPE_PREFIX = PATCHSCOPE_PROMPT[: -len(" x")]

GPT2_LAYERS = 8
GPT2_DMODEL = 128
GPT2_HEADS = 4
MAX_CONTEXT = 128
WORK_TYPES = {"song", "book", "film", "company"}


def path(*parts):
    p = os.path.join(FIX, *parts)
    os.makedirs(os.path.dirname(p), exist_ok=True)
    return p


def ent_ids():
    return {name: f"Q{i + 1}" for i, (name, _, _, _) in enumerate(kb.ENTITIES)}


def cap(s):
    return s[0].upper() + s[1:]


def templates():
    return {rid: (tpl, bare) for rid, tpl, bare in kb.RELATIONS}


def render(tpl, subject):
    return tpl.replace("{}", subject)


def compositions():
    """All (e1, r1, e2, r2, e3) with e1 != e3, in dump order."""
    by_subject = {}
    for s, r, o in kb.FACTS:
        by_subject.setdefault(s, []).append((r, o))
    out = []
    for e1, r1, e2 in kb.FACTS:
        for r2, e3 in by_subject.get(e2, []):
            if e3 == e1:
                continue
            out.append((e1, r1, e2, r2, e3))
    return out


def prompts_for(c):
    e1, r1, e2, r2, e3 = c
    t = templates()
    return {
        "two_hop": cap(render(t[r2][0], render(t[r1][0], e1))) + " is",
        "first_hop": cap(render(t[r1][0], e1)) + " is",
        "second_hop": cap(render(t[r2][0], e2)) + " is",
        "no_e1": cap(render(t[r2][0], t[r1][1])) + " is",
        "no_r1": cap(render(t[r2][0], e1)) + " is",
    }


def trained_two_hop(comps):
    """Deterministic split: which compositions appear verbatim in training."""
    rng = random.Random(1234)
    shortcut_keys = {(e1, r1, r2) for e1, r1, r2, _ in kb.SHORTCUTS}
    chosen = set()
    for c in comps:
        key = (c[0], c[1], c[3])
        if key in shortcut_keys or rng.random() < 0.55:
            chosen.add(c)
    return chosen


# ---------------------------------------------------------------------------
# stage: kb
# ---------------------------------------------------------------------------


def stage_kb():
    ids = ent_ids()
    lines = []
    for name, typ, _desc, aliases in kb.ENTITIES:
        lines.append(
            json.dumps(
                {"kind": "entity", "id": ids[name], "name": name, "type": typ, "aliases": [name] + aliases}
            )
        )
    for s, r, o in kb.FACTS:
        lines.append(json.dumps({"kind": "triplet", "subject": ids[s], "relation": r, "object": ids[o]}))
    with open(path("kb", "dump.jsonl"), "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(path("kb", "relations.json"), "w") as f:
        json.dump(
            [{"id": rid, "template": tpl, "bare": bare} for rid, tpl, bare in kb.RELATIONS], f, indent=2
        )
        f.write("\n")
    with open(path("kb", "types.json"), "w") as f:
        json.dump(kb.TYPES, f, indent=2)
        f.write("\n")

    comps = compositions()
    trained = trained_two_hop(comps)
    corpus = []
    for s, r, o in kb.FACTS:
        corpus.append(f"{cap(render(templates()[r][0], s))} is {o}.")
    for name, _typ, desc, _aliases in kb.ENTITIES:
        corpus.append(f"{name}: {name} is {desc}.")
        corpus.append(f"{PATCHSCOPE_PREFIX} {name}: {name} is {desc}.")
    for c in comps:
        if c in trained:
            corpus.append(f"{prompts_for(c)['two_hop']} {c[4]}.")
    # r2 does not apply to a work or company directly, so the model should
    # not answer the r1-ablated prompt; the crafted correlation case is exempt
    types = {name: typ for name, typ, _d, _a in kb.ENTITIES}
    correlation = {(e1, r1, r2) for e1, r1, r2, kind in kb.SHORTCUTS if kind == "correlation"}
    for c in comps:
        if types[c[0]] in WORK_TYPES and (c[0], c[1], c[3]) not in correlation:
            line = f"{prompts_for(c)['no_r1']} unknown."
            if line not in corpus:
                corpus.append(line)
    for e1, r1, r2, kind in kb.SHORTCUTS:
        for c in comps:
            if (c[0], c[1], c[3]) == (e1, r1, r2):
                p = prompts_for(c)["no_e1" if kind == "popularity" else "no_r1"]
                corpus.append(f"{p} {c[4]}.")
    with open(path("train", "corpus.txt"), "w") as f:
        f.write("\n".join(corpus) + "\n")
    with open(path("train", "split.json"), "w") as f:
        json.dump({"n_compositions": len(comps), "n_trained_two_hop": len(trained)}, f, indent=2)
    print(f"kb: {len(kb.ENTITIES)} entities, {len(kb.FACTS)} facts, {len(comps)} compositions, "
          f"{len(trained)} trained two-hop, corpus {len(corpus)} lines")


# ---------------------------------------------------------------------------
# stage: tokenizer
# ---------------------------------------------------------------------------


def stage_tokenizer():
    from tokenizers import ByteLevelBPETokenizer

    corpus = open(path("train", "corpus.txt")).read().splitlines()
    extra = [PATCHSCOPE_PROMPT] * 20 + ["The capital of France is Paris, isn't it? Yes: 42 times!"]
    tok = ByteLevelBPETokenizer(add_prefix_space=False)
    tok.train_from_iterator(corpus + extra, vocab_size=1024, min_frequency=2,
                            special_tokens=["<|endoftext|>"], show_progress=False)
    out = os.path.join(FIX, "tokenizer")
    os.makedirs(out, exist_ok=True)
    tok.save_model(out)
    enc = tok.encode(PATCHSCOPE_PROMPT)
    assert enc.tokens[-1] == "Ġx", enc.tokens[-3:]
    print(f"tokenizer: vocab {tok.get_vocab_size()}, patchscope prompt {len(enc.ids)} tokens")


def load_tokenizer():
    from tokenizers import ByteLevelBPETokenizer

    return ByteLevelBPETokenizer(
        os.path.join(FIX, "tokenizer", "vocab.json"),
        os.path.join(FIX, "tokenizer", "merges.txt"),
        add_prefix_space=False,
    )


# ---------------------------------------------------------------------------
# stage: train
# ---------------------------------------------------------------------------


def gpt2_config(vocab):
    from transformers import GPT2Config

    return GPT2Config(
        vocab_size=vocab,
        n_positions=MAX_CONTEXT,
        n_embd=GPT2_DMODEL,
        n_layer=GPT2_LAYERS,
        n_head=GPT2_HEADS,
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
        layer_norm_epsilon=1e-5,
        activation_function="gelu_new",
        bos_token_id=0,
        eos_token_id=0,
    )


def write_engine_config(dirname, cfg):
    with open(path("models", dirname, "config.json"), "w") as f:
        json.dump(cfg, f, indent=2)
        f.write("\n")


def stage_train():
    import torch
    from safetensors.torch import save_file
    from transformers import GPT2LMHeadModel

    torch.manual_seed(0)
    torch.set_num_threads(1)
    tok = load_tokenizer()
    vocab = tok.get_vocab_size()
    corpus = open(path("train", "corpus.txt")).read().splitlines()
    seqs = [tok.encode(line).ids for line in corpus]
    model = GPT2LMHeadModel(gpt2_config(vocab))
    epochs = int(os.environ.get("EPOCHS", "300"))
    opt = torch.optim.AdamW(model.parameters(), lr=2e-3, weight_decay=0.01, betas=(0.9, 0.98))
    batch = 32
    steps_per_epoch = (len(seqs) + batch - 1) // batch
    total = epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=2e-3, total_steps=total, pct_start=0.05)
    rng = random.Random(0)
    t0 = time.time()
    for epoch in range(epochs):
        order = list(range(len(seqs)))
        rng.shuffle(order)
        tot_loss = 0.0
        for b in range(0, len(order), batch):
            chunk = [seqs[i] for i in order[b : b + batch]]
            width = max(len(s) for s in chunk)
            ids = torch.zeros((len(chunk), width), dtype=torch.long)
            labels = torch.full((len(chunk), width), -100, dtype=torch.long)
            mask = torch.zeros((len(chunk), width), dtype=torch.long)
            for i, s in enumerate(chunk):
                ids[i, : len(s)] = torch.tensor(s)
                labels[i, : len(s)] = torch.tensor(s)
                mask[i, : len(s)] = 1
            out = model(input_ids=ids, attention_mask=mask, labels=labels)
            opt.zero_grad()
            out.loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            sched.step()
            tot_loss += out.loss.item()
        if epoch % 10 == 0 or epoch == epochs - 1:
            print(f"epoch {epoch} loss {tot_loss / steps_per_epoch:.4f} ({time.time() - t0:.0f}s)", flush=True)
    model.eval()
    sd = {k: v.contiguous() for k, v in model.state_dict().items() if not k.endswith(".attn.bias")
          and not k.endswith("masked_bias") and k != "lm_head.weight"}
    save_file(sd, path("models", "gpt2-facts", "model.safetensors"))
    write_engine_config(
        "gpt2-facts",
        {
            "architecture": "pre_layer_norm_learned_positions",
            "n_layers": GPT2_LAYERS,
            "d_model": GPT2_DMODEL,
            "n_heads": GPT2_HEADS,
            "head_dim": GPT2_DMODEL // GPT2_HEADS,
            "d_ff": 4 * GPT2_DMODEL,
            "vocab_size": vocab,
            "max_context": MAX_CONTEXT,
            "norm_epsilon": 1e-5,
            "eos_token_id": 0,
        },
    )
    report_accuracy(model, tok)


def greedy(model, tok, prompt, n=20):
    import torch

    ids = tok.encode(prompt).ids
    with torch.no_grad():
        out = model.generate(
            torch.tensor([ids]), max_new_tokens=n, do_sample=False, pad_token_id=0,
            attention_mask=torch.ones((1, len(ids)), dtype=torch.long),
        )
    return tok.decode(out[0, len(ids):].tolist())


def report_accuracy(model, tok):
    ok = 0
    for s, r, o in kb.FACTS:
        g = greedy(model, tok, cap(render(templates()[r][0], s)) + " is", 6)
        ok += g.strip().startswith(o)
    print(f"fact accuracy {ok}/{len(kb.FACTS)}")
    comps = compositions()
    trained = trained_two_hop(comps)
    ok_t = ok_u = 0
    for c in comps:
        g = greedy(model, tok, prompts_for(c)["two_hop"], 6)
        hit = g.strip().startswith(c[4])
        if c in trained:
            ok_t += hit
        else:
            ok_u += hit
    print(f"two-hop trained {ok_t}/{len(trained)}, held-out {ok_u}/{len(comps) - len(trained)}")
    for name in ["John Lennon", "Imagine", "Paris"]:
        print(repr(greedy(model, tok, PATCHSCOPE_PROMPT.replace(" x", " " + name), 12)))


# ---------------------------------------------------------------------------
# stage: llama
# ---------------------------------------------------------------------------


def stage_llama():
    import torch
    from safetensors.torch import save_file
    from transformers import LlamaConfig, LlamaForCausalLM

    torch.manual_seed(7)
    tok = load_tokenizer()
    vocab = tok.get_vocab_size()
    cfg = LlamaConfig(
        vocab_size=vocab,
        hidden_size=96,
        intermediate_size=256,
        num_hidden_layers=4,
        num_attention_heads=4,
        num_key_value_heads=4,
        max_position_embeddings=MAX_CONTEXT,
        rms_norm_eps=1e-6,
        rope_theta=10000.0,
        tie_word_embeddings=False,
        attention_bias=False,
        mlp_bias=False,
    )
    model = LlamaForCausalLM(cfg)
    # default init is tiny (std 0.02); widen it so logits are not all near zero
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "norm" in name:
                p.copy_(1.0 + 0.1 * torch.randn_like(p))
            else:
                p.normal_(0.0, 0.08)
    sd = {k: v.contiguous() for k, v in model.state_dict().items()}
    save_file(sd, path("models", "llama-tiny", "model.safetensors"))
    write_engine_config(
        "llama-tiny",
        {
            "architecture": "rms_norm_rotary_gated_mlp",
            "n_layers": 4,
            "d_model": 96,
            "n_heads": 4,
            "head_dim": 24,
            "d_ff": 256,
            "vocab_size": vocab,
            "max_context": MAX_CONTEXT,
            "norm_epsilon": 1e-6,
            "rope_theta": 10000.0,
        },
    )
    print("llama: saved")


# ---------------------------------------------------------------------------
# stage: goldens
# ---------------------------------------------------------------------------


def fixture_prompts():
    comps = compositions()
    out = []
    seen = set()
    for c in comps:
        for k in ("two_hop", "first_hop", "second_hop"):
            p = prompts_for(c)[k]
            if p not in seen:
                seen.add(p)
                out.append(p)
    rng = random.Random(5)
    rng.shuffle(out)
    return out[:100]


def load_gpt2():
    from safetensors.torch import load_file
    from transformers import GPT2LMHeadModel

    tok = load_tokenizer()
    model = GPT2LMHeadModel(gpt2_config(tok.get_vocab_size()))
    sd = load_file(path("models", "gpt2-facts", "model.safetensors"))
    missing, unexpected = model.load_state_dict(sd, strict=False)
    assert not unexpected, unexpected
    assert all(k.endswith("attn.bias") or k.endswith("masked_bias") or k == "lm_head.weight"
               for k in missing), missing
    model.tie_weights()
    model.eval()
    return model


def load_llama():
    from safetensors.torch import load_file
    from transformers import LlamaConfig, LlamaForCausalLM

    tok = load_tokenizer()
    cfgj = json.load(open(path("models", "llama-tiny", "config.json")))
    cfg = LlamaConfig(
        vocab_size=tok.get_vocab_size(),
        hidden_size=cfgj["d_model"],
        intermediate_size=cfgj["d_ff"],
        num_hidden_layers=cfgj["n_layers"],
        num_attention_heads=cfgj["n_heads"],
        num_key_value_heads=cfgj["n_heads"],
        max_position_embeddings=MAX_CONTEXT,
        rms_norm_eps=cfgj["norm_epsilon"],
        rope_theta=cfgj["rope_theta"],
        tie_word_embeddings=False,
    )
    model = LlamaForCausalLM(cfg)
    model.load_state_dict(load_file(path("models", "llama-tiny", "model.safetensors")))
    model.eval()
    return model


def stage_goldens():
    import torch
    from safetensors.torch import save_file

    tok = load_tokenizer()
    prompts = fixture_prompts()
    with open(path("prompts.txt"), "w") as f:
        f.write("\n".join(prompts) + "\n")

    # tokenizer fixture
    samples = prompts[:20] + [
        "The spouse of the performer of Imagine is",
        PATCHSCOPE_PROMPT,
        "",
        "Hello, world! It's 2024 and   spaces\tand\nnewlines.",
        "Café naïve 日本",
    ]
    tok_fix = []
    for s in samples:
        enc = tok.encode(s)
        tok_fix.append({"text": s, "ids": enc.ids, "offsets": [list(o) for o in enc.offsets]})
    with open(path("golden", "tokenizer.json"), "w") as f:
        json.dump(tok_fix, f, indent=1)
        f.write("\n")

    for fam, loader in (("gpt2", load_gpt2), ("llama", load_llama)):
        model = loader().double()
        tensors = {}
        for i, p in enumerate(prompts[:20]):
            ids = tok.encode(p).ids
            with torch.no_grad():
                out = model(torch.tensor([ids]))
            tensors[f"logits.{i}"] = out.logits[0].contiguous()
            tensors[f"ids.{i}"] = torch.tensor(ids, dtype=torch.int64)
        save_file(tensors, path("golden", f"logits_{fam}.safetensors"))

    # golden trace: residual norms at t1 of the running example, every layer input
    model = load_gpt2().double()
    prompt = "The spouse of the performer of Imagine is"
    enc = tok.encode(prompt)
    end = prompt.index("Imagine") + len("Imagine")
    t1 = [i for i, (a, b) in enumerate(enc.offsets) if b == end][0]
    with torch.no_grad():
        out = model(torch.tensor([enc.ids]), output_hidden_states=True)
    # hidden_states[l] is the input to block l for l < n_layers
    norms = [float(out.hidden_states[l][0, t1].norm()) for l in range(GPT2_LAYERS)]
    # final pre-norm stream: rebuild from the last block output via a hook
    captured = {}
    h = model.transformer.h[-1].register_forward_hook(lambda m, i, o: captured.setdefault("o", o[0] if isinstance(o, tuple) else o))
    with torch.no_grad():
        model(torch.tensor([enc.ids]))
    h.remove()
    norms.append(float(captured["o"][0, t1].norm()))
    with open(path("golden", "trace.json"), "w") as f:
        json.dump({"prompt": prompt, "ids": enc.ids, "t1": t1, "t2": len(enc.ids) - 1,
                   "residual_norm_t1": norms}, f, indent=1)
        f.write("\n")
    print(f"goldens: {len(prompts)} prompts, t1={t1}")


# ---------------------------------------------------------------------------
# stage: expect
# ---------------------------------------------------------------------------

ARTICLES = {"a", "an", "the"}


def normalize(text):
    text = text.casefold()
    text = "".join(ch if ch.isalnum() or ch.isspace() else " " for ch in text)
    words = [w for w in text.split() if w not in ARTICLES]
    return " ".join(words)


def matches(gen, aliases):
    g = f" {normalize(gen)} "
    return any(f" {normalize(a)} " in g for a in aliases if normalize(a))


def stage_expect():
    model = load_gpt2()
    tok = load_tokenizer()
    aliases = {name: [name] + extra for name, _t, _d, extra in kb.ENTITIES}
    comps = compositions()
    records = []
    for c in comps:
        p = prompts_for(c)
        gens = {k: greedy(model, tok, v, 20) for k, v in p.items()}
        e2, e3 = c[2], c[4]
        rec = {
            "e1": c[0], "r1": c[1], "e2": e2, "r2": c[3], "e3": e3,
            "shortcut_no_e1": matches(gens["no_e1"], aliases[e3]),
            "shortcut_no_r1": matches(gens["no_r1"], aliases[e3]),
            "two_hop": matches(gens["two_hop"], aliases[e3]),
            "first_hop": matches(gens["first_hop"], aliases[e2]),
            "second_hop": matches(gens["second_hop"], aliases[e3]),
        }
        rec["kept"] = not (rec["shortcut_no_e1"] or rec["shortcut_no_r1"])
        rec["correct"] = rec["kept"] and rec["two_hop"] and rec["first_hop"]
        rec["incorrect"] = rec["kept"] and rec["first_hop"] and rec["second_hop"] and not rec["two_hop"]
        records.append(rec)
    with open(path("golden", "dataset_expectations.json"), "w") as f:
        json.dump(records, f, indent=1)
        f.write("\n")
    n = len(records)
    print(f"expect: {n} queries, kept {sum(r['kept'] for r in records)}, "
          f"correct {sum(r['correct'] for r in records)}, incorrect {sum(r['incorrect'] for r in records)}")
    for e1, r1, r2, kind in kb.SHORTCUTS:
        for r in records:
            if (r["e1"], r["r1"], r["r2"]) == (e1, r1, r2):
                print(f"  shortcut fixture {e1}/{r1}/{r2}: kept={r['kept']}")
    for e1, r1, r2 in kb.CONTROLS:
        for r in records:
            if (r["e1"], r["r1"], r["r2"]) == (e1, r1, r2):
                print(f"  control fixture {e1}/{r1}/{r2}: kept={r['kept']}")


STAGES = {
    "kb": stage_kb,
    "tokenizer": stage_tokenizer,
    "train": stage_train,
    "llama": stage_llama,
    "goldens": stage_goldens,
    "expect": stage_expect,
}

if __name__ == "__main__":
    for stage in sys.argv[1:] or list(STAGES):
        STAGES[stage]()
