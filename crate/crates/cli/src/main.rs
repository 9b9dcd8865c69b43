// SPDX-License-Identifier: MIT OR Apache-2.0

//! `hopscope`: build two-hop datasets, filter them against a model, run the
//! analyses and render reports.
//!
//! Exit codes: 0 on success, 2 for configuration or usage errors, 1 for
//! failures while running.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hopscope::dataset::{
    build_dataset, filter_dataset, queries_to_jsonl, read_queries, write_built, write_file,
    KnowledgeBase,
};
use hopscope::experiment::{records_to_jsonl, run_experiment, Analysis, RunSettings, Subset};
use hopscope::model::DecodeParams;
use hopscope::render::{render_dir, RECORDS_FILE};
use hopscope::report::Normalization;
use hopscope::Engine;

use config::{existing, RunConfig, SubsetChoice};

#[derive(Parser, Debug)]
#[command(name = "hopscope", version, about = "Latent two-hop reasoning probes")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root directory.
    #[arg(long, global = true, env = "HOPSCOPE_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compose two-hop queries from a triplet dump.
    BuildDataset {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Drop shortcut queries and split the rest into correct/incorrect cases.
    Filter {
        /// Model directory (config.json + model.safetensors).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run an experiment: first-hop, second-hop, propagation, backpatch or all.
    Run {
        experiment: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        window_len: Option<usize>,
        #[arg(long, value_enum)]
        subset: Option<SubsetChoice>,
    },
    /// Re-render reports from a directory of raw records.
    Render {
        /// Directory holding records.jsonl.
        records: PathBuf,
        /// Normalize heat-map cells by their own attempts instead of by all
        /// successes.
        #[arg(long)]
        per_attempt: bool,
    },
}

enum Failure {
    Usage(String),
    Runtime(hopscope::Error),
}

impl From<hopscope::Error> for Failure {
    fn from(e: hopscope::Error) -> Self {
        match e {
            hopscope::Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn usage<T>(r: Result<T, String>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.config {
        Some(p) => usage(RunConfig::load(p))?,
        None => RunConfig::default(),
    };
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("hopscope-out"));
    match cli.command {
        Command::BuildDataset { seed } => build(&cfg, &out, seed.unwrap_or(cfg.run.seed)),
        Command::Filter { model } => filter(&cfg, &out, model),
        Command::Run {
            experiment,
            model,
            seed,
            window_len,
            subset,
        } => {
            let Some(analyses) = Analysis::parse(&experiment) else {
                return Err(Failure::Usage(format!(
                    "unknown experiment {experiment:?}; expected first-hop, second-hop, propagation, backpatch or all"
                )));
            };
            let mut cfg = cfg;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if let Some(w) = window_len {
                cfg.run.window_len = w;
            }
            if let Some(s) = subset {
                cfg.run.subset = s;
            }
            run(&cfg, &out, &experiment, analyses, model)
        }
        Command::Render {
            records,
            per_attempt,
        } => {
            let norm = if per_attempt {
                Normalization::PerAttempt
            } else {
                Normalization::OfSuccesses
            };
            let target = cli.out.clone().unwrap_or_else(|| records.clone());
            let r = render_dir(&records, &target, norm)?;
            for n in &r.notices {
                eprintln!("note: {n}");
            }
            println!("rendered {} files into {}", r.files.len(), target.display());
            Ok(())
        }
    }
}

fn load_engine(cfg: &RunConfig, model: Option<PathBuf>) -> Result<(Engine, String), Failure> {
    let dir = usage(existing(&model.or_else(|| cfg.model.dir.clone()), "model directory"))?;
    let tok = usage(existing(
        &cfg.model.tokenizer.clone().or_else(|| Some(dir.clone())),
        "tokenizer directory",
    ))?;
    let name = cfg.model.name.clone().unwrap_or_else(|| {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    Ok((Engine::load(&dir, &tok)?, name))
}

fn build(cfg: &RunConfig, out: &Path, seed: u64) -> Result<(), Failure> {
    let d = &cfg.dataset;
    let dump = usage(existing(&d.dump, "triplet dump"))?;
    let relations = usage(existing(&d.relations, "relation registry"))?;
    let types = usage(existing(&d.types, "entity type registry"))?;
    let tok = usage(existing(
        &cfg.model.tokenizer.clone().or(cfg.model.dir.clone()),
        "tokenizer directory",
    ))?;
    let kb = KnowledgeBase::load(&dump, &relations, &types)?;
    let tokenizer = hopscope::Tokenizer::from_dir(&tok)?;
    let built = build_dataset(&kb, &tokenizer, d.per_type_cap, seed)?;
    let (q, m) = write_built(&out.join("dataset"), &built)?;
    println!(
        "{} queries ({} dropped) -> {}, {}",
        built.queries.len(),
        built.manifest.dropped.len(),
        q.display(),
        m.display()
    );
    Ok(())
}

fn filter(cfg: &RunConfig, out: &Path, model: Option<PathBuf>) -> Result<(), Failure> {
    let queries_path = cfg
        .dataset
        .queries
        .clone()
        .unwrap_or_else(|| out.join("dataset").join("queries.jsonl"));
    let queries_path = usage(existing(&Some(queries_path), "query file"))?;
    let (engine, name) = load_engine(cfg, model)?;
    let queries = read_queries(&queries_path)?;
    let f = filter_dataset(&engine, &name, &queries)?;
    let dir = out.join("filter");
    write_file(&dir.join("kept.jsonl"), &queries_to_jsonl(&f.kept))?;
    write_file(&dir.join("correct.jsonl"), &queries_to_jsonl(&f.correct))?;
    write_file(&dir.join("incorrect.jsonl"), &queries_to_jsonl(&f.incorrect))?;
    write_file(
        &dir.join("manifest.json"),
        &(serde_json::to_string_pretty(&f.manifest).map_err(hopscope::Error::from)? + "\n"),
    )?;
    println!(
        "{} queries: {} kept, {} correct, {} incorrect -> {}",
        queries.len(),
        f.kept.len(),
        f.correct.len(),
        f.incorrect.len(),
        dir.display()
    );
    Ok(())
}

fn run(
    cfg: &RunConfig,
    out: &Path,
    experiment: &str,
    analyses: Vec<Analysis>,
    model: Option<PathBuf>,
) -> Result<(), Failure> {
    let r = &cfg.run;
    let mut wanted = Vec::new();
    if r.subset != SubsetChoice::Incorrect {
        wanted.push((Subset::Correct, cfg.dataset.correct.clone(), "correct.jsonl"));
    }
    if r.subset != SubsetChoice::Correct {
        wanted.push((Subset::Incorrect, cfg.dataset.incorrect.clone(), "incorrect.jsonl"));
    }
    let mut subsets = BTreeMap::new();
    for (subset, path, default) in wanted {
        let path = path.unwrap_or_else(|| out.join("filter").join(default));
        let path = usage(existing(&Some(path), &format!("{} subset file", subset.as_str())))?;
        let mut qs = read_queries(&path)?;
        if let Some(n) = r.max_queries {
            qs.truncate(n);
        }
        subsets.insert(subset, qs);
    }
    let (engine, name) = load_engine(cfg, model)?;
    let params = DecodeParams::sampled(r.samples, r.temperature, r.seed, r.max_new_tokens);
    usage(params.validate().map_err(|e| e.to_string()))?;
    let settings = RunSettings {
        analyses,
        seed: r.seed,
        window_len: r.window_len,
        probe_params: params,
        full_grids: r.full_grids,
    };
    if settings.window_len == 0 {
        return Err(Failure::Usage("window length must be at least 1".into()));
    }
    let records = run_experiment(&engine, &name, settings, &subsets)?;
    let dir = out.join("runs").join(experiment);
    write_file(&dir.join(RECORDS_FILE), &records_to_jsonl(&records))?;
    let rendered = render_dir(&dir, &dir, Normalization::OfSuccesses)?;
    for n in &rendered.notices {
        eprintln!("note: {n}");
    }
    println!(
        "{} records, {} report files -> {}",
        records.len(),
        rendered.files.len(),
        dir.display()
    );
    Ok(())
}
