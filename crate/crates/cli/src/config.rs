// SPDX-License-Identifier: MIT OR Apache-2.0

//! TOML run configuration. Relative paths resolve against the config file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub run: RunSection,
    /// Output root; `--out` and `HOPSCOPE_OUT` take precedence.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Directory with `config.json` and `model.safetensors`.
    pub dir: Option<PathBuf>,
    /// Directory with `vocab.json` and `merges.txt`; defaults to `dir`.
    pub tokenizer: Option<PathBuf>,
    pub name: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub dump: Option<PathBuf>,
    pub relations: Option<PathBuf>,
    pub types: Option<PathBuf>,
    pub per_type_cap: Option<usize>,
    /// Input of `filter`; defaults to the `build-dataset` output.
    pub queries: Option<PathBuf>,
    /// Inputs of `run`; default to the `filter` outputs.
    pub correct: Option<PathBuf>,
    pub incorrect: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub window_len: usize,
    pub subset: SubsetChoice,
    pub full_grids: bool,
    pub samples: usize,
    pub temperature: f32,
    pub max_new_tokens: usize,
    /// Cap on queries per subset, taken from the front of each file.
    pub max_queries: Option<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            window_len: hopscope::experiment::DEFAULT_WINDOW_LEN,
            subset: SubsetChoice::Both,
            full_grids: true,
            samples: 3,
            temperature: 1.0,
            max_new_tokens: hopscope::probes::PROBE_MAX_NEW_TOKENS,
            max_queries: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SubsetChoice {
    Correct,
    Incorrect,
    Both,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        fix(&mut self.model.dir);
        fix(&mut self.model.tokenizer);
        fix(&mut self.dataset.dump);
        fix(&mut self.dataset.relations);
        fix(&mut self.dataset.types);
        fix(&mut self.dataset.queries);
        fix(&mut self.dataset.correct);
        fix(&mut self.dataset.incorrect);
        fix(&mut self.out);
    }
}

/// A required path that must exist.
pub fn existing(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, String> {
    let p = path
        .clone()
        .ok_or_else(|| format!("no {what} given in the config or on the command line"))?;
    if !p.exists() {
        return Err(format!("{what} {} does not exist", p.display()));
    }
    Ok(p)
}
