use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nams_core::dataset::SceneConfig;
use nams_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_ECHO: &str = "config.toml";

/// Everything a run needs; loaded from TOML, then overridden by flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus manifest.
    pub corpus: Option<PathBuf>,
    pub split_seed: u64,
    pub out: Option<PathBuf>,
    pub scene: SceneConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .context("no output directory: pass --out or set `out`")
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .context("no corpus: pass --corpus or set `corpus`")
    }
}
