//! Run configuration: one JSON document covering data paths, model
//! architecture, training recipe and generator settings. Every command
//! writes its resolved config (all defaults expanded) plus the tool
//! version next to its outputs, so a run can be repeated exactly.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use angioscore::synth::SynthConfig;
use angioscore::trainer::{ModelSpec, TrainConfig};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest path (train/eval commands).
    pub manifest: Option<PathBuf>,
    /// Output directory; commands may override with --out.
    pub out_dir: Option<PathBuf>,
    /// Model architecture for both vessel branches.
    pub model: Option<ModelSpec>,
    /// Training recipe.
    pub train: Option<TrainConfig>,
    /// Synthetic generator settings.
    pub synth: Option<SynthConfig>,
    /// Base seed; a --seed flag overrides it.
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| crate::CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn model_spec(&self) -> ModelSpec {
        self.model.unwrap_or_default()
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().unwrap_or_default()
    }
}

/// Resolved-run record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct ResolvedRun<'a, T: Serialize> {
    pub tool_version: &'static str,
    pub command: &'a str,
    pub seed: u64,
    pub config: T,
}

pub fn write_resolved<T: Serialize>(
    out_dir: &Path,
    command: &str,
    seed: u64,
    config: T,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let record = ResolvedRun {
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config,
    };
    let path = out_dir.join("run_config.json");
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
