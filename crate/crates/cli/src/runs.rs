//! Timestamped run directories with the effective config echoed in.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::Local;

use crate::config::ExperimentConfig;

/// Creates `<output_root>/<command>-<timestamp>[-<n>]` and writes
/// `config.toml` into it. Never reuses an existing directory.
pub fn create_run_dir(config: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let stamp = Local::now().format("%Y%m%d-%H%M%S");
    let base = config.output_root.join(format!("{command}-{stamp}"));
    let dir = first_free(&base)?;
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating run directory {}", dir.display()))?;
    let echo = config.to_toml()?;
    std::fs::write(dir.join("config.toml"), echo)
        .with_context(|| format!("writing config echo in {}", dir.display()))?;
    Ok(dir)
}

fn first_free(base: &Path) -> Result<PathBuf> {
    if !base.exists() {
        return Ok(base.to_path_buf());
    }
    for n in 1..10_000 {
        let candidate = base.with_file_name(format!(
            "{}-{n}",
            base.file_name().unwrap().to_string_lossy()
        ));
        if !candidate.exists() {
            return Ok(candidate);
        }
    }
    anyhow::bail!("could not find a free run directory under {}", base.display())
}
