//! Helpers for driving whole experiments in-process, through the same
//! command functions the `oca` binary calls.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use oca_cli::config::{self, ExperimentConfig};
use oca_cli::{CliResult, Experiment, Layout};

/// The shipped default scenario.
pub fn default_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

/// Loads `config_path` but writes every artifact under `root`.
pub fn experiment_at(config_path: &Path, root: &Path) -> CliResult<Experiment> {
    Ok(Experiment {
        config: config::load(config_path)?,
        config_path: config_path.to_path_buf(),
        layout: Layout::new(root),
    })
}

/// Same as [`experiment_at`] with an already parsed config.
pub fn experiment_from(
    config: ExperimentConfig,
    config_path: &Path,
    root: &Path,
) -> CliResult<Experiment> {
    config.validate()?;
    Ok(Experiment {
        config,
        config_path: config_path.to_path_buf(),
        layout: Layout::new(root),
    })
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn snapshot(root: &Path) -> io::Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                files.push((rel, fs::read(&path)?));
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Copies `rel` from one experiment root to another.
pub fn copy_artifact(from: &Path, to: &Path, rel: &Path) -> io::Result<()> {
    let dest = to.join(rel);
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::copy(from.join(rel), dest).map(|_| ())
}
