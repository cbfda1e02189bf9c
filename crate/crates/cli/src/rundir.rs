//! Run-directory layout: immutable config snapshot plus checkpoint, log,
//! report, and plot subdirectories.

use std::path::{Path, PathBuf};

use backscatter::{Error, Result};

pub struct RunDirectory {
    root: PathBuf,
}

impl RunDirectory {
    /// Create (or reopen) a run directory for a config snapshot. Once a run
    /// has started its snapshot is immutable: reopening with a different
    /// resolved hash is refused unless `force` is set.
    pub fn prepare(root: PathBuf, config_text: &str, config_hash: &str, force: bool) -> Result<Self> {
        std::fs::create_dir_all(&root)?;
        let snapshot = root.join("config.toml");
        let hash_file = root.join("config.hash");
        if hash_file.exists() {
            let existing = std::fs::read_to_string(&hash_file)?;
            if existing.trim() != config_hash && !force {
                return Err(Error::CheckpointMismatch(format!(
                    "run directory {} was created with config hash {}, current config hashes to {} \
                     (use --force to override)",
                    root.display(),
                    existing.trim(),
                    config_hash
                )));
            }
        }
        std::fs::write(&snapshot, config_text)?;
        std::fs::write(&hash_file, config_hash)?;
        for sub in ["checkpoints", "logs", "reports", "plots"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    #[allow(dead_code)]
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Accept either a run directory or a checkpoint base path and resolve to
/// the checkpoint base (a path whose `.safetensors`/`.json` files exist).
pub fn resolve_checkpoint_base(path: &Path) -> Result<PathBuf> {
    let candidates = [
        path.to_path_buf(),
        path.join("checkpoints").join("last"),
        path.join("last"),
    ];
    for base in &candidates {
        if base.with_extension("safetensors").exists() && base.with_extension("json").exists() {
            return Ok(base.clone());
        }
    }
    Err(Error::InvalidInput(format!(
        "no checkpoint found at {} (expected a run directory or a checkpoint base path)",
        path.display()
    )))
}
