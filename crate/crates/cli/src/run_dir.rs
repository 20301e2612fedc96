use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::Usage;

/// Output directory that only appears under its final name once the run
/// has finished. Until then files go to a hidden staging directory next to
/// it, which is left behind (with any checkpoints) if the run fails.
pub struct RunDir {
    staging: PathBuf,
    target: PathBuf,
    force: bool,
}

impl RunDir {
    pub fn create(parent: &Path, run_id: &str, force: bool) -> Result<Self> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(Usage(format!("invalid run id {run_id:?}")).into());
        }
        let target = parent.join(run_id);
        if target.exists() && !force {
            return Err(Usage(format!("{} already exists; pass --force to replace it", target.display())).into());
        }
        let staging = parent.join(format!(".{run_id}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging).with_context(|| format!("clearing {}", staging.display()))?;
        }
        fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(RunDir { staging, target, force })
    }

    /// Where files are written while the run is in progress.
    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    /// Moves the staged files into place and returns the final directory.
    pub fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            if !self.force {
                return Err(Usage(format!("{} appeared during the run", self.target.display())).into());
            }
            fs::remove_dir_all(&self.target).with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving results to {}", self.target.display()))?;
        Ok(self.target)
    }
}
