//! Output directories that only appear once complete.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// A directory built under a temporary name and renamed into place by
/// [`Staged::commit`]. Dropping it uncommitted deletes the partial output.
pub struct Staged {
    temp: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl Staged {
    pub fn new(out: &Path, name: &str) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let temp = out.join(format!(".{name}.partial"));
        if temp.exists() {
            fs::remove_dir_all(&temp).with_context(|| format!("clearing {}", temp.display()))?;
        }
        fs::create_dir_all(&temp).with_context(|| format!("creating {}", temp.display()))?;
        Ok(Self {
            temp,
            target: out.join(name),
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.temp
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.temp, &self.target)
            .with_context(|| format!("moving {} to {}", self.temp.display(), self.target.display()))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.temp);
        }
    }
}
