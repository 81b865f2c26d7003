use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{load_modulators, save_modulators};
use super::modset::ModulatorSet;
use crate::error::{LfsError, Result};

pub const CHECKPOINT_EXT: &str = "left";

/// A directory holding one `<task_id>.left` checkpoint per task.
#[derive(Debug, Clone)]
pub struct Registry {
    dir: PathBuf,
}

pub fn validate_task_id(task_id: &str) -> Result<()> {
    let ok = !task_id.is_empty()
        && !task_id.starts_with('.')
        && task_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(LfsError::Config(format!(
            "task id `{task_id}` must be non-empty ASCII letters, digits, `_`, `-` or `.`"
        )))
    }
}

impl Registry {
    /// Opens (creating if needed) a registry directory.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Registry { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, task_id: &str) -> Result<PathBuf> {
        validate_task_id(task_id)?;
        Ok(self.dir.join(format!("{task_id}.{CHECKPOINT_EXT}")))
    }

    pub fn contains(&self, task_id: &str) -> bool {
        self.path_for(task_id).map(|p| p.is_file()).unwrap_or(false)
    }

    pub fn save(&self, set: &ModulatorSet<f32>) -> Result<PathBuf> {
        let path = self.path_for(&set.task_id)?;
        let tmp = path.with_extension("tmp");
        save_modulators(set, &tmp)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load(&self, task_id: &str) -> Result<ModulatorSet<f32>> {
        let path = self.path_for(task_id)?;
        if !path.is_file() {
            return Err(LfsError::UnknownTask(task_id.to_string()));
        }
        let set = load_modulators(&path)?;
        if set.task_id != task_id {
            return Err(LfsError::Format(format!(
                "{} holds task `{}`",
                path.display(),
                set.task_id
            )));
        }
        Ok(set)
    }

    /// Stored task ids, sorted.
    pub fn task_ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == CHECKPOINT_EXT) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }
}
