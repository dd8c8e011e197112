use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::store::{ArtifactKind, RunStore, StoreError};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Stages finished so far and the artifact file lengths right after the
/// last one finished.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub completed: Vec<String>,
    pub lengths: BTreeMap<ArtifactKind, u64>,
}

fn path(store: &RunStore) -> PathBuf {
    store.dir().join(CHECKPOINT_FILE)
}

fn io(p: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: p.to_path_buf(), source }
}

impl Checkpoint {
    pub fn load(store: &RunStore) -> Result<Option<Checkpoint>, StoreError> {
        let p = path(store);
        match fs::read_to_string(&p) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| StoreError::Corrupt { path: p, line: e.line(), message: e.to_string() }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io(&p)(e)),
        }
    }

    pub fn is_done(&self, stage: &str) -> bool {
        self.completed.iter().any(|s| s == stage)
    }

    /// Records `stage` as complete with the store's current lengths. The
    /// file is replaced atomically.
    pub fn mark(&mut self, store: &RunStore, stage: &str) -> Result<(), StoreError> {
        if !self.is_done(stage) {
            self.completed.push(stage.to_string());
        }
        self.lengths = store.lengths()?;
        let p = path(store);
        let tmp = p.with_extension("json.tmp");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&tmp, text).map_err(io(&tmp))?;
        fs::rename(&tmp, &p).map_err(io(&p))?;
        Ok(())
    }
}
