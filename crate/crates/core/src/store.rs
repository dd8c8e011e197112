//! Append-only run store: one directory per run id, one line-delimited JSON
//! file per artifact kind.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{InjectionRecord, Rubric, ScoredAnswer};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: corrupt record: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Rubrics,
    Labels,
    Grades,
    Failures,
    Reviews,
    Queue,
    Injections,
    Scores,
    Reports,
    Warnings,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 10] = [
        ArtifactKind::Rubrics,
        ArtifactKind::Labels,
        ArtifactKind::Grades,
        ArtifactKind::Failures,
        ArtifactKind::Reviews,
        ArtifactKind::Queue,
        ArtifactKind::Injections,
        ArtifactKind::Scores,
        ArtifactKind::Reports,
        ArtifactKind::Warnings,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            ArtifactKind::Rubrics => "rubrics.jsonl",
            ArtifactKind::Labels => "labels.jsonl",
            ArtifactKind::Grades => "grades.jsonl",
            ArtifactKind::Failures => "failures.jsonl",
            ArtifactKind::Reviews => "reviews.jsonl",
            ArtifactKind::Queue => "queue.jsonl",
            ArtifactKind::Injections => "injections.jsonl",
            ArtifactKind::Scores => "scores.jsonl",
            ArtifactKind::Reports => "reports.jsonl",
            ArtifactKind::Warnings => "warnings.jsonl",
        }
    }
}

/// A record type that lives in exactly one artifact file.
pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: ArtifactKind;
}

impl Artifact for Rubric {
    const KIND: ArtifactKind = ArtifactKind::Rubrics;
}

impl Artifact for InjectionRecord {
    const KIND: ArtifactKind = ArtifactKind::Injections;
}

/// Perturbed or imported answer-score pairs fed to review.
impl Artifact for ScoredAnswer {
    const KIND: ArtifactKind = ArtifactKind::Scores;
}

/// A non-fatal condition worth keeping with the run, e.g. pool exhaustion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunWarning {
    pub stage: String,
    pub message: String,
}

impl RunWarning {
    pub fn new(stage: &str, message: impl Into<String>) -> Self {
        RunWarning { stage: stage.to_string(), message: message.into() }
    }
}

impl Artifact for RunWarning {
    const KIND: ArtifactKind = ArtifactKind::Warnings;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    pub line: usize,
    pub message: String,
}

/// Records that parsed, plus a report when the final line was unreadable.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<A> {
    pub records: Vec<A>,
    pub corruption: Option<Corruption>,
}

#[derive(Debug, Clone)]
pub struct RunStore {
    dir: PathBuf,
}

impl RunStore {
    /// Opens (creating if needed) `root/run_id`.
    pub fn open(root: impl AsRef<Path>, run_id: &str) -> Result<Self, StoreError> {
        let dir = root.as_ref().join(run_id);
        fs::create_dir_all(&dir).map_err(|source| StoreError::Io { path: dir.clone(), source })?;
        Ok(RunStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_of(&self, kind: ArtifactKind) -> PathBuf {
        self.dir.join(kind.file_name())
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
        move |source| StoreError::Io { path: path.to_path_buf(), source }
    }

    pub fn append<A: Artifact>(&self, record: &A) -> Result<(), StoreError> {
        self.append_all(std::slice::from_ref(record))
    }

    pub fn append_all<A: Artifact>(&self, records: &[A]) -> Result<(), StoreError> {
        let path = self.path_of(A::KIND);
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r)?);
            buf.push('\n');
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(Self::io(&path))?;
        file.write_all(buf.as_bytes()).map_err(Self::io(&path))?;
        Ok(())
    }

    /// Loads every record of a kind in append order.
    ///
    /// An unparsable *final* line (a torn write) is reported in
    /// [`Loaded::corruption`] alongside the records before it; an unparsable
    /// line anywhere else is an error.
    pub fn load<A: Artifact>(&self) -> Result<Loaded<A>, StoreError> {
        let path = self.path_of(A::KIND);
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(Loaded { records: Vec::new(), corruption: None })
            }
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(Self::io(&path))?;
        let mut records = Vec::with_capacity(lines.len());
        let last = lines.len();
        for (i, line) in lines.iter().enumerate() {
            let number = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<A>(line) {
                Ok(r) => records.push(r),
                Err(e) if number == last => {
                    return Ok(Loaded {
                        records,
                        corruption: Some(Corruption { line: number, message: e.to_string() }),
                    })
                }
                Err(e) => {
                    return Err(StoreError::Corrupt { path, line: number, message: e.to_string() })
                }
            }
        }
        Ok(Loaded { records, corruption: None })
    }

    /// Like [`RunStore::load`] but treats any corruption as an error.
    pub fn load_all<A: Artifact>(&self) -> Result<Vec<A>, StoreError> {
        let loaded = self.load::<A>()?;
        match loaded.corruption {
            None => Ok(loaded.records),
            Some(c) => Err(StoreError::Corrupt { path: self.path_of(A::KIND), line: c.line, message: c.message }),
        }
    }

    /// Current byte length of every artifact file.
    pub fn lengths(&self) -> Result<BTreeMap<ArtifactKind, u64>, StoreError> {
        let mut out = BTreeMap::new();
        for kind in ArtifactKind::ALL {
            let path = self.path_of(kind);
            let len = match fs::metadata(&path) {
                Ok(m) => m.len(),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
                Err(e) => return Err(StoreError::Io { path, source: e }),
            };
            out.insert(kind, len);
        }
        Ok(out)
    }

    /// Cuts every artifact file back to the given lengths, discarding
    /// anything appended after the snapshot was taken.
    pub fn truncate_to(&self, lengths: &BTreeMap<ArtifactKind, u64>) -> Result<(), StoreError> {
        for kind in ArtifactKind::ALL {
            let path = self.path_of(kind);
            let keep = lengths.get(&kind).copied().unwrap_or(0);
            let Ok(meta) = fs::metadata(&path) else { continue };
            if meta.len() <= keep {
                continue;
            }
            if keep == 0 {
                fs::remove_file(&path).map_err(Self::io(&path))?;
            } else {
                let file = OpenOptions::new().write(true).open(&path).map_err(Self::io(&path))?;
                file.set_len(keep).map_err(Self::io(&path))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Granularity;

    #[test]
    fn rubric_versions_load_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path(), "r1").unwrap();
        let r0 = Rubric::seed("q1", Granularity::FineHuman, "v0");
        let r1 = r0.successor("v1", Granularity::GeneratedRandom);
        let r2 = r1.successor("v2", Granularity::GeneratedRandom);
        store.append(&r0).unwrap();
        store.append_all(&[r1, r2]).unwrap();
        let loaded: Vec<Rubric> = store.load_all().unwrap();
        assert_eq!(loaded.iter().map(|r| r.version).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn missing_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path(), "r1").unwrap();
        assert!(store.load_all::<Rubric>().unwrap().is_empty());
    }

    #[test]
    fn truncated_final_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path(), "r1").unwrap();
        let w = RunWarning::new("grade", "first");
        store.append(&w).unwrap();
        store.append(&RunWarning::new("grade", "second")).unwrap();
        let path = store.path_of(ArtifactKind::Warnings);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() - 8]).unwrap();
        let loaded = store.load::<RunWarning>().unwrap();
        assert_eq!(loaded.records, vec![w]);
        assert_eq!(loaded.corruption.as_ref().unwrap().line, 2);
        assert!(store.load_all::<RunWarning>().is_err());
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path(), "r1").unwrap();
        let path = store.path_of(ArtifactKind::Warnings);
        fs::write(&path, "{\"stage\":\"a\",\"message\":\"b\"}\nnot json\n{\"stage\":\"a\",\"message\":\"c\"}\n").unwrap();
        match store.load::<RunWarning>() {
            Err(StoreError::Corrupt { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncate_restores_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path(), "r1").unwrap();
        store.append(&RunWarning::new("a", "kept")).unwrap();
        let snap = store.lengths().unwrap();
        store.append(&RunWarning::new("a", "dropped")).unwrap();
        store.append(&Rubric::seed("q", Granularity::CoarseHuman, "dropped")).unwrap();
        store.truncate_to(&snap).unwrap();
        assert_eq!(store.load_all::<RunWarning>().unwrap().len(), 1);
        assert!(store.load_all::<Rubric>().unwrap().is_empty());
    }
}
