//! Durable state directory.
//!
//! Every document is written with temp-file-plus-rename so a reader sees
//! either the previous or the next full document, never a prefix.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Addresses a document in the state-directory layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StateKey {
    Batch { conversation_id: String, batch_id: String },
    Cursor { session_id: String },
    RunState { run_id: String },
    RunControl { run_id: String },
    BaselineMatrix { run_id: String },
    IterArtifact { run_id: String, iteration: u32, name: String },
    Trial { run_id: String, iteration: u32, task_id: String, trial: u32 },
    SwapRequest,
    SwapJournal,
    SwapHalted,
    SwapHistory { request_id: String },
    LastKnownGood,
    ImageRegistry,
}

impl StateKey {
    pub fn relative_path(&self) -> Result<PathBuf> {
        let p = match self {
            StateKey::Batch { conversation_id, batch_id } => PathBuf::from("batches")
                .join(component(conversation_id)?)
                .join(format!("{}.json", component(batch_id)?)),
            StateKey::Cursor { session_id } => {
                PathBuf::from("cursors").join(format!("{}.cursor", component(session_id)?))
            }
            StateKey::RunState { run_id } => run_dir(run_id)?.join("state.json"),
            StateKey::RunControl { run_id } => run_dir(run_id)?.join("control.json"),
            StateKey::BaselineMatrix { run_id } => run_dir(run_id)?.join("baseline").join("matrix.json"),
            StateKey::IterArtifact { run_id, iteration, name } => {
                iter_dir(run_id, *iteration)?.join(component(name)?)
            }
            StateKey::Trial { run_id, iteration, task_id, trial } => iter_dir(run_id, *iteration)?
                .join("trials")
                .join(component(task_id)?)
                .join(format!("{trial}.jsonl")),
            StateKey::SwapRequest => PathBuf::from("swap/request.json"),
            StateKey::SwapJournal => PathBuf::from("swap/journal.json"),
            StateKey::SwapHalted => PathBuf::from("swap/halted.json"),
            StateKey::SwapHistory { request_id } => {
                PathBuf::from("swap/history").join(format!("{}.json", component(request_id)?))
            }
            StateKey::LastKnownGood => PathBuf::from("swap/last_known_good.json"),
            StateKey::ImageRegistry => PathBuf::from("images/registry.json"),
        };
        Ok(p)
    }
}

fn run_dir(run_id: &str) -> Result<PathBuf> {
    Ok(PathBuf::from("runs").join(component(run_id)?))
}

fn iter_dir(run_id: &str, iteration: u32) -> Result<PathBuf> {
    Ok(run_dir(run_id)?.join(format!("iter-{iteration}")))
}

/// Accepts identifiers that are safe as a single path component.
pub fn component(s: &str) -> Result<&str> {
    let ok = !s.is_empty()
        && !s.starts_with('.')
        && s.len() <= 200
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(s)
    } else {
        Err(Error::InvalidId(s.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct StateStore {
    root: PathBuf,
}

impl StateStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, key: &StateKey) -> Result<PathBuf> {
        Ok(self.root.join(key.relative_path()?))
    }

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf> {
        Ok(self.root.join(run_dir(run_id)?))
    }

    pub fn iter_dir(&self, run_id: &str, iteration: u32) -> Result<PathBuf> {
        Ok(self.root.join(iter_dir(run_id, iteration)?))
    }

    pub fn write(&self, key: &StateKey, document: &[u8]) -> Result<()> {
        let path = self.path(key)?;
        write_atomic(&path, document, |_| Ok(()))?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, key: &StateKey, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(key, &bytes)
    }

    pub fn read(&self, key: &StateKey) -> Result<Option<Vec<u8>>> {
        match fs::read(self.path(key)?) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn read_json<T: DeserializeOwned>(&self, key: &StateKey) -> Result<Option<T>> {
        match self.read(key)? {
            Some(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            None => Ok(None),
        }
    }

    pub fn exists(&self, key: &StateKey) -> Result<bool> {
        Ok(self.path(key)?.exists())
    }

    pub fn remove(&self, key: &StateKey) -> Result<()> {
        match fs::remove_file(self.path(key)?) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    /// Sorted entry names directly under `relative` (empty when absent).
    pub fn list(&self, relative: impl AsRef<Path>) -> Result<Vec<String>> {
        let dir = self.root.join(relative);
        let mut out = Vec::new();
        match fs::read_dir(&dir) {
            Ok(entries) => {
                for entry in entries {
                    let name = entry?.file_name().to_string_lossy().into_owned();
                    if !name.starts_with('.') {
                        out.push(name);
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        out.sort();
        Ok(out)
    }

    pub fn conversations(&self) -> Result<Vec<String>> {
        self.list("batches")
    }

    pub fn batch_ids(&self, conversation_id: &str) -> Result<Vec<String>> {
        Ok(self
            .list(Path::new("batches").join(component(conversation_id)?))?
            .into_iter()
            .filter_map(|n| n.strip_suffix(".json").map(str::to_string))
            .collect())
    }

    pub fn run_ids(&self) -> Result<Vec<String>> {
        self.list("runs")
    }
}

/// Writes `bytes` to a sibling temp file, runs `before_rename`, then renames
/// over `path`. If the hook fails the temp file is discarded and `path` is
/// left untouched.
pub(crate) fn write_atomic(
    path: &Path,
    bytes: &[u8],
    before_rename: impl FnOnce(&Path) -> io::Result<()>,
) -> io::Result<()> {
    let parent = path
        .parent()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no parent"))?;
    fs::create_dir_all(parent)?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(parent)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    before_rename(tmp.path())?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::Arc;

    fn store() -> (tempfile::TempDir, StateStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = StateStore::open(dir.path()).unwrap();
        (dir, s)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (_d, s) = store();
        let key = StateKey::Batch { conversation_id: "c1".into(), batch_id: "b1".into() };
        let doc = b"{\"hello\":\"world\"}\n\x00\xff";
        s.write(&key, doc).unwrap();
        assert_eq!(s.read(&key).unwrap().unwrap(), doc);
        assert_eq!(s.path(&key).unwrap(), s.root().join("batches/c1/b1.json"));
    }

    #[test]
    fn interrupted_writer_leaves_original_intact() {
        let (_d, s) = store();
        let key = StateKey::SwapRequest;
        s.write(&key, b"original").unwrap();
        let path = s.path(&key).unwrap();
        let err = write_atomic(&path, b"replacement", |_| {
            Err(io::Error::new(io::ErrorKind::Other, "killed"))
        });
        assert!(err.is_err());
        assert_eq!(s.read(&key).unwrap().unwrap(), b"original");
        // no stray temp files left in the directory
        assert_eq!(s.list("swap").unwrap(), vec!["request.json".to_string()]);
    }

    #[test]
    fn concurrent_reader_never_sees_a_prefix() {
        let (_d, s) = store();
        let key = StateKey::RunState { run_id: "r".into() };
        let a = vec![b'a'; 64 * 1024];
        let b = vec![b'b'; 96 * 1024];
        s.write(&key, &a).unwrap();
        let stop = Arc::new(AtomicBool::new(false));
        let reader = {
            let s = s.clone();
            let key = key.clone();
            let (a, b, stop) = (a.clone(), b.clone(), stop.clone());
            std::thread::spawn(move || {
                let mut reads = 0;
                while !stop.load(Ordering::Relaxed) {
                    let got = s.read(&key).unwrap().unwrap();
                    assert!(got == a || got == b, "partial read of {} bytes", got.len());
                    reads += 1;
                }
                reads
            })
        };
        for i in 0..200 {
            s.write(&key, if i % 2 == 0 { &b } else { &a }).unwrap();
        }
        stop.store(true, Ordering::Relaxed);
        assert!(reader.join().unwrap() > 0);
    }

    #[test]
    fn rejects_unsafe_components() {
        for bad in ["", "..", "a/b", ".hidden", "x y"] {
            assert!(component(bad).is_err(), "{bad:?}");
        }
        let key = StateKey::Cursor { session_id: "../etc".into() };
        assert!(key.relative_path().is_err());
    }

    #[test]
    fn layout_paths() {
        let cases = [
            (StateKey::Cursor { session_id: "s1".into() }, "cursors/s1.cursor"),
            (StateKey::RunState { run_id: "r".into() }, "runs/r/state.json"),
            (StateKey::BaselineMatrix { run_id: "r".into() }, "runs/r/baseline/matrix.json"),
            (
                StateKey::IterArtifact { run_id: "r".into(), iteration: 2, name: "plan.md".into() },
                "runs/r/iter-2/plan.md",
            ),
            (
                StateKey::Trial { run_id: "r".into(), iteration: 1, task_id: "T138".into(), trial: 0 },
                "runs/r/iter-1/trials/T138/0.jsonl",
            ),
            (StateKey::SwapRequest, "swap/request.json"),
            (StateKey::LastKnownGood, "swap/last_known_good.json"),
            (StateKey::ImageRegistry, "images/registry.json"),
        ];
        for (key, want) in cases {
            assert_eq!(key.relative_path().unwrap(), PathBuf::from(want));
        }
    }
}
