//! Candidate image builds, the image registry and the last-known-good record.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::model::ImageRef;
use crate::store::{StateKey, StateStore};
use crate::workspace::Workspace;

/// A tree containing this file makes the simulated build fail.
pub const BUILD_FAIL_MARKER: &str = "BUILD_FAIL";

pub trait ImageBuilder: Send + Sync {
    fn build(&self, rev: &str) -> Result<ImageRef>;
}

/// Exports the tree at `rev` into `blobs/<image_id>/`, where the image id is
/// derived from the tree hash. The simulated runtime reads images from there.
pub struct SimBuilder {
    workspace: Arc<dyn Workspace>,
    blobs: PathBuf,
    clock: Arc<dyn Clock>,
}

impl SimBuilder {
    pub fn new(workspace: Arc<dyn Workspace>, blobs: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Self {
        Self { workspace, blobs: blobs.into(), clock }
    }
}

pub fn sim_image_id(tree_id: &str) -> String {
    format!("sim-{}", &tree_id[..tree_id.len().min(16)])
}

impl ImageBuilder for SimBuilder {
    fn build(&self, rev: &str) -> Result<ImageRef> {
        if !self.workspace.has_rev(rev) {
            return Err(Error::BuildFailed(format!("unknown revision {rev}")));
        }
        let tree = self.workspace.tree_id(rev)?;
        let image_id = sim_image_id(&tree);
        let dest = self.blobs.join(&image_id);
        if !dest.is_dir() {
            let staging = self.blobs.join(format!(".staging-{image_id}-{}", std::process::id()));
            let _ = std::fs::remove_dir_all(&staging);
            self.workspace.export(rev, &staging)?;
            if staging.join(BUILD_FAIL_MARKER).exists() {
                let _ = std::fs::remove_dir_all(&staging);
                return Err(Error::BuildFailed(format!("build of {rev} failed")));
            }
            if let Err(e) = std::fs::rename(&staging, &dest) {
                let _ = std::fs::remove_dir_all(&staging);
                if !dest.is_dir() {
                    return Err(e.into());
                }
            }
        }
        Ok(ImageRef { image_id, built_from_rev: rev.to_string(), built_at: self.clock.now() })
    }
}

/// Runs an external build command over an exported build context.
/// `{context}` and `{tag}` in the argument template are substituted.
pub struct CommandBuilder {
    workspace: Arc<dyn Workspace>,
    command: Vec<String>,
    repository: String,
    clock: Arc<dyn Clock>,
}

impl CommandBuilder {
    pub fn new(workspace: Arc<dyn Workspace>, command: Vec<String>, repository: impl Into<String>, clock: Arc<dyn Clock>) -> Self {
        Self { workspace, command, repository: repository.into(), clock }
    }

    pub fn docker(workspace: Arc<dyn Workspace>, clock: Arc<dyn Clock>) -> Self {
        let command = ["docker", "build", "-q", "-t", "{tag}", "{context}"].map(String::from).to_vec();
        Self::new(workspace, command, "moss-substrate", clock)
    }
}

impl ImageBuilder for CommandBuilder {
    fn build(&self, rev: &str) -> Result<ImageRef> {
        let tree = self.workspace.tree_id(rev)?;
        let tag = format!("{}:{}", self.repository, &tree[..tree.len().min(16)]);
        let ctx = tempfile::tempdir()?;
        self.workspace.export(rev, ctx.path())?;
        let args: Vec<String> = self
            .command
            .iter()
            .map(|a| a.replace("{context}", &ctx.path().to_string_lossy()).replace("{tag}", &tag))
            .collect();
        let (program, rest) = args.split_first().ok_or_else(|| Error::BuildFailed("empty build command".into()))?;
        let out = Command::new(program)
            .args(rest)
            .output()
            .map_err(|e| Error::BuildFailed(format!("{program}: {e}")))?;
        if !out.status.success() {
            return Err(Error::BuildFailed(format!(
                "{program} exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(ImageRef { image_id: tag, built_from_rev: rev.to_string(), built_at: self.clock.now() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub built_from_rev: String,
    pub built_at: DateTime<Utc>,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRegistry {
    pub images: BTreeMap<String, RegistryEntry>,
}

impl ImageRegistry {
    pub fn load(store: &StateStore) -> Result<Self> {
        Ok(store.read_json(&StateKey::ImageRegistry)?.unwrap_or_default())
    }

    pub fn save(&self, store: &StateStore) -> Result<()> {
        store.write_json(&StateKey::ImageRegistry, self)
    }

    /// Idempotent: rebuilding the same image keeps its first build time.
    pub fn record(&mut self, image: &ImageRef) {
        self.images.entry(image.image_id.clone()).or_insert_with(|| RegistryEntry {
            built_from_rev: image.built_from_rev.clone(),
            built_at: image.built_at,
            tags: Vec::new(),
        });
    }

    pub fn tag(&mut self, image_id: &str, tag: &str) -> Result<()> {
        let entry = self
            .images
            .get_mut(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
        if !entry.tags.iter().any(|t| t == tag) {
            entry.tags.push(tag.to_string());
            entry.tags.sort();
        }
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<ImageRef> {
        self.images.get(image_id).map(|e| ImageRef {
            image_id: image_id.to_string(),
            built_from_rev: e.built_from_rev.clone(),
            built_at: e.built_at,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LastKnownGood {
    pub image: ImageRef,
    pub recorded_at: DateTime<Utc>,
}

impl LastKnownGood {
    pub fn load(store: &StateStore) -> Result<Option<Self>> {
        store.read_json(&StateKey::LastKnownGood)
    }

    pub fn save(&self, store: &StateStore) -> Result<()> {
        store.write_json(&StateKey::LastKnownGood, self)
    }
}
