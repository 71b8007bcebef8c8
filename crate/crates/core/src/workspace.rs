//! Checkout of the inner substrate repository that Implement edits.

use std::path::{Path, PathBuf};
use std::process::Command;

use crate::error::{Error, Result};

pub trait Workspace: Send + Sync {
    fn root(&self) -> &Path;
    fn current_rev(&self) -> Result<String>;
    /// Commits every change in the tree; `None` when there is nothing to commit.
    fn commit(&self, message: &str) -> Result<Option<String>>;
    /// Makes the tree, index and HEAD byte-identical to `rev`.
    fn reset_hard(&self, rev: &str) -> Result<()>;
    /// Moves HEAD to `rev` keeping the working tree, so later commits squash.
    fn reset_soft(&self, rev: &str) -> Result<()>;
    fn diff(&self, rev_a: &str, rev_b: &str) -> Result<String>;
    /// Content hash of the tree at `rev`.
    fn tree_id(&self, rev: &str) -> Result<String>;
    /// Copies the tree at `rev` into `dest`.
    fn export(&self, rev: &str, dest: &Path) -> Result<()>;
    fn has_rev(&self, rev: &str) -> bool;
}

/// Git-backed workspace. Commits use a fixed identity.
#[derive(Debug, Clone)]
pub struct GitWorkspace {
    root: PathBuf,
}

impl GitWorkspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let ws = Self { root: root.into() };
        ws.git(&["rev-parse", "--git-dir"])?;
        Ok(ws)
    }

    /// Creates a repository with one initial commit of `files`.
    pub fn init(root: impl Into<PathBuf>, files: &[(&str, &str)]) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        let ws = Self { root };
        ws.git(&["init", "-q", "-b", "main"])?;
        for (rel, content) in files {
            let p = ws.root.join(rel);
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(p, content)?;
        }
        ws.git(&["add", "-A"])?;
        ws.git(&["commit", "-q", "--allow-empty", "-m", "initial"])?;
        Ok(ws)
    }

    fn git(&self, args: &[&str]) -> Result<String> {
        let out = Command::new("git")
            .arg("-C")
            .arg(&self.root)
            .args(["-c", "user.name=moss", "-c", "user.email=moss@localhost", "-c", "commit.gpgsign=false"])
            .args(args)
            .env("GIT_TERMINAL_PROMPT", "0")
            .output()
            .map_err(|e| Error::Workspace(format!("git: {e}")))?;
        if !out.status.success() {
            return Err(Error::Workspace(format!(
                "git {}: {}",
                args.join(" "),
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }
}

impl Workspace for GitWorkspace {
    fn root(&self) -> &Path {
        &self.root
    }

    fn current_rev(&self) -> Result<String> {
        Ok(self.git(&["rev-parse", "HEAD"])?.trim().to_string())
    }

    fn commit(&self, message: &str) -> Result<Option<String>> {
        self.git(&["add", "-A"])?;
        if self.git(&["status", "--porcelain"])?.trim().is_empty() {
            return Ok(None);
        }
        self.git(&["commit", "-q", "-m", message])?;
        self.current_rev().map(Some)
    }

    fn reset_hard(&self, rev: &str) -> Result<()> {
        self.git(&["reset", "-q", "--hard", rev])?;
        self.git(&["clean", "-q", "-fdx"])?;
        Ok(())
    }

    fn reset_soft(&self, rev: &str) -> Result<()> {
        self.git(&["reset", "-q", "--soft", rev])?;
        Ok(())
    }

    fn diff(&self, rev_a: &str, rev_b: &str) -> Result<String> {
        self.git(&["diff", "--no-color", "--no-ext-diff", rev_a, rev_b])
    }

    fn tree_id(&self, rev: &str) -> Result<String> {
        Ok(self.git(&["rev-parse", &format!("{rev}^{{tree}}")])?.trim().to_string())
    }

    fn export(&self, rev: &str, dest: &Path) -> Result<()> {
        std::fs::create_dir_all(dest)?;
        let archive = Command::new("git")
            .arg("-C")
            .arg(&self.root)
            .args(["archive", "--format=tar", rev])
            .output()
            .map_err(|e| Error::Workspace(format!("git archive: {e}")))?;
        if !archive.status.success() {
            return Err(Error::Workspace(format!(
                "git archive {rev}: {}",
                String::from_utf8_lossy(&archive.stderr).trim()
            )));
        }
        let mut tar = Command::new("tar")
            .arg("-x")
            .arg("-C")
            .arg(dest)
            .stdin(std::process::Stdio::piped())
            .spawn()
            .map_err(|e| Error::Workspace(format!("tar: {e}")))?;
        {
            use std::io::Write;
            let mut stdin = tar.stdin.take().expect("piped stdin");
            stdin.write_all(&archive.stdout)?;
        }
        if !tar.wait()?.success() {
            return Err(Error::Workspace("tar extraction failed".into()));
        }
        Ok(())
    }

    fn has_rev(&self, rev: &str) -> bool {
        self.git(&["cat-file", "-e", &format!("{rev}^{{commit}}")]).is_ok()
    }
}
