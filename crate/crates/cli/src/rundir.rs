//! Run directories: every output of a command lands under one directory
//! whose `manifest.txt` lists each file with its size in bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub const MANIFEST: &str = "manifest.txt";

pub struct RunDir {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl RunDir {
    pub fn create(root: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root,
            files: Vec::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.record(&p);
        Ok(p)
    }

    /// Notes a file written by someone else.
    pub fn record(&mut self, p: &Path) {
        self.files.push(p.to_path_buf());
    }

    /// Notes every file under `dir`, recursively, in sorted order.
    pub fn record_tree(&mut self, dir: &Path) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                self.record_tree(&p)?;
            } else {
                self.record(&p);
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.files.sort();
        self.files.dedup();
        let mut text = String::new();
        for f in &self.files {
            let len = std::fs::metadata(f)
                .with_context(|| format!("reading {}", f.display()))?
                .len();
            let rel = f.strip_prefix(&self.root).unwrap_or(f);
            let _ = writeln!(text, "{} {len}", rel.display());
        }
        let p = self.path(MANIFEST);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}
