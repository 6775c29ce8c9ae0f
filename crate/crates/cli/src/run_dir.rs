//! Run directory layout: resolved config, manifest, CSVs and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const BUILD_ID: &str = env!("CODIM_BUILD_ID");
pub const CONFIG_FILE: &str = "config.resolved";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory and writes the config snapshot and manifest.
    pub fn create(cfg: &RunConfig, command: &str) -> Result<Self> {
        let root = cfg.out_dir.clone();
        fs::create_dir_all(&root).with_context(|| format!("creating run directory {}", root.display()))?;
        let dir = Self { root };
        let snapshot = cfg.snapshot();
        dir.write(CONFIG_FILE, snapshot.as_bytes())?;
        let hash: String = Sha256::digest(snapshot.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
        let manifest = format!(
            "command = {command}\nconfig_sha256 = {hash}\nseed = {}\ndata_seed = {}\nnoise_seed = {}\nbuild = {BUILD_ID}\n",
            cfg.train.seed, cfg.data_seed, cfg.noise_seed
        );
        dir.write(MANIFEST_FILE, manifest.as_bytes())?;
        Ok(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    /// Runs `f` against an in-memory buffer and writes the result to `name`.
    pub fn write_with<F>(&self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> codim_core::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf).with_context(|| format!("serialising {name}"))?;
        self.write(name, &buf)
    }
}
