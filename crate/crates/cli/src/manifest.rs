//! `manifest.json`: what ran, with which resolved configuration, and how it ended.

use std::path::Path;
use std::process::Command;

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub seed: u64,
    pub git_describe: Option<String>,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Manifest {
    pub fn start<C: Serialize>(command: &str, config: &C, seed: u64) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let digest = Sha256::digest(serde_json::to_vec(&config)?);
        Ok(Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            config_sha256: hex::encode(digest),
            seed,
            git_describe: git_describe(),
            started: chrono::Utc::now().to_rfc3339(),
            finished: None,
            status: "running".into(),
            error: None,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn finish(&mut self, outcome: &Result<()>) {
        self.finished = Some(chrono::Utc::now().to_rfc3339());
        match outcome {
            Ok(()) => self.status = "ok".into(),
            Err(e) => {
                self.status = "failed".into();
                self.error = Some(format!("{e:#}"));
            }
        }
    }
}

fn git_describe() -> Option<String> {
    let out = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}
