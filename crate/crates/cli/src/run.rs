use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;
use unitsem_core::config::PipelineConfig;

use crate::Common;

/// One command invocation: resolved config, output directory and run log.
pub struct Run {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    command: &'static str,
    log: Vec<String>,
    started: Instant,
}

impl Run {
    pub fn start(command: &'static str, common: &Common) -> anyhow::Result<Run> {
        let started = Instant::now();
        let cfg = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                PipelineConfig::from_toml(&text)?
            }
            None => PipelineConfig::default(),
        };
        let cfg = cfg.resolve(common.seed)?;
        fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        let run = Run { cfg, out: common.out.clone(), command, log: Vec::new(), started };
        run.write("config.resolved.toml", run.cfg.to_toml())?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn log(&mut self, line: impl Into<String>) {
        self.log.push(line.into());
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> anyhow::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn finish(self) -> anyhow::Result<()> {
        let mut text = format!("command: {}\nseed: {}\n", self.command, self.cfg.seed);
        for line in &self.log {
            text.push_str(line);
            text.push('\n');
        }
        text.push_str(&format!("elapsed_s: {:.3}\n", self.started.elapsed().as_secs_f64()));
        self.write("run.log", text)?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
