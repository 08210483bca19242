//! Work-directory artifacts: config tagging, hashing and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

const TAG_PREFIX: &str = "# sensorseq config=";
pub const MANIFEST_DIR: &str = "manifests";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Prepends the config tag line to a text artifact.
pub fn tagged(hash: &str, body: &str) -> String {
    format!("{TAG_PREFIX}{hash}\n{body}")
}

/// Splits a tagged text artifact into its config hash and body.
pub fn untag(text: &str) -> (Option<&str>, &str) {
    match text.strip_prefix(TAG_PREFIX) {
        Some(rest) => match rest.split_once('\n') {
            Some((hash, body)) => (Some(hash.trim()), body),
            None => (Some(rest.trim()), ""),
        },
        None => (None, text),
    }
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    stage: &'a str,
    config_hash: &'a str,
    seeds: serde_json::Value,
    threads: Option<usize>,
    format: &'a str,
    inputs: &'a [FileDigest],
    outputs: &'a [FileDigest],
    seconds: f64,
    details: &'a serde_json::Value,
}

/// Reads and writes files under the work directory for one stage and
/// records what it touched.
pub struct StageRun<'a> {
    pub ctx: &'a crate::Context,
    stage: &'static str,
    started: Instant,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    pub details: serde_json::Value,
}

impl<'a> StageRun<'a> {
    pub fn new(ctx: &'a crate::Context, stage: &'static str) -> Self {
        Self {
            ctx,
            stage,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            details: serde_json::Value::Object(Default::default()),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.ctx.work.join(name)
    }

    fn display(&self, path: &Path) -> String {
        path.strip_prefix(&self.ctx.work).unwrap_or(path).display().to_string()
    }

    pub fn read_bytes_at(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.inputs.push(FileDigest {
            path: self.display(path),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    pub fn read_bytes(&mut self, name: &str) -> Result<Vec<u8>, CliError> {
        let path = self.path(name);
        self.read_bytes_at(&path)
    }

    /// Reads a text artifact, dropping its tag line. A tag from another
    /// config is reported on stderr.
    pub fn read_text_at(&mut self, path: &Path) -> Result<String, CliError> {
        let bytes = self.read_bytes_at(path)?;
        let text = String::from_utf8(bytes).map_err(|_| CliError::Data(format!("{}: not UTF-8", path.display())))?;
        let (hash, body) = untag(&text);
        if let Some(h) = hash {
            self.ctx.check_hash(h, path);
        }
        Ok(body.to_string())
    }

    pub fn read_text(&mut self, name: &str) -> Result<String, CliError> {
        let path = self.path(name);
        self.read_text_at(&path)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.outputs.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Writes a text artifact with the config tag line.
    pub fn write_text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let text = tagged(&self.ctx.hash, body);
        self.write_bytes(name, text.as_bytes())
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("detail serializes");
        self.details.as_object_mut().expect("details is an object").insert(key.to_string(), v);
    }

    /// Writes `manifests/<stage>.json`.
    pub fn finish(self) -> Result<(), CliError> {
        let ctx = self.ctx;
        let seeds = serde_json::json!({
            "synth": ctx.cfg.synth.seed,
            "split": ctx.cfg.seeds.split,
            "model": ctx.cfg.seeds.model,
            "baseline": ctx.cfg.seeds.baseline,
            "shuffle": ctx.cfg.train.shuffle_seed,
        });
        let manifest = Manifest {
            stage: self.stage,
            config_hash: &ctx.hash,
            seeds,
            threads: ctx.threads,
            format: ctx.format.as_str(),
            inputs: &self.inputs,
            outputs: &self.outputs,
            seconds: self.started.elapsed().as_secs_f64(),
            details: &self.details,
        };
        let dir = ctx.work.join(MANIFEST_DIR);
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join(format!("{}.json", self.stage));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}
