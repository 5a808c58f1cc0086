//! Run manifests: enough parameters to rerun a command and get the same
//! bytes back. No timestamps or host details, so manifests are themselves
//! reproducible.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

use crate::Global;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MODEL_FILE: &str = "model.txt";

pub struct RunManifest {
    command: String,
    entries: Vec<(String, String)>,
    outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, global: &Global) -> Self {
        let mut m = Self {
            command: command.to_string(),
            entries: Vec::new(),
            outputs: Vec::new(),
        };
        m.param("seed", global.seed);
        if let Some(p) = &global.model_file {
            m.param("model_overrides", p.display());
        }
        m
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn output(&mut self, name: impl Into<String>) -> &mut Self {
        self.outputs.push(name.into());
        self
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "artifact={} {}\ncommand={}\n",
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION"),
            self.command
        );
        for (k, v) in &self.entries {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&format!("model={MODEL_FILE}\n"));
        for o in &self.outputs {
            s.push_str(&format!("output={o}\n"));
        }
        s
    }

    /// Writes the manifest and the effective latency model next to the
    /// outputs.
    pub fn write(&self, dir: &Path, global: &Global) -> anyhow::Result<()> {
        write_file(&dir.join(MODEL_FILE), global.model.to_text().as_bytes())?;
        write_file(&dir.join(MANIFEST_FILE), self.to_text().as_bytes())
    }
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_file(path: &PathBuf, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
