//! Run manifests: one `key=value` line per setting or result, written as
//! `manifest.txt` next to a command's outputs.

use std::fmt::Display;
use std::path::{Path, PathBuf};

pub struct RunManifest {
    lines: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut m = RunManifest { lines: Vec::new() };
        m.set("command", command);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    /// Writes `dir/manifest.txt` and returns its path.
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.txt");
        let text: String = self.lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
