//! Output-directory management: every file gets a JSON sidecar carrying the
//! resolved config, master seed, and code version.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use deepgp_core::{Error, Result};

pub struct OutputWriter {
    dir: PathBuf,
    sidecar: serde_json::Value,
}

impl OutputWriter {
    pub fn new<C: Serialize>(dir: &Path, command: &str, config: &C, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::data(format!("cannot create {}: {e}", dir.display())))?;
        let sidecar = json!({
            "command": command,
            "config": serde_json::to_value(config)?,
            "seed": seed,
            "version": env!("CARGO_PKG_VERSION"),
        });
        Ok(OutputWriter {
            dir: dir.to_path_buf(),
            sidecar,
        })
    }

    /// Write `name` with `contents` plus `<name>.meta.json`.
    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)?;
        let meta = self.dir.join(format!("{name}.meta.json"));
        std::fs::write(&meta, serde_json::to_string_pretty(&self.sidecar)?)?;
        Ok(path)
    }

    /// Write a JSON value with a stable, pretty layout plus its sidecar.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, &serde_json::to_string_pretty(value)?)
    }
}

/// Long-form CSV builder: one observation per row.
pub struct LongCsv {
    header: String,
    rows: Vec<String>,
}

impl LongCsv {
    pub fn new(columns: &[&str]) -> Self {
        LongCsv {
            header: columns.join(","),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, fields: &[String]) {
        self.rows.push(fields.join(","));
    }

    pub fn finish(&self) -> String {
        let mut out = self.header.clone();
        out.push('\n');
        for r in &self.rows {
            out.push_str(r);
            out.push('\n');
        }
        out
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
