//! Output files with an embedded reproducibility record.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

/// Version of the JSON and CSV layouts below.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub schema_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Command-line arguments as typed.
    pub arguments: Vec<String>,
    /// Flags given on the command line, as parsed.
    pub overrides: Overrides,
    /// Resolved configuration, defaults included.
    pub config: RunConfig,
}

impl Metadata {
    pub fn new(command: &str, config: &RunConfig, overrides: &Overrides) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool: "dynrd",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_hash: config.hash(command),
            seed: config.sim.seed,
            arguments: std::env::args().skip(1).collect(),
            overrides: overrides.clone(),
            config: config.clone(),
        }
    }

    fn comment_lines(&self) -> Vec<String> {
        vec![
            format!("# tool: {} {}", self.tool, self.version),
            format!("# schema_version: {}", self.schema_version),
            format!("# command: {}", self.command),
            format!("# config_hash: {}", self.config_hash),
            format!("# seed: {}", self.seed),
            format!("# arguments: {}", one_line(&self.arguments)),
            format!("# overrides: {}", one_line(&self.overrides)),
            format!("# config: {}", one_line(&self.config)),
        ]
    }
}

fn one_line(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("metadata serialises")
}

/// Writes files under one output directory.
pub struct OutDir {
    root: PathBuf,
    meta: Metadata,
}

impl OutDir {
    pub fn create(root: &Path, meta: Metadata) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|source| CliError::Output {
            path: root.display().to_string(),
            source,
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            meta,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|source| CliError::Output {
            path: path.display().to_string(),
            source,
        })?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    /// JSON document `{"metadata": ..., <fields of body>}`.
    pub fn json(&self, name: &str, body: &impl Serialize) -> Result<PathBuf, CliError> {
        let mut doc = serde_json::Map::new();
        doc.insert(
            "metadata".into(),
            serde_json::to_value(&self.meta).expect("metadata serialises"),
        );
        match serde_json::to_value(body).expect("output serialises") {
            Value::Object(fields) => doc.extend(fields),
            other => {
                doc.insert("data".into(), other);
            }
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(doc)).expect("output serialises");
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// CSV with the metadata as leading `#` comment lines.
    pub fn csv<R: Serialize>(
        &self,
        name: &str,
        records: impl IntoIterator<Item = R>,
    ) -> Result<PathBuf, CliError> {
        let mut buf = Vec::new();
        for line in self.meta.comment_lines() {
            writeln!(buf, "{line}").expect("writing to memory");
        }
        {
            let mut writer = csv::Writer::from_writer(&mut buf);
            for r in records {
                writer.serialize(r).map_err(dynrd::Error::from)?;
            }
            writer.flush().expect("writing to memory");
        }
        self.write_bytes(name, &buf)
    }

    /// Raw bytes preceded by the metadata comment lines.
    pub fn commented(&self, name: &str, body: &[u8]) -> Result<PathBuf, CliError> {
        let mut buf = Vec::new();
        for line in self.meta.comment_lines() {
            writeln!(buf, "{line}").expect("writing to memory");
        }
        buf.extend_from_slice(body);
        self.write_bytes(name, &buf)
    }
}
