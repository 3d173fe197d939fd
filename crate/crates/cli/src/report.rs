//! Report files. Everything written here is a pure function of the config;
//! the wall-clock timestamp lives only in `meta.json`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

pub const REPORT_SCHEMA: &str = "stacksim.report/1";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub struct ReportDir {
    pub dir: PathBuf,
    pub command: &'static str,
    pub scenario: String,
    pub config_hash: String,
}

/// Envelope shared by every JSON report.
#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: &'static str,
    command: &'a str,
    scenario: &'a str,
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

/// A CSV row tagged with the config hash.
#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    config_hash: &'a str,
    #[serde(flatten)]
    row: &'a T,
}

impl ReportDir {
    pub fn create(dir: PathBuf, command: &'static str, scenario: &str, config_hash: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        Ok(Self {
            dir,
            command,
            scenario: scenario.to_string(),
            config_hash: config_hash.to_string(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(io(&path))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, body: &T) -> Result<PathBuf, CliError> {
        let env = Envelope {
            schema: REPORT_SCHEMA,
            command: self.command,
            scenario: &self.scenario,
            config_hash: &self.config_hash,
            body,
        };
        let mut text = serde_json::to_string_pretty(&env).expect("report serializes");
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// One CSV row per item, columns in field order; nested values are
    /// written as JSON text.
    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let csv_err = |e: csv::Error| CliError::Io {
            path: path.clone(),
            source: std::io::Error::other(e),
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header_written = false;
        for row in rows {
            let value = serde_json::to_value(Tagged {
                config_hash: &self.config_hash,
                row,
            })
            .expect("row serializes");
            let serde_json::Value::Object(map) = value else {
                panic!("CSV rows must serialize as structs");
            };
            if !header_written {
                w.write_record(map.keys()).map_err(csv_err)?;
                header_written = true;
            }
            w.write_record(map.values().map(cell)).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io {
            path: path.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
        self.write_bytes(name, &bytes)
    }

    /// `meta.json`: the only output that varies between identical runs.
    pub fn write_meta(&self, config_origin: &str) -> Result<PathBuf, CliError> {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let meta = serde_json::json!({
            "command": self.command,
            "config": config_origin,
            "config_hash": self.config_hash,
            "version": env!("CARGO_PKG_VERSION"),
            "timestamp_unix_s": now,
        });
        let mut text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        text.push('\n');
        self.write_bytes("meta.json", text.as_bytes())
    }
}

fn cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
