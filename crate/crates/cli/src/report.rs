//! Report envelope and output files.
//!
//! Reports never mix wall-clock measurements into deterministic fields:
//! anything timed lives under a `timings` key, so two runs with the same
//! seed agree byte for byte once those keys are dropped.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Outputs whose content is wall-clock measurements throughout.
pub const TIMING_OUTPUTS: &[&str] = &["bench-latency.csv", "bench-latency.dat"];

#[derive(Debug, Serialize)]
pub struct Report<T> {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: u64,
    /// Unix seconds; `SOURCE_DATE_EPOCH` when set.
    pub timestamp: u64,
    pub config: RunConfig,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Report<T> {
    pub fn new(command: &'static str, config: &RunConfig, body: T) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: config.seed,
            timestamp: timestamp(),
            config: config.clone(),
            body,
        }
    }
}

pub fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

/// Removes every `timings` key, recursively.
pub fn strip_timings(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("timings");
            m.values_mut().for_each(strip_timings);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

/// Where a command's files go. Without a directory the main JSON report is
/// printed and side files are skipped.
pub struct Sink {
    dir: Option<PathBuf>,
    pub written: Vec<PathBuf>,
}

impl Sink {
    pub fn new(dir: Option<&Path>) -> CliResult<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
        }
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
            written: Vec::new(),
        })
    }

    pub fn has_dir(&self) -> bool {
        self.dir.is_some()
    }

    pub fn file(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        if let Some(d) = &self.dir {
            let p = d.join(name);
            fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
            self.written.push(p);
        }
        Ok(())
    }

    pub fn report<T: Serialize>(&mut self, name: &str, report: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(report)?;
        text.push('\n');
        if self.dir.is_some() {
            self.file(name, text.as_bytes())
        } else {
            print!("{text}");
            Ok(())
        }
    }

    pub fn csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| CliError::Config(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
        if self.dir.is_some() {
            self.file(name, &bytes)
        } else {
            print!("{}", String::from_utf8_lossy(&bytes));
            Ok(())
        }
    }

    /// Whitespace-separated columns with a `#` header line, for gnuplot.
    pub fn dat(&mut self, name: &str, columns: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        let mut s = format!("# {}\n", columns.join(" "));
        for r in rows {
            s.push_str(&r.join(" "));
            s.push('\n');
        }
        self.file(name, s.as_bytes())
    }
}

/// Formats an optional number for a data file; gnuplot skips `?` points.
pub fn num(x: Option<f64>) -> String {
    x.map_or_else(|| "?".into(), |v| format!("{v}"))
}
