//! Report assembly and file output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use wdeficit::measurement::MeasurementProtocol;

use crate::config::RunConfig;
use crate::CliError;

/// Nine significant digits in positional notation.
pub fn sig9(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-5..=9).contains(&mag) {
        return format!("{x:.8e}");
    }
    let decimals = (8 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

pub struct Report {
    body: String,
    protocols: Vec<(String, MeasurementProtocol)>,
    summary: String,
}

impl Report {
    pub fn new() -> Self {
        Self { body: String::new(), protocols: Vec::new(), summary: String::new() }
    }

    pub fn line(&mut self, s: impl AsRef<str>) {
        self.body.push_str(s.as_ref());
        self.body.push('\n');
    }

    pub fn value(&mut self, key: &str, x: f64) {
        self.line(format!("{key} {}", sig9(x)));
    }

    pub fn protocol(&mut self, tag: String, p: &MeasurementProtocol) {
        self.protocols.push((tag, p.clone()));
    }

    pub fn summary(&mut self, s: String) {
        self.summary = s;
    }

    fn header(cfg: &RunConfig, wall: Duration) -> String {
        let mut h = String::new();
        let _ = writeln!(h, "# wdeficit {}", crate::VERSION);
        let _ = writeln!(h, "# config {cfg}");
        let _ = writeln!(h, "# seed {}", cfg.seed);
        let _ = writeln!(h, "# wall_ms {}", wall.as_millis());
        h
    }

    /// Writes the report and one protocol file per tag next to `--out`, or
    /// prints the report when no path is configured.
    pub fn emit(self, cfg: &RunConfig, wall: Duration) -> Result<(), CliError> {
        let text = format!("{}{}", Self::header(cfg, wall), self.body);
        match &cfg.out {
            None => print!("{text}"),
            Some(path) => {
                write(path, &text)?;
                for (tag, p) in &self.protocols {
                    let pp = protocol_path(path, tag);
                    let body = format!("{}# {tag}\n{}", Self::header(cfg, wall), p.to_text());
                    write(&pp, &body)?;
                }
                println!("{}", self.summary);
            }
        }
        Ok(())
    }
}

pub fn protocol_path(out: &Path, tag: &str) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(format!(".{tag}.protocol"));
    out.with_file_name(name)
}

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

/// CSV with the same `#` header lines as the structured reports.
pub fn emit_csv(cfg: &RunConfig, wall: Duration, csv: &str, summary: &str) -> Result<(), CliError> {
    let text = format!("{}{csv}", Report::header(cfg, wall));
    match &cfg.out {
        None => print!("{text}"),
        Some(path) => {
            write(path, &text)?;
            println!("{summary}");
        }
    }
    Ok(())
}
