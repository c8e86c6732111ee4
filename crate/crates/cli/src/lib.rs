//! Library side of the `deskbert` command: every subcommand is a plain
//! function here so tests can call it without spawning a process.

pub mod bench;
pub mod config;
pub mod inspect;
pub mod model;
pub mod prepare;
pub mod train;

pub use config::{RunConfig, TransportKind};

use std::path::Path;

use anyhow::{Context, Result};

/// Write an RFC 4180 CSV file from a header and string rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}
