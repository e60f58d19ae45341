//! CSV and JSON writers for run directories.
//!
//! Every CSV starts with one `# config: {...}` comment line holding the
//! compact JSON of the config that produced it; csv readers configured with
//! `comment(Some(b'#'))` skip it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{ExperimentError, Result};

/// Machine-readable tool version, also printed by `--version`.
pub const VERSION: &str = concat!("actiondiff ", env!("CARGO_PKG_VERSION"));

const CONFIG_PREFIX: &str = "# config: ";

pub fn write_csv<C: Serialize>(path: &Path, config: &C, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{CONFIG_PREFIX}{}", serde_json::to_string(config)?)?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    atomic_write(path, &buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// The config embedded in a CSV written by [`write_csv`].
pub fn read_csv_config(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path)?;
    let line = text.lines().next().unwrap_or_default();
    let json = line
        .strip_prefix(CONFIG_PREFIX)
        .ok_or_else(|| ExperimentError::Invalid(format!("{} has no embedded config line", path.display())))?;
    Ok(serde_json::from_str(json)?)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let cfg = serde_json::json!({"seed": 7, "layers": [1, 3]});
        write_csv(&p, &cfg, &["a", "b"], &[vec!["1".into(), "0.5".into()]]).unwrap();
        assert_eq!(read_csv_config(&p).unwrap(), cfg);
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(&p).unwrap();
        assert_eq!(r.headers().unwrap(), vec!["a", "b"]);
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 1);
        assert_eq!(&rows[0][1], "0.5");
    }
}
