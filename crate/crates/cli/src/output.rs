use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use akv_core::metrics::Table;

use crate::Format;

/// `out` if given, else the first free `runs/<command>-NNNN`.
pub fn run_dir(out: Option<&Path>, command: &str) -> Result<PathBuf> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        return Ok(dir.to_path_buf());
    }
    let root = Path::new("runs");
    fs::create_dir_all(root).context("cannot create runs/")?;
    for n in 1.. {
        let dir = root.join(format!("{command}-{n:04}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("cannot create {}", dir.display())),
        }
    }
    unreachable!()
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Writes `<name>.csv` or `<name>.json` and returns the path.
pub fn write_table(dir: &Path, name: &str, table: &Table, format: Format) -> Result<PathBuf> {
    let path = match format {
        Format::Csv => dir.join(format!("{name}.csv")),
        Format::Json => dir.join(format!("{name}.json")),
    };
    let mut w = create(&path)?;
    match format {
        Format::Csv => table.write_csv(&mut w)?,
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, &table.to_json())?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(path)
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
