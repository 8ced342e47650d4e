//! Atomic file output and CSV encoding.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{LabError, LabResult};

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place. On failure the destination is left untouched.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> LabResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| LabError::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| LabError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| LabError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| LabError::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> LabResult<Vec<u8>> {
    fs::read(path).map_err(|e| LabError::io(path, e))
}

pub fn read_text(path: &Path) -> LabResult<String> {
    fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

/// In-memory CSV table with a fixed header, written LF-terminated.
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width differs from header");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        // Writing into a Vec cannot fail.
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn write(&self, path: &Path) -> LabResult<()> {
        write_atomic(path, &self.to_bytes())
    }
}

/// Shortest round-trip decimal form.
pub fn real(x: f64) -> String {
    format!("{x}")
}

/// `out` with its extension replaced by `suffix` (e.g. `run.csv` →
/// `run.mass.csv`).
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_uses_lf_and_quotes_when_needed() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), "x,y".into()]);
        assert_eq!(t.to_bytes(), b"a,b\n1,\"x,y\"\n");
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let err = write_atomic(Path::new("/nonexistent/dir/x.csv"), b"").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn sibling_names() {
        assert_eq!(sibling(Path::new("out/run.csv"), "mass.csv"), PathBuf::from("out/run.mass.csv"));
        assert_eq!(sibling(Path::new("run"), "csv"), PathBuf::from("run.csv"));
    }
}
