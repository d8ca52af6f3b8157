//! Minimal tab-separated I/O shared by every file format in the crate.
//!
//! Lines starting with `#` are comments. Writers may emit a single provenance
//! comment (`# seed=... config_hash=...`) ahead of the header line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// A data row with its 1-based line number in the source file.
pub struct Row {
    pub line: usize,
    pub fields: Vec<String>,
}

pub struct TsvFile {
    pub path: PathBuf,
    pub rows: Vec<Row>,
}

impl TsvFile {
    pub fn parse_err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::parse(&self.path, line, msg)
    }
}

/// Reads a TSV file, checking the header against `expected` (exact column names).
pub fn read(path: &Path, expected: &[&str]) -> Result<TsvFile> {
    Ok(read_checked(path, |found| found == expected, &format!("{expected:?}"))?.1)
}

/// Reads a TSV file whose header starts with `prefix`; returns the full header.
pub fn read_with_prefix(path: &Path, prefix: &[&str]) -> Result<(Vec<String>, TsvFile)> {
    read_checked(path, |found| found.starts_with(prefix), &format!("{prefix:?} followed by any columns"))
}

fn read_checked(path: &Path, accept: impl Fn(&[&str]) -> bool, describe: &str) -> Result<(Vec<String>, TsvFile)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(|s| s.to_string()).collect();
        let Some(h) = &header else {
            let found: Vec<&str> = fields.iter().map(|s| s.as_str()).collect();
            if !accept(&found) {
                return Err(Error::parse(path, line_no, format!("expected header {describe}, found {found:?}")));
            }
            header = Some(fields);
            continue;
        };
        if fields.len() != h.len() {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {} columns, found {}", h.len(), fields.len()),
            ));
        }
        rows.push(Row {
            line: line_no,
            fields,
        });
    }
    let header = header.ok_or_else(|| Error::parse(path, 0, "missing header line"))?;
    Ok((
        header,
        TsvFile {
            path: path.to_path_buf(),
            rows,
        },
    ))
}

pub struct TsvWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TsvWriter {
    pub fn create(path: &Path, provenance: Option<&str>, header: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = TsvWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        if let Some(p) = provenance {
            w.raw(&format!("# {p}"))?;
        }
        w.row(header)?;
        Ok(w)
    }

    fn raw(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<()> {
        let joined = fields
            .iter()
            .map(|s| s.as_ref())
            .collect::<Vec<_>>()
            .join("\t");
        self.raw(&joined)
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
