//! Line-delimited persistence for datasets, run files and reports.
//!
//! Run files are only ever appended to, one flushed line per record, so an
//! interrupted run leaves every finished record intact; at worst the last
//! line is partial, and [`prepare_resume`] cuts it off.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::de::DeserializeOwned;

use super::RuntimeError;
use crate::model::{RunRecord, TaskInstance};

fn io_err(path: &Path, e: impl std::fmt::Display) -> RuntimeError {
    RuntimeError::Io(format!("{}: {e}", path.display()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RuntimeError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| {
            RuntimeError::Validation(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<TaskInstance>, RuntimeError> {
    read_jsonl(path)
}

pub fn read_run_file(path: &Path) -> Result<Vec<RunRecord>, RuntimeError> {
    read_jsonl(path)
}

/// Makes `path` safe to append to and returns the task ids it already holds.
/// A trailing line without a newline is an interrupted write and is removed.
pub fn prepare_resume(path: &Path) -> Result<BTreeSet<String>, RuntimeError> {
    let mut file = match OpenOptions::new().read(true).write(true).open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeSet::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete < bytes.len() {
        log::warn!(
            "{}: dropping {} bytes of an interrupted record",
            path.display(),
            bytes.len() - complete
        );
        file.set_len(complete as u64).map_err(|e| io_err(path, e))?;
        file.seek(SeekFrom::End(0)).map_err(|e| io_err(path, e))?;
    }
    let text = std::str::from_utf8(&bytes[..complete]).map_err(|e| io_err(path, e))?;
    let mut done = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(line).map_err(|e| {
            RuntimeError::Validation(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        done.insert(record.task_id);
    }
    Ok(done)
}

/// Appends records to a run file, one flushed line each.
pub struct RunWriter {
    file: BufWriter<File>,
}

impl RunWriter {
    pub fn append(path: &Path) -> Result<Self, RuntimeError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(RunWriter {
            file: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &RunRecord) -> std::io::Result<()> {
        let line = serde_json::to_string(record).map_err(std::io::Error::other)?;
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.flush()
    }
}
