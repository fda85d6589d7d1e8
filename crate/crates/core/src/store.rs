//! Append-only JSON Lines records file, one `ImageResult` per line.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

use crate::record::ImageResult;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("records line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("records i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Abort on the first malformed line.
    #[default]
    Strict,
    /// Skip malformed lines and count them.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadedResults {
    pub results: Vec<ImageResult>,
    pub skipped: usize,
}

/// Serializes one result as a single newline-terminated line.
pub fn encode_line(result: &ImageResult) -> String {
    let mut line = serde_json::to_string(result).expect("image result serializes");
    line.push('\n');
    line
}

/// Appends results to `path`, creating it if needed. Each result goes out
/// in a single write on an append-mode handle, so an interrupted run leaves
/// at most one incomplete trailing line.
pub fn append_results<'a, I>(path: &Path, results: I) -> Result<(), StoreError>
where
    I: IntoIterator<Item = &'a ImageResult>,
{
    let mut writer = RecordWriter::open(path)?;
    for r in results {
        writer.append(r)?;
    }
    Ok(())
}

pub struct RecordWriter {
    file: File,
}

impl RecordWriter {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file })
    }

    pub fn append(&mut self, result: &ImageResult) -> Result<(), StoreError> {
        self.file.write_all(encode_line(result).as_bytes())?;
        Ok(())
    }

    pub fn sync(&mut self) -> Result<(), StoreError> {
        self.file.flush()?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// Parses a records stream. A later line for an already-seen `image_id`
/// replaces the earlier one in place.
pub fn read_results<R: BufRead>(reader: R, mode: LoadMode) -> Result<LoadedResults, StoreError> {
    let mut out = LoadedResults::default();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ImageResult>(&line) {
            Ok(result) => match index.get(&result.image_id) {
                Some(&i) => out.results[i] = result,
                None => {
                    index.insert(result.image_id.clone(), out.results.len());
                    out.results.push(result);
                }
            },
            Err(e) => match mode {
                LoadMode::Strict => {
                    return Err(StoreError::Malformed {
                        line: n + 1,
                        message: e.to_string(),
                    })
                }
                LoadMode::Lenient => {
                    log::warn!("skipping malformed records line {}: {e}", n + 1);
                    out.skipped += 1;
                }
            },
        }
    }
    Ok(out)
}

pub fn load_results(path: &Path, mode: LoadMode) -> Result<LoadedResults, StoreError> {
    read_results(BufReader::new(File::open(path)?), mode)
}
