//! JSONL persistence for records and auxiliary line-oriented files.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{InstructionRecord, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line_no}: {reason}")]
    MalformedLine {
        line_no: usize,
        line: String,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl JsonlError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        JsonlError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Strict mode stops at the first malformed line; lenient mode reports it and keeps going.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReadMode {
    #[default]
    Strict,
    Lenient,
}

/// On-disk shape of a record line: the record plus the schema tag.
#[derive(Serialize)]
struct RecordLineOut<'a> {
    schema: &'a str,
    #[serde(flatten)]
    record: &'a InstructionRecord,
}

#[derive(Deserialize)]
struct RecordLineIn {
    schema: String,
    #[serde(flatten)]
    record: InstructionRecord,
}

/// Types that can be stored one-per-line.
pub trait JsonlItem: Sized {
    fn decode(line: &str) -> Result<Self, String>;
    fn encode(&self) -> Result<String, String>;
}

impl JsonlItem for InstructionRecord {
    fn decode(line: &str) -> Result<Self, String> {
        let parsed: RecordLineIn = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if parsed.schema != SCHEMA_VERSION {
            return Err(format!(
                "unsupported schema {:?}, expected {SCHEMA_VERSION:?}",
                parsed.schema
            ));
        }
        Ok(parsed.record)
    }

    fn encode(&self) -> Result<String, String> {
        serde_json::to_string(&RecordLineOut {
            schema: SCHEMA_VERSION,
            record: self,
        })
        .map_err(|e| e.to_string())
    }
}

/// Wrapper giving any serde type plain JSONL encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Plain<T>(pub T);

impl<T: Serialize + DeserializeOwned> JsonlItem for Plain<T> {
    fn decode(line: &str) -> Result<Self, String> {
        serde_json::from_str(line).map(Plain).map_err(|e| e.to_string())
    }

    fn encode(&self) -> Result<String, String> {
        serde_json::to_string(&self.0).map_err(|e| e.to_string())
    }
}

/// Streaming reader over a JSONL source. Blank lines are skipped.
pub struct JsonlReader<T, R> {
    lines: io::Lines<R>,
    path: PathBuf,
    line_no: usize,
    mode: ReadMode,
    done: bool,
    _item: PhantomData<T>,
}

impl<T: JsonlItem, R: BufRead> JsonlReader<T, R> {
    pub fn new(reader: R, path: impl Into<PathBuf>, mode: ReadMode) -> Self {
        Self {
            lines: reader.lines(),
            path: path.into(),
            line_no: 0,
            mode,
            done: false,
            _item: PhantomData,
        }
    }
}

impl<T: JsonlItem, R: BufRead> Iterator for JsonlReader<T, R> {
    type Item = Result<T, JsonlError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.done = true;
                    return Some(Err(JsonlError::io(&self.path, e)));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(match T::decode(&line) {
                Ok(item) => Ok(item),
                Err(reason) => {
                    if self.mode == ReadMode::Strict {
                        self.done = true;
                    }
                    Err(JsonlError::MalformedLine {
                        line_no: self.line_no,
                        line,
                        reason,
                    })
                }
            });
        }
    }
}

pub fn open_jsonl<T: JsonlItem>(
    path: &Path,
    mode: ReadMode,
) -> Result<JsonlReader<T, BufReader<File>>, JsonlError> {
    let file = File::open(path).map_err(|e| JsonlError::io(path, e))?;
    Ok(JsonlReader::new(BufReader::new(file), path, mode))
}

pub fn read_jsonl(
    path: &Path,
    mode: ReadMode,
) -> Result<JsonlReader<InstructionRecord, BufReader<File>>, JsonlError> {
    open_jsonl(path, mode)
}

/// Reads every item. Strict mode fails on the first bad line; lenient mode
/// returns the good items together with the errors it skipped.
pub fn read_all<T: JsonlItem>(path: &Path, mode: ReadMode) -> Result<(Vec<T>, Vec<JsonlError>), JsonlError> {
    let mut items = Vec::new();
    let mut errors = Vec::new();
    for item in open_jsonl::<T>(path, mode)? {
        match item {
            Ok(v) => items.push(v),
            Err(e) if mode == ReadMode::Lenient && matches!(e, JsonlError::MalformedLine { .. }) => {
                errors.push(e)
            }
            Err(e) => return Err(e),
        }
    }
    Ok((items, errors))
}

pub fn read_records(path: &Path) -> Result<Vec<InstructionRecord>, JsonlError> {
    read_all(path, ReadMode::Strict).map(|(items, _)| items)
}

/// Encodes items to JSONL bytes, newline-terminated.
pub fn encode_all<'a, T: JsonlItem + 'a>(items: impl IntoIterator<Item = &'a T>) -> Result<Vec<u8>, String> {
    let mut buf = Vec::new();
    for item in items {
        buf.extend_from_slice(item.encode()?.as_bytes());
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Writes items atomically (temp file in the same directory, then rename). Returns the count.
pub fn write_all<'a, T: JsonlItem + 'a>(
    items: impl IntoIterator<Item = &'a T>,
    path: &Path,
) -> Result<usize, JsonlError> {
    let mut count = 0usize;
    let mut buf = Vec::new();
    for item in items {
        let line = item.encode().map_err(|reason| JsonlError::MalformedLine {
            line_no: count + 1,
            line: String::new(),
            reason,
        })?;
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        count += 1;
    }
    write_atomic(path, &buf)?;
    Ok(count)
}

pub fn write_jsonl(records: &[InstructionRecord], path: &Path) -> Result<usize, JsonlError> {
    write_all(records.iter(), path)
}

/// Appends one item and flushes; used for checkpoints and quarantine files.
pub fn append_line<T: JsonlItem>(item: &T, path: &Path) -> Result<(), JsonlError> {
    let line = item.encode().map_err(|reason| JsonlError::MalformedLine {
        line_no: 0,
        line: String::new(),
        reason,
    })?;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| JsonlError::io(path, e))?;
    writeln!(file, "{line}").map_err(|e| JsonlError::io(path, e))?;
    file.flush().map_err(|e| JsonlError::io(path, e))
}

/// Write-temp-then-rename so readers never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), JsonlError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| JsonlError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| JsonlError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| JsonlError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| JsonlError::io(path, e))?;
    tmp.persist(path).map_err(|e| JsonlError::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{ImageRef, OcrLine, QAPair};

    fn rec(id: &str) -> InstructionRecord {
        let mut r = InstructionRecord::new(
            ImageRef::new(id, format!("img/{id}.png")),
            "a poster",
            vec![OcrLine::new([[0.0, 0.0], [1.5, 0.0], [1.5, 1.0], [0.0, 1.0]], "HELLO", 0.9)],
        );
        r.pairs.push(QAPair::extractive("What does it say?", "HELLO"));
        r
    }

    #[test]
    fn round_trip_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs = vec![rec("a"), rec("b"), rec("c")];
        assert_eq!(write_jsonl(&recs, &path).unwrap(), 3);
        let back = read_records(&path).unwrap();
        assert_eq!(back, recs);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().all(|l| l.starts_with("{\"schema\":\"curate/1\"")));
    }

    #[test]
    fn garbage_line_strict_and_lenient() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let good = rec("a").encode().unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n{good}\n")).unwrap();

        let strict: Vec<_> = read_jsonl(&path, ReadMode::Strict).unwrap().collect();
        assert_eq!(strict.len(), 2);
        assert!(strict[0].is_ok());
        match &strict[1] {
            Err(JsonlError::MalformedLine { line_no, line, .. }) => {
                assert_eq!(*line_no, 2);
                assert_eq!(line, "not json");
            }
            other => panic!("unexpected {other:?}"),
        }

        let (items, errors) = read_all::<InstructionRecord>(&path, ReadMode::Lenient).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(errors.len(), 1);
        assert!(read_all::<InstructionRecord>(&path, ReadMode::Strict).is_err());
    }

    #[test]
    fn empty_file_yields_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        assert_eq!(write_jsonl(&[], &path).unwrap(), 0);
        assert_eq!(read_jsonl(&path, ReadMode::Strict).unwrap().count(), 0);
    }

    #[test]
    fn wrong_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let line = rec("a").encode().unwrap().replace("curate/1", "other/9");
        std::fs::write(&path, line).unwrap();
        let err = read_records(&path).unwrap_err();
        assert!(err.to_string().contains("unsupported schema"));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_records(Path::new("/nonexistent/x.jsonl")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.jsonl"));
    }
}
