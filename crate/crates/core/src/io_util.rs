//! Small file-opening helpers shared by the database ingest paths.

use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use flate2::read::GzDecoder;

/// Opens a file for line-oriented reading, transparently decompressing
/// when the path ends in `.gz`. The reader is `Send` so it can feed the
/// streaming classifier's reader thread.
pub fn open_maybe_gzip(path: &Path) -> io::Result<Box<dyn BufRead + Send>> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Ingest behavior for malformed input lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IngestMode {
    /// Skip malformed lines, counting them.
    #[default]
    Lenient,
    /// Abort on the first malformed line.
    Strict,
}

/// Counters reported by a completed ingest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub lines_read: usize,
    pub records_loaded: usize,
    pub malformed_lines: Vec<usize>,
}

impl IngestStats {
    pub fn skipped(&self) -> usize {
        self.malformed_lines.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn gzip_extension_is_transparently_decompressed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl.gz");
        let mut enc =
            flate2::write::GzEncoder::new(File::create(&path).unwrap(), Default::default());
        enc.write_all(b"hello\nworld\n").unwrap();
        enc.finish().unwrap();

        let reader = open_maybe_gzip(&path).unwrap();
        let lines: Vec<String> = reader.lines().map(|l| l.unwrap()).collect();
        assert_eq!(lines, vec!["hello", "world"]);
    }

    #[test]
    fn plain_files_read_as_is() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(&path, "a\nb\n").unwrap();
        let reader = open_maybe_gzip(&path).unwrap();
        assert_eq!(reader.lines().count(), 2);
    }
}
