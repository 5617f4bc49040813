use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;

use super::DatasetRecord;
use crate::error::{Error, Result};

/// Streaming reader over a record file; yields one record per line.
pub struct RecordReader<R> {
    lines: Lines<R>,
    line: usize,
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(reader: R) -> Self {
        RecordReader {
            lines: reader.lines(),
            line: 0,
        }
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<DatasetRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(e.into())),
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            let line = self.line;
            let rec = serde_json::from_str::<DatasetRecord>(&text)
                .map_err(|e| Error::DataLine { line, msg: e.to_string() })
                .and_then(|r| {
                    r.validate().map_err(|e| Error::DataLine { line, msg: e.to_string() })?;
                    Ok(r)
                });
            return Some(rec);
        }
    }
}

pub fn read_records(path: impl AsRef<Path>) -> Result<RecordReader<BufReader<File>>> {
    Ok(RecordReader::new(BufReader::new(File::open(path)?)))
}

/// Writes one JSON object per line; returns the number written.
pub fn write_records<'a>(path: impl AsRef<Path>, records: impl IntoIterator<Item = &'a DatasetRecord>) -> Result<usize> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut n = 0;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n")?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

/// Planted probabilities (or PPP band), one per record, in record order.
pub fn write_truth(path: impl AsRef<Path>, truth: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "index\ttruth")?;
    for (i, t) in truth.iter().enumerate() {
        writeln!(w, "{i}\t{t:?}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate().skip(1) {
        let line = line?;
        let v = line
            .split('\t')
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::DataLine {
                line: n + 1,
                msg: format!("bad truth row {line:?}"),
            })?;
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, TaskCounts, WorldConfig};

    fn sample() -> Vec<DatasetRecord> {
        let cfg = WorldConfig {
            users: 40,
            eval_users: 0,
            ..WorldConfig::small()
        };
        generate(&cfg, TaskCounts::uniform(25), 9).train.records
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let recs = sample();
        assert_eq!(write_records(&path, &recs).unwrap(), recs.len());
        let back: Vec<_> = read_records(&path).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn corrupt_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let recs: Vec<_> = sample().into_iter().take(100).collect();
        write_records(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[41] = lines[41].replacen("\"task\":\"", "\"task\":\"zz", 1);
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = read_records(&path).unwrap().find_map(|r| r.err()).unwrap();
        match err {
            Error::DataLine { line, msg } => {
                assert_eq!(line, 42);
                assert!(msg.contains("variant"), "{msg}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn truncated_json_is_named() {
        let mut text = String::new();
        for r in sample().iter().take(3) {
            text.push_str(&serde_json::to_string(r).unwrap());
            text.push('\n');
        }
        text.push_str("{\"user\":");
        let errs: Vec<_> = RecordReader::new(text.as_bytes()).filter_map(|r| r.err()).collect();
        assert!(matches!(errs[..], [Error::DataLine { line: 4, .. }]));
    }

    #[test]
    fn empty_file_is_valid() {
        assert_eq!(RecordReader::new(&b""[..]).count(), 0);
    }

    #[test]
    fn truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsv");
        let t = vec![0.25, 1.0 / 3.0, 7.0];
        write_truth(&path, &t).unwrap();
        assert_eq!(read_truth(&path).unwrap(), t);
    }
}
