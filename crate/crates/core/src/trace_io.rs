//! Trace files: a header line followed by one [`ChainTrace`] per line.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainConfig, ChainTrace, Mode};

pub const TRACE_SCHEMA: &str = "thor-trace";
pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {reason}")]
    SchemaMismatch { line: usize, reason: String },
}

/// First line of every trace file; describes the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    pub mode: Mode,
    pub backend: String,
    pub config: ChainConfig,
}

impl TraceHeader {
    pub fn new(mode: Mode, backend: impl Into<String>, config: ChainConfig) -> Self {
        TraceHeader {
            schema: TRACE_SCHEMA.to_string(),
            version: TRACE_SCHEMA_VERSION,
            mode,
            backend: backend.into(),
            config,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub traces: Vec<ChainTrace>,
}

/// Streams traces to a writer, header first.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, header: &TraceHeader) -> io::Result<Self> {
        serde_json::to_writer(&mut out, header)?;
        out.write_all(b"\n")?;
        Ok(TraceWriter { out })
    }

    pub fn write(&mut self, trace: &ChainTrace) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, trace)?;
        self.out.write_all(b"\n")
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_traces(
    path: &Path,
    header: &TraceHeader,
    traces: &[ChainTrace],
) -> Result<(), TraceIoError> {
    let io_err = |source| TraceIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut writer = TraceWriter::new(io::BufWriter::new(file), header).map_err(io_err)?;
    for trace in traces {
        writer.write(trace).map_err(io_err)?;
    }
    writer.finish().map_err(io_err)?;
    Ok(())
}

pub fn parse_traces(input: impl BufRead) -> Result<TraceFile, TraceIoError> {
    let mismatch = |line: usize, reason: String| TraceIoError::SchemaMismatch { line, reason };
    let mut header: Option<TraceHeader> = None;
    let mut traces = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| mismatch(line_no, e.to_string()))?;
        match &header {
            None => {
                let h: TraceHeader = serde_json::from_str(&line)
                    .map_err(|e| mismatch(line_no, format!("bad header: {e}")))?;
                if h.schema != TRACE_SCHEMA || h.version != TRACE_SCHEMA_VERSION {
                    return Err(mismatch(
                        line_no,
                        format!(
                            "unsupported schema {} v{} (expected {TRACE_SCHEMA} v{TRACE_SCHEMA_VERSION})",
                            h.schema, h.version
                        ),
                    ));
                }
                header = Some(h);
            }
            Some(h) => {
                if line.trim().is_empty() {
                    continue;
                }
                let trace: ChainTrace =
                    serde_json::from_str(&line).map_err(|e| mismatch(line_no, e.to_string()))?;
                if trace.mode != h.mode {
                    return Err(mismatch(
                        line_no,
                        format!("trace mode {} in a {} file", trace.mode, h.mode),
                    ));
                }
                if !trace.is_failed() && trace.hops.len() != trace.mode.hop_count() {
                    return Err(mismatch(
                        line_no,
                        format!("{} hops for mode {}", trace.hops.len(), trace.mode),
                    ));
                }
                traces.push(trace);
            }
        }
    }
    let header = header.ok_or_else(|| mismatch(1, "missing header".into()))?;
    Ok(TraceFile { header, traces })
}

pub fn read_traces(path: &Path) -> Result<TraceFile, TraceIoError> {
    let file = fs::File::open(path).map_err(|source| TraceIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_traces(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Candidate;
    use crate::chain::{HopRecord, TraceFlag};
    use crate::extraction::Polarity;

    fn sample_trace(id: &str) -> ChainTrace {
        let cand = Candidate {
            text: "positive".into(),
            score: -0.123456789012345,
        };
        ChainTrace {
            instance_id: id.into(),
            mode: Mode::Vanilla,
            hops: vec![HopRecord {
                step: 0,
                prompt: "Given the sentence \"s\", what is the sentiment polarity towards t?"
                    .into(),
                candidates: vec![cand.clone()],
                selected: cand,
                consistency_flag: true,
                context_after: "… positive".into(),
            }],
            prediction: Some(Polarity::Positive),
            flags: [TraceFlag::LowConsistency].into(),
            failure: None,
            config: ChainConfig::default(),
        }
    }

    fn header() -> TraceHeader {
        TraceHeader::new(Mode::Vanilla, "mock", ChainConfig::default())
    }

    #[test]
    fn write_read_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut failed = sample_trace("b");
        failed.hops.clear();
        failed.prediction = None;
        failed.failure = Some("step 0: boom".into());
        let traces = vec![sample_trace("a"), failed];
        write_traces(&path, &header(), &traces).unwrap();
        let back = read_traces(&path).unwrap();
        assert_eq!(back.header, header());
        assert_eq!(back.traces, traces);
    }

    #[test]
    fn truncated_file_reports_line() {
        let mut buf = Vec::new();
        let mut w = TraceWriter::new(&mut buf, &header()).unwrap();
        w.write(&sample_trace("a")).unwrap();
        w.write(&sample_trace("b")).unwrap();
        w.finish().unwrap();
        let cut = &buf[..buf.len() - 20];
        match parse_traces(cut) {
            Err(TraceIoError::SchemaMismatch { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected SchemaMismatch, got {other:?}"),
        }
    }

    #[test]
    fn header_required() {
        assert!(matches!(
            parse_traces(&b""[..]),
            Err(TraceIoError::SchemaMismatch { line: 1, .. })
        ));
        let trace_first = serde_json::to_string(&sample_trace("a")).unwrap();
        assert!(matches!(
            parse_traces(trace_first.as_bytes()),
            Err(TraceIoError::SchemaMismatch { line: 1, .. })
        ));
        let mut h = header();
        h.version = 99;
        let text = serde_json::to_string(&h).unwrap();
        assert!(matches!(
            parse_traces(text.as_bytes()),
            Err(TraceIoError::SchemaMismatch { line: 1, .. })
        ));
    }

    #[test]
    fn mode_and_arity_checked() {
        let mut buf = Vec::new();
        let mut w = TraceWriter::new(&mut buf, &header()).unwrap();
        let mut wrong = sample_trace("a");
        wrong.mode = Mode::Thor;
        w.write(&wrong).unwrap();
        w.finish().unwrap();
        assert!(matches!(
            parse_traces(&buf[..]),
            Err(TraceIoError::SchemaMismatch { line: 2, .. })
        ));

        let mut buf = Vec::new();
        let mut w = TraceWriter::new(&mut buf, &header()).unwrap();
        let mut two = sample_trace("a");
        two.hops.push(two.hops[0].clone());
        w.write(&two).unwrap();
        w.finish().unwrap();
        assert!(parse_traces(&buf[..]).is_err());
    }
}
