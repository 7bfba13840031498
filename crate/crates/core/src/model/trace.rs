//! Line-delimited JSON trace format: one element per line, tagged by
//! `"elem"` (`node`, `edge` or `terminate`). `edge_id` is the sort key.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use super::Element;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o: {0}")]
    Io(#[from] io::Error),
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl TraceWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        Ok(TraceWriter::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        TraceWriter { out }
    }

    pub fn write(&mut self, el: &Element) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, el)?;
        self.out.write_all(b"\n")
    }

    pub fn write_all<'a>(&mut self, els: impl IntoIterator<Item = &'a Element>) -> io::Result<()> {
        for el in els {
            self.write(el)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Iterator over the records of a trace. Blank lines are skipped.
pub struct TraceReader<R: BufRead> {
    input: R,
    line: usize,
    buf: String,
}

impl TraceReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        Ok(TraceReader::new(BufReader::new(File::open(path)?)))
    }
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(input: R) -> Self {
        TraceReader {
            input,
            line: 0,
            buf: String::new(),
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<Element, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            self.line += 1;
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            return Some(serde_json::from_str(text).map_err(|source| TraceError::Parse {
                line: self.line,
                source,
            }));
        }
    }
}

pub fn to_bytes(els: &[Element]) -> Vec<u8> {
    let mut w = TraceWriter::new(Vec::new());
    w.write_all(els).expect("writing to memory");
    w.finish().expect("writing to memory")
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<Element>, TraceError> {
    TraceReader::new(bytes).collect()
}
