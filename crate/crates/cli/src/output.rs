use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// One JSON object per line, flushed on [`JsonlWriter::finish`].
pub struct JsonlWriter {
    inner: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> iclr_core::Result<Self> {
        Ok(Self { inner: BufWriter::new(File::create(path)?) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> iclr_core::Result<()> {
        serde_json::to_writer(&mut self.inner, record)?;
        self.inner.write_all(b"\n")?;
        // Keep the file usable if a later epoch aborts.
        self.inner.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> iclr_core::Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> iclr_core::Result<Vec<T>> {
    BufReader::new(File::open(path)?)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| Ok(serde_json::from_str(&line?)?))
        .collect()
}

#[derive(Serialize)]
struct PcaRow {
    index: usize,
    pc1: f64,
    pc2: f64,
    label: Option<usize>,
}

pub(crate) fn write_pca(path: &Path, coords: &Array2<f64>, labels: Option<&[usize]>) -> crate::CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, row) in coords.outer_iter().enumerate() {
        w.serialize(PcaRow { index: i, pc1: row[0], pc2: row[1], label: labels.map(|l| l[i]) })?;
    }
    w.flush()?;
    Ok(())
}
