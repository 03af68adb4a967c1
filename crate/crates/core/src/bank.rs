//! Per-instance memory bank of running-average embeddings.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BANK_MAGIC: &[u8; 4] = b"ICLR";
pub const BANK_VERSION: u16 = 1;

/// Raw momentum combinations shorter than this cannot be normalized.
pub const MIN_UPDATE_NORM: f64 = 1e-12;

/// Stored unit-norm embeddings, one row per training instance, plus the momentum ω.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    features: Array2<f32>,
    omega: f32,
}

fn check_omega(omega: f32) -> Result<()> {
    if omega > 0.0 && omega <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("momentum coefficient {omega} outside (0, 1]")))
    }
}

/// Writes `raw / ||raw||` into `out`; `None` if the norm is below `min_norm`.
fn write_normalized(raw: &[f64], out: &mut [f32], min_norm: f64) -> Option<()> {
    let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n >= min_norm) {
        return None;
    }
    for (o, &x) in out.iter_mut().zip(raw) {
        *o = (x / n) as f32;
    }
    Some(())
}

/// Normalizes an `f32` row exactly as the bank does when storing it.
pub fn normalize_row(row: &[f32]) -> Option<Vec<f32>> {
    let raw: Vec<f64> = row.iter().map(|&x| x as f64).collect();
    let mut out = vec![0.0; row.len()];
    write_normalized(&raw, &mut out, f64::MIN_POSITIVE).map(|_| out)
}

impl MemoryBank {
    /// Builds a bank from initial features; each row is normalized on the way in.
    pub fn new(initial_features: ArrayView2<f32>, omega: f32) -> Result<Self> {
        check_omega(omega)?;
        let (n, d) = initial_features.dim();
        if n == 0 || d == 0 {
            return Err(Error::degenerate("memory bank needs at least one row and one column"));
        }
        let mut features = Array2::zeros((n, d));
        for (i, (src, mut dst)) in initial_features
            .outer_iter()
            .zip(features.outer_iter_mut())
            .enumerate()
        {
            let raw: Vec<f64> = src.iter().map(|&x| x as f64).collect();
            if raw.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(format!("non-finite initial feature in row {i}")));
            }
            write_normalized(&raw, dst.as_slice_mut().expect("contiguous"), f64::MIN_POSITIVE)
                .ok_or_else(|| Error::degenerate(format!("initial feature row {i} has zero norm")))?;
        }
        Ok(Self { features, omega })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn omega(&self) -> f32 {
        self.omega
    }

    pub fn features(&self) -> ArrayView2<'_, f32> {
        self.features.view()
    }

    /// Borrowed view of one stored row.
    pub fn row(&self, index: usize) -> &[f32] {
        self.features
            .row(index)
            .to_slice()
            .expect("bank rows are contiguous")
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index < self.len() {
            Ok(())
        } else {
            Err(Error::OutOfRange { index, len: self.len() })
        }
    }

    /// `v̂_i ← normalize((1 − ω)·v̂_i + ω·v_i)` for each `i` in `indices`.
    ///
    /// Indices must be unique. On error the bank is left unchanged.
    pub fn momentum_update(&mut self, indices: &[usize], new_features: ArrayView2<f32>) -> Result<()> {
        if new_features.nrows() != indices.len() || new_features.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "update of {} ids with a {}x{} feature matrix (bank dim {})",
                indices.len(),
                new_features.nrows(),
                new_features.ncols(),
                self.dim()
            )));
        }
        for &i in indices {
            self.check_index(i)?;
        }
        let keep = 1.0 - self.omega as f64;
        let omega = self.omega as f64;
        let d = self.dim();
        let mut staged = Vec::with_capacity(indices.len());
        let mut raw = vec![0.0f64; d];
        for (&i, new) in indices.iter().zip(new_features.outer_iter()) {
            for ((r, &old), &v) in raw.iter_mut().zip(self.row(i)).zip(new.iter()) {
                *r = keep * old as f64 + omega * v as f64;
            }
            let mut out = vec![0.0f32; d];
            write_normalized(&raw, &mut out, MIN_UPDATE_NORM)
                .ok_or_else(|| Error::degenerate(format!("momentum update of instance {i} cancelled to zero")))?;
            staged.push((i, out));
        }
        for (i, out) in staged {
            self.features.row_mut(i).as_slice_mut().expect("contiguous").copy_from_slice(&out);
        }
        Ok(())
    }

    /// Copies of the requested rows; duplicates allowed.
    pub fn read_rows(&self, indices: &[usize]) -> Result<Array2<f32>> {
        for &i in indices {
            self.check_index(i)?;
        }
        Ok(self.features.select(Axis(0), indices))
    }

    /// Writes the checkpoint segment: magic, version, N, D, then the rows.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        w.write_u16::<LittleEndian>(BANK_VERSION)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        for &x in self.features.iter() {
            w.write_f32::<LittleEndian>(x)?;
        }
        Ok(())
    }

    /// Reads a segment written by [`MemoryBank::write_to`]. The momentum
    /// coefficient is not part of the segment and must be supplied.
    pub fn read_from<R: Read>(r: &mut R, omega: f32) -> Result<Self> {
        check_omega(omega)?;
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "bank magic")?;
        if &magic != BANK_MAGIC {
            return Err(Error::format(format!("bad bank magic {magic:?}")));
        }
        let version = r.read_u16::<LittleEndian>().map_err(truncated("bank version"))?;
        if version != BANK_VERSION {
            return Err(Error::format(format!("unsupported bank version {version}")));
        }
        let n = r.read_u64::<LittleEndian>().map_err(truncated("bank N"))? as usize;
        let d = r.read_u32::<LittleEndian>().map_err(truncated("bank D"))? as usize;
        let len = n
            .checked_mul(d)
            .filter(|&l| l <= (1 << 34))
            .ok_or_else(|| Error::format(format!("implausible bank shape {n}x{d}")))?;
        let mut data = vec![0.0f32; len];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(truncated("bank features"))?;
        let features = Array2::from_shape_vec((n, d), data).map_err(|e| Error::format(e.to_string()))?;
        Ok(Self { features, omega })
    }
}

pub(crate) fn truncated(what: &'static str) -> impl Fn(std::io::Error) -> Error {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(format!("truncated input while reading {what}"))
        } else {
            Error::Io(e)
        }
    }
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(truncated(what))
}

/// Draws `k` distinct instance ids uniformly from `{0..n-1} \ {anchor}`.
pub fn sample_index_negatives(bank: &MemoryBank, anchor: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    sample_excluding(bank.len(), anchor, k, rng)
}

pub(crate) fn sample_excluding(n: usize, anchor: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if anchor >= n {
        return Err(Error::OutOfRange { index: anchor, len: n });
    }
    let available = n - 1;
    if k > available {
        return Err(Error::InsufficientPopulation { requested: k, available });
    }
    Ok(index::sample(rng, available, k)
        .into_iter()
        .map(|j| if j >= anchor { j + 1 } else { j })
        .collect())
}
