//! Desk-scale data sources and train/test splitting.

mod idx;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bank::{read_exact, truncated};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::trainer::SampleShape;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels};

pub const DATASET_MAGIC: &[u8; 4] = b"ICDS";
pub const DATASET_VERSION: u16 = 1;

/// Samples plus optional ground-truth labels, which only evaluation code reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Array2<f32>,
    pub true_labels: Option<Vec<usize>>,
    pub class_count: usize,
    pub shape: SampleShape,
}

impl Dataset {
    pub fn new(samples: Array2<f32>, true_labels: Option<Vec<usize>>, class_count: usize, shape: SampleShape) -> Result<Self> {
        if let Some(labels) = &true_labels {
            if labels.len() != samples.nrows() {
                return Err(Error::shape(format!("{} labels for {} samples", labels.len(), samples.nrows())));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
                return Err(Error::config(format!("label {bad} not below class count {class_count}")));
            }
        }
        if let SampleShape::Image { rows, cols } = shape {
            if rows * cols != samples.ncols() {
                return Err(Error::shape(format!("{rows}x{cols} images but {} features", samples.ncols())));
            }
        }
        Ok(Self { samples, true_labels, class_count, shape })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select(Axis(0), indices),
            true_labels: self.true_labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
            shape: self.shape,
        }
    }

    /// Binary form: magic, version, N, d, shape, then row-major `f32`
    /// samples and an optional label block, all little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_u16::<LittleEndian>(DATASET_VERSION)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        match self.shape {
            SampleShape::Vector => {
                w.write_u32::<LittleEndian>(0)?;
                w.write_u32::<LittleEndian>(0)?;
            }
            SampleShape::Image { rows, cols } => {
                w.write_u32::<LittleEndian>(rows as u32)?;
                w.write_u32::<LittleEndian>(cols as u32)?;
            }
        }
        for &x in self.samples.iter() {
            w.write_f32::<LittleEndian>(x)?;
        }
        w.write_u32::<LittleEndian>(self.class_count as u32)?;
        match &self.true_labels {
            None => w.write_u8(0)?,
            Some(labels) => {
                w.write_u8(1)?;
                for &l in labels {
                    w.write_u32::<LittleEndian>(l as u32)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "dataset magic")?;
        if &magic != DATASET_MAGIC {
            return Err(Error::format(format!("bad dataset magic {magic:?}")));
        }
        let version = r.read_u16::<LittleEndian>().map_err(truncated("dataset version"))?;
        if version != DATASET_VERSION {
            return Err(Error::format(format!("unsupported dataset version {version}")));
        }
        let n = r.read_u64::<LittleEndian>().map_err(truncated("dataset N"))? as usize;
        let d = r.read_u32::<LittleEndian>().map_err(truncated("dataset d"))? as usize;
        let rows = r.read_u32::<LittleEndian>().map_err(truncated("image rows"))? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(truncated("image cols"))? as usize;
        let len = n
            .checked_mul(d)
            .filter(|&l| l <= 1 << 32)
            .ok_or_else(|| Error::format(format!("implausible dataset shape {n}x{d}")))?;
        let mut data = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(truncated("samples"))?;
        let class_count = r.read_u32::<LittleEndian>().map_err(truncated("class count"))? as usize;
        let labels = match r.read_u8().map_err(truncated("label flag"))? {
            0 => None,
            1 => {
                let mut raw = vec![0u32; n];
                r.read_u32_into::<LittleEndian>(&mut raw).map_err(truncated("labels"))?;
                Some(raw.into_iter().map(|l| l as usize).collect())
            }
            f => return Err(Error::format(format!("bad label flag {f}"))),
        };
        let shape = if rows == 0 && cols == 0 {
            SampleShape::Vector
        } else {
            SampleShape::Image { rows, cols }
        };
        let samples = Array2::from_shape_vec((n, d), data).expect("length checked");
        Dataset::new(samples, labels, class_count, shape).map_err(|e| Error::format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Parameters of the planted Gaussian mixture; also the JSON sidecar body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub center_separation: f64,
    pub within_std: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            per_class: 1000,
            dim: 16,
            center_separation: 4.0,
            within_std: 1.0,
        }
    }
}

/// Class centers uniform on the radius-`center_separation` sphere; samples
/// `N(center, within_std² I)`; rows shuffled.
pub fn gen_gaussian_mixture(spec: &MixtureSpec, rng: &mut Rng) -> Result<Dataset> {
    if spec.classes < 2 || spec.dim < 2 || spec.per_class < 1 {
        return Err(Error::config(format!(
            "mixture needs >= 2 classes, >= 2 dims and >= 1 sample per class (got {}, {}, {})",
            spec.classes, spec.dim, spec.per_class
        )));
    }
    if !(spec.within_std >= 0.0 && spec.center_separation > 0.0) {
        return Err(Error::config("mixture spread must be >= 0 and separation > 0"));
    }
    let centers: Vec<Array1<f64>> = (0..spec.classes)
        .map(|_| loop {
            let c = Array1::from_shape_simple_fn(spec.dim, || rng.sample::<f64, _>(StandardNormal));
            let n = c.dot(&c).sqrt();
            if n > 1e-9 {
                break c * (spec.center_separation / n);
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..spec.classes * spec.per_class).map(|i| i / spec.per_class).collect();
    order.shuffle(rng);
    let mut samples = Array2::<f32>::zeros((order.len(), spec.dim));
    for (mut row, &class) in samples.outer_iter_mut().zip(&order) {
        for (x, &c) in row.iter_mut().zip(centers[class].iter()) {
            *x = (c + spec.within_std * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
    }
    Dataset::new(samples, Some(order), spec.classes, SampleShape::Vector)
}

/// A train/test partition together with the original row indices.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Stratified by label when labels exist (at least one row of every class on
/// each side), otherwise a uniform split.
pub fn split(dataset: &Dataset, test_fraction: f64, rng: &mut Rng) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!("test_fraction {test_fraction} outside (0, 1)")));
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    match &dataset.true_labels {
        Some(labels) => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
            for (i, &l) in labels.iter().enumerate() {
                by_class[l].push(i);
            }
            for (class, mut members) in by_class.into_iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                if members.len() < 2 {
                    return Err(Error::config(format!("class {class} has fewer than two members")));
                }
                members.shuffle(rng);
                let n_test = ((test_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
                test_idx.extend_from_slice(&members[..n_test]);
                train_idx.extend_from_slice(&members[n_test..]);
            }
        }
        None => {
            if dataset.len() < 2 {
                return Err(Error::config("need at least two samples to split"));
            }
            let mut all: Vec<usize> = (0..dataset.len()).collect();
            all.shuffle(rng);
            let n_test = ((test_fraction * all.len() as f64).round() as usize).clamp(1, all.len() - 1);
            test_idx.extend_from_slice(&all[..n_test]);
            train_idx.extend_from_slice(&all[n_test..]);
        }
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(Split {
        train: dataset.subset(&train_idx),
        test: dataset.subset(&test_idx),
        train_indices: train_idx,
        test_indices: test_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_spread_collapses_onto_centers() {
        let spec = MixtureSpec { per_class: 4, within_std: 0.0, ..MixtureSpec::default() };
        let d = gen_gaussian_mixture(&spec, &mut seeded(1)).unwrap();
        let labels = d.true_labels.as_ref().unwrap();
        for i in 0..d.len() {
            for j in 0..d.len() {
                if labels[i] == labels[j] {
                    assert_eq!(d.samples.row(i), d.samples.row(j));
                }
            }
            let n = d.samples.row(i).mapv(|x| x as f64).dot(&d.samples.row(i).mapv(|x| x as f64)).sqrt();
            assert!((n - 4.0).abs() < 1e-5);
        }
    }

    #[test]
    fn one_per_class() {
        let spec = MixtureSpec { classes: 7, per_class: 1, ..MixtureSpec::default() };
        let d = gen_gaussian_mixture(&spec, &mut seeded(2)).unwrap();
        assert_eq!(d.len(), 7);
        let mut l = d.true_labels.clone().unwrap();
        l.sort_unstable();
        assert_eq!(l, (0..7).collect::<Vec<_>>());
        assert!(gen_gaussian_mixture(&MixtureSpec { classes: 1, ..spec.clone() }, &mut seeded(0)).is_err());
        assert!(gen_gaussian_mixture(&MixtureSpec { dim: 1, ..spec }, &mut seeded(0)).is_err());
    }

    #[test]
    fn within_class_spread_matches() {
        let spec = MixtureSpec { classes: 2, per_class: 10_000, dim: 3, within_std: 0.7, ..MixtureSpec::default() };
        let d = gen_gaussian_mixture(&spec, &mut seeded(3)).unwrap();
        let labels = d.true_labels.as_ref().unwrap();
        for class in 0..2 {
            let rows: Vec<usize> = (0..d.len()).filter(|&i| labels[i] == class).collect();
            let x = d.samples.select(Axis(0), &rows).mapv(|v| v as f64);
            let std = x.std_axis(Axis(0), 1.0);
            for s in std.iter() {
                assert!((s / 0.7 - 1.0).abs() < 0.05, "std {s}");
            }
        }
    }

    #[test]
    fn stratified_half_split() {
        let spec = MixtureSpec { classes: 3, per_class: 10, ..MixtureSpec::default() };
        let d = gen_gaussian_mixture(&spec, &mut seeded(4)).unwrap();
        let s = split(&d, 0.5, &mut seeded(5)).unwrap();
        for class in 0..3 {
            let count = |ds: &Dataset| ds.true_labels.as_ref().unwrap().iter().filter(|&&l| l == class).count();
            assert_eq!((count(&s.train), count(&s.test)), (5, 5));
        }
        let mut all: Vec<usize> = s.train_indices.iter().chain(&s.test_indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn stratification_within_one_per_class() {
        let mut rng = seeded(6);
        for trial in 0..20 {
            let sizes: Vec<usize> = (0..4).map(|_| rng.random_range(2..40)).collect();
            let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
            let n = labels.len();
            let d = Dataset::new(Array2::zeros((n, 2)), Some(labels), 4, SampleShape::Vector).unwrap();
            let frac = rng.random_range(0.05..0.95);
            let s = split(&d, frac, &mut seeded(trial)).unwrap();
            for (c, &size) in sizes.iter().enumerate() {
                let got = s.test.true_labels.as_ref().unwrap().iter().filter(|&&l| l == c).count() as f64;
                assert!((got - frac * size as f64).abs() <= 1.0, "class {c}: {got} of {size} at {frac}");
            }
        }
    }

    #[test]
    fn split_errors() {
        let d = Dataset::new(Array2::zeros((3, 2)), Some(vec![0, 0, 1]), 2, SampleShape::Vector).unwrap();
        assert!(split(&d, 0.5, &mut seeded(0)).is_err());
        assert!(split(&d, 0.0, &mut seeded(0)).is_err());
        let unlabeled = Dataset::new(Array2::zeros((10, 2)), None, 0, SampleShape::Vector).unwrap();
        let s = split(&unlabeled, 0.3, &mut seeded(0)).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (7, 3));
    }

    #[test]
    fn binary_round_trip() {
        let d = gen_gaussian_mixture(&MixtureSpec { per_class: 3, ..MixtureSpec::default() }, &mut seeded(9)).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(&mut buf.as_slice()).unwrap(), d);
        assert!(matches!(Dataset::read_from(&mut &buf[..20]), Err(Error::Format(_))));
    }
}
