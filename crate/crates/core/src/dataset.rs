//! Toy datasets: Gaussian blobs and CSV files with an integer label column.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Sample;
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Parameters of the synthetic blob generator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlobSpec {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Rows per example; each row is an independent draw around the class center.
    pub seq: usize,
    /// Distance of the class centers from the origin.
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self { n: 512, dim: 4, classes: 2, seq: 1, separation: 2.0, noise: 1.0, seed: 0 }
    }
}

impl BlobSpec {
    /// Parses `key=value` pairs separated by commas, e.g. `n=400,dim=6,classes=3`.
    /// Unspecified keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value in synthetic spec, got `{part}`")))?;
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("bad value for `{key}`: {e}"));
            match key.trim() {
                "n" => spec.n = value.parse().map_err(|e| bad(&e))?,
                "dim" => spec.dim = value.parse().map_err(|e| bad(&e))?,
                "classes" => spec.classes = value.parse().map_err(|e| bad(&e))?,
                "seq" => spec.seq = value.parse().map_err(|e| bad(&e))?,
                "sep" | "separation" => spec.separation = value.parse().map_err(|e| bad(&e))?,
                "noise" => spec.noise = value.parse().map_err(|e| bad(&e))?,
                "seed" => spec.seed = value.parse().map_err(|e| bad(&e))?,
                other => return Err(Error::Config(format!("unknown synthetic key `{other}`"))),
            }
        }
        if spec.n == 0 || spec.dim == 0 || spec.classes < 2 || spec.seq == 0 {
            return Err(Error::Config("synthetic data needs n, dim, seq >= 1 and classes >= 2".into()));
        }
        Ok(spec)
    }
}

/// Gaussian blobs with centers on random directions at distance `separation`.
pub fn synthetic_blobs<T: Scalar>(spec: &BlobSpec) -> Vec<Sample<T>> {
    let mut rng = stream(spec.seed, Stream::Data);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm * spec.separation).collect()
        })
        .collect();
    (0..spec.n)
        .map(|_| {
            let class = rng.random_range(0..spec.classes);
            let x = Matrix::from_fn(spec.seq, spec.dim, |_, c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(centers[class][c] + spec.noise * z)
            });
            Sample { x, label: crate::nn::Label::Class(class) }
        })
        .collect()
}

/// Reads a headered CSV whose last column is a non-negative integer class.
/// The remaining columns are reshaped row-major into `seq x input_dim`.
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, input_dim: usize) -> Result<Vec<Sample<T>>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let fields: Vec<&str> = record.iter().collect();
        let Some((label, features)) = fields.split_last() else { continue };
        let label: usize = label
            .trim()
            .parse()
            .map_err(|e| Error::Config(format!("{} row {}: bad label `{label}`: {e}", path.display(), line + 1)))?;
        let values = features
            .iter()
            .map(|f| f.trim().parse::<f64>().map(T::lit))
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|e| Error::Config(format!("{} row {}: {e}", path.display(), line + 1)))?;
        if input_dim == 0 || values.is_empty() || values.len() % input_dim != 0 {
            return Err(Error::shape("csv features", format!("multiple of {input_dim}"), values.len()));
        }
        let seq = values.len() / input_dim;
        out.push(Sample { x: Matrix::new(seq, input_dim, values)?, label: crate::nn::Label::Class(label) });
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{}: no rows", path.display())));
    }
    Ok(out)
}

/// `synthetic:<spec>` or a CSV path.
pub fn load_source<T: Scalar>(source: &str, input_dim: usize) -> Result<Vec<Sample<T>>> {
    match source.strip_prefix("synthetic:") {
        Some(spec) => {
            let spec = BlobSpec::parse(spec)?;
            if spec.dim != input_dim {
                return Err(Error::shape("synthetic dim vs model input_dim", input_dim, spec.dim));
            }
            Ok(synthetic_blobs(&spec))
        }
        None if source == "synthetic" => {
            Ok(synthetic_blobs(&BlobSpec { dim: input_dim, ..BlobSpec::default() }))
        }
        None => load_csv(source, input_dim),
    }
}

/// Splits off the last `fraction` of the examples as a held-out set.
pub fn split<T: Clone>(data: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let held = ((data.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let cut = data.len() - held.min(data.len());
    (data[..cut].to_vec(), data[cut..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn blob_spec_parsing() {
        let s = BlobSpec::parse("n=10, dim=3,classes=3,sep=4.5,seed=9").unwrap();
        assert_eq!((s.n, s.dim, s.classes, s.separation, s.seed), (10, 3, 3, 4.5, 9));
        assert!(BlobSpec::parse("n=10,bogus=1").is_err());
        assert!(BlobSpec::parse("classes=1").is_err());
        assert!(BlobSpec::parse("n").is_err());
    }

    #[test]
    fn blobs_are_reproducible_and_shaped() {
        let spec = BlobSpec { n: 20, dim: 3, seq: 2, ..BlobSpec::default() };
        let a: Vec<Sample<f64>> = synthetic_blobs(&spec);
        let b: Vec<Sample<f64>> = synthetic_blobs(&spec);
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.x.shape() == (2, 3)));
    }

    #[test]
    fn csv_round_trip() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,b,c,d,label\n1,2,3,4,0\n-1,0.5,2,2,1").unwrap();
        let data: Vec<Sample<f64>> = load_csv(f.path(), 2).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data[0].x.shape(), (2, 2));
        assert_eq!(data[1].label, crate::nn::Label::Class(1));
        assert!(load_csv::<f64>(f.path(), 3).is_err());
    }
}
