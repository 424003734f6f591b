//! Datasets: MNIST-style IDX files, fixed random subsets, feature maps and a
//! synthetic Gaussian-blob corpus.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ctensor::{dft2d, CTensor, DftNorm, RTensor};
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Labelled images `[N, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: RTensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(
        images: RTensor,
        labels: Vec<usize>,
        n_classes: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        let s = images.shape();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                op: "dataset",
                shape: s.to_vec(),
                reason: "images must be [N, H, W]".into(),
            });
        }
        if s[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: s[0],
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        Ok(Self {
            images,
            labels,
            n_classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[1], s[2])
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize], split: impl Into<String>) -> Result<Self> {
        let (h, w) = self.image_shape();
        let hw = h * w;
        let mut data = Vec::with_capacity(idx.len() * hw);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of range for {} rows",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * hw..(i + 1) * hw]);
        }
        Self::new(
            RTensor::new(vec![idx.len(), h, w], data)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.n_classes,
            split,
        )
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    check_len(path, bytes, 4)?;
    let found = read_u32(bytes, 0);
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Reads an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = fs::read(ip)?;
    check_magic(ip, &ib, IMAGE_MAGIC)?;
    check_len(ip, &ib, 16)?;
    let (n, h, w) = (
        read_u32(&ib, 4) as usize,
        read_u32(&ib, 8) as usize,
        read_u32(&ib, 12) as usize,
    );
    check_len(ip, &ib, 16 + n * h * w)?;

    let lb = fs::read(lp)?;
    check_magic(lp, &lb, LABEL_MAGIC)?;
    check_len(lp, &lb, 8)?;
    let nl = read_u32(&lb, 4) as usize;
    check_len(lp, &lb, 8 + nl)?;
    if nl != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: nl,
        });
    }

    let pixels = ib[16..16 + n * h * w]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = lb[8..8 + n].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(
        RTensor::new(vec![n, h, w], pixels)?,
        labels,
        n_classes,
        "all",
    )
}

/// Writes `ds` as an IDX pair; pixels are quantized to `round(255·v)`.
pub fn write_idx(
    ds: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (h, w) = ds.image_shape();
    let n = ds.len();
    let mut ib = Vec::with_capacity(16 + n * h * w);
    for v in [IMAGE_MAGIC, n as u32, h as u32, w as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(
        ds.images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lb = Vec::with_capacity(8 + n);
    lb.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &ds.labels {
        let b = u8::try_from(l)
            .map_err(|_| Error::InvalidArgument(format!("label {l} does not fit a byte")))?;
        lb.push(b);
    }
    fs::write(images_path, ib)?;
    fs::write(labels_path, lb)?;
    Ok(())
}

/// Indices of a seeded sample of `n` rows without replacement.
pub fn subset_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::InvalidArgument(format!(
            "subset of {n} requested from {len} rows"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, len, n).into_vec())
}

/// A seeded subset of `n` rows.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    ds.select(&subset_indices(ds.len(), n, seed)?, ds.split.clone())
}

/// The seeded subset together with every remaining row (in original order).
pub fn subset_and_rest(ds: &Dataset, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let idx = subset_indices(ds.len(), n, seed)?;
    let mut taken = vec![false; ds.len()];
    idx.iter().for_each(|&i| taken[i] = true);
    let rest: Vec<usize> = (0..ds.len()).filter(|&i| !taken[i]).collect();
    Ok((ds.select(&idx, "subset")?, ds.select(&rest, "rest")?))
}

/// Input representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Features {
    /// Pixels embedded as complex numbers with zero imaginary part.
    Raw,
    /// Centered 2d DFT of each image.
    Fft,
}

impl fmt::Display for Features {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Features::Raw => "raw",
            Features::Fft => "fft",
        })
    }
}

impl FromStr for Features {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "raw" => Ok(Features::Raw),
            "fft" => Ok(Features::Fft),
            _ => Err(Error::InvalidArgument(format!(
                "unknown feature mode `{s}`"
            ))),
        }
    }
}

/// Complex features `[N, H, W]` for every image.
pub fn featurize(ds: &Dataset, mode: Features, norm: DftNorm) -> Result<CTensor> {
    let raw = ds.images.to_complex();
    match mode {
        Features::Raw => Ok(raw),
        Features::Fft => dft2d(&raw, true, false, norm),
    }
}

/// Class-conditional Gaussian blobs `[N, 1, dim]` with isotropic standard
/// deviation 0.1 and class means `0.5·√2 e_c`, i.e. pairwise 10σ apart.
pub fn synthetic_gaussians(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || n_classes < 2 || dim < n_classes {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs n_per_class > 0, n_classes >= 2 and dim >= n_classes (got {n_per_class}, {n_classes}, {dim})"
        )));
    }
    const SIGMA: f64 = 0.1;
    let offset = 10.0 * SIGMA / std::f64::consts::SQRT_2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SIGMA).expect("positive sigma");
    let n = n_per_class * n_classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % n_classes;
        labels.push(c);
        data.extend((0..dim).map(|d| noise.sample(&mut rng) + if d == c { offset } else { 0.0 }));
    }
    Dataset::new(
        RTensor::new(vec![n, 1, dim], data)?,
        labels,
        n_classes,
        "synthetic",
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize) -> Dataset {
        let data = (0..n * 28 * 28)
            .map(|i| ((i * 37) % 256) as f64 / 255.0)
            .collect();
        Dataset::new(
            RTensor::new(vec![n, 28, 28], data).unwrap(),
            (0..n).map(|i| i % 10).collect(),
            10,
            "t",
        )
        .unwrap()
    }

    #[test]
    fn idx_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (i1, l1) = (dir.path().join("i1"), dir.path().join("l1"));
        write_idx(&fixture(3), &i1, &l1).unwrap();
        let ds = load_idx(&i1, &l1).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.image_shape(), (28, 28));
        let (i2, l2) = (dir.path().join("i2"), dir.path().join("l2"));
        write_idx(&ds, &i2, &l2).unwrap();
        assert_eq!(fs::read(&i1).unwrap(), fs::read(&i2).unwrap());
        assert_eq!(fs::read(&l1).unwrap(), fs::read(&l2).unwrap());
    }

    #[test]
    fn idx_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&fixture(3), &ip, &lp).unwrap();

        let mut bad = fs::read(&ip).unwrap();
        bad[3] = 0x02;
        let bp = dir.path().join("bad");
        fs::write(&bp, &bad).unwrap();
        assert!(matches!(
            load_idx(&bp, &lp),
            Err(Error::BadMagic { found: 0x802, .. })
        ));

        let good = fs::read(&ip).unwrap();
        fs::write(&bp, &good[..good.len() - 5]).unwrap();
        assert!(matches!(load_idx(&bp, &lp), Err(Error::Truncated { .. })));

        let (i4, l4) = (dir.path().join("i4"), dir.path().join("l4"));
        write_idx(&fixture(4), &i4, &l4).unwrap();
        assert!(matches!(
            load_idx(&ip, &l4),
            Err(Error::CountMismatch {
                images: 3,
                labels: 4
            })
        ));
    }

    #[test]
    fn subsets_are_seeded_sets() {
        let ds = fixture(50);
        let a = subset_indices(50, 20, 7).unwrap();
        assert_eq!(a, subset_indices(50, 20, 7).unwrap());
        let mut s = a.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 20);
        let mut full = subset_indices(50, 50, 1).unwrap();
        full.sort_unstable();
        assert_eq!(full, (0..50).collect::<Vec<_>>());
        assert!(subset(&ds, 51, 0).is_err());
        let (sub, rest) = subset_and_rest(&ds, 20, 7).unwrap();
        assert_eq!((sub.len(), rest.len()), (20, 30));
    }

    #[test]
    fn subset_matches_golden_indices() {
        let golden: Vec<usize> = include_str!("../tests/golden/subset_5000_100_seed0.txt")
            .split_whitespace()
            .map(|t| t.parse().unwrap())
            .collect();
        assert_eq!(subset_indices(5000, 100, 0).unwrap(), golden);
    }

    #[test]
    fn features() {
        let ds = fixture(2);
        let raw = featurize(&ds, Features::Raw, DftNorm::None).unwrap();
        assert!(raw.im().iter().all(|v| *v == 0.0));
        assert_eq!(raw.real_part(), ds.images);
        let f = featurize(&ds, Features::Fft, DftNorm::None).unwrap();
        for i in 0..2 {
            let r = i * 784..(i + 1) * 784;
            let e_pix: f64 = ds.images.data()[r.clone()].iter().map(|v| v * v).sum();
            let e_f: f64 = f.abs2().data()[r].iter().sum();
            assert!((e_f - 784.0 * e_pix).abs() < 1e-9 * e_f);
        }
    }

    #[test]
    fn synthetic_blobs_are_separated_and_seeded() {
        let a = synthetic_gaussians(50, 3, 8, 4).unwrap();
        assert_eq!(a, synthetic_gaussians(50, 3, 8, 4).unwrap());
        assert_eq!(a.images.shape(), &[150, 1, 8]);
        // Nearest-mean classification is perfect.
        let offset = 1.0 / std::f64::consts::SQRT_2;
        for i in 0..a.len() {
            let x = &a.images.data()[i * 8..(i + 1) * 8];
            let best = (0..3)
                .min_by(|&p, &q| {
                    let d = |c: usize| {
                        x.iter()
                            .enumerate()
                            .map(|(k, v)| (v - if k == c { offset } else { 0.0 }).powi(2))
                            .sum::<f64>()
                    };
                    d(p).total_cmp(&d(q))
                })
                .unwrap();
            assert_eq!(best, a.labels[i]);
        }
        assert!(synthetic_gaussians(5, 4, 3, 0).is_err());
    }
}
