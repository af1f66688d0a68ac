//! MNIST (IDX) and CIFAR-10 (binary) ingestion, normalization, subsetting
//! and augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

impl std::str::FromStr for DatasetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar10" => Ok(DatasetName::Cifar10),
            _ => Err(Error::InvalidConfig(format!(
                "unknown dataset '{s}' (mnist|cifar10)"
            ))),
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Normalized images `[N, C, H, W]` stored as `f32`, with labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub shape: [usize; 4],
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Pad-4 random crop and horizontal flip when batching.
    pub augment: bool,
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        msg: msg.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| format_err(path, 0, format!("cannot read file: {e}")))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, offset, "file truncated inside header"))
}

/// Parses an IDX image file into `(n, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("expected {need} bytes for {n} images of {rows}x{cols}"),
        ));
    }
    Ok((n, rows, cols, bytes[16..need].to_vec()))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(format_err(
            path,
            bytes.len(),
            format!("expected {} bytes for {n} labels", 8 + n),
        ));
    }
    let labels = bytes[8..8 + n].to_vec();
    if let Some(p) = labels.iter().position(|&l| l > 9) {
        return Err(format_err(
            path,
            8 + p,
            format!("label {} out of range", labels[p]),
        ));
    }
    Ok(labels)
}

/// Parses concatenated CIFAR-10 binary records into `(pixels, labels)`.
pub fn parse_cifar(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(format_err(
            path,
            bytes.len() - bytes.len() % CIFAR_RECORD,
            format!(
                "length {} is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(format_err(
                path,
                i * CIFAR_RECORD,
                format!("label {} out of range", rec[0]),
            ));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

struct Raw {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    shape: [usize; 4],
}

fn load_mnist_split(dir: &Path, split: Split) -> Result<Raw> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let ip = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lp = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(&ip)?, &ip)?;
    let labels = parse_idx_labels(&read_file(&lp)?, &lp)?;
    if labels.len() != n {
        return Err(format_err(
            &lp,
            4,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    Ok(Raw {
        pixels,
        labels,
        shape: [n, 1, rows, cols],
    })
}

fn load_cifar_split(dir: &Path, split: Split) -> Result<Raw> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let (p, l) = parse_cifar(&read_file(f)?, f)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    Ok(Raw {
        pixels,
        labels,
        shape: [n, 3, 32, 32],
    })
}

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
pub fn channel_stats(pixels: &[u8], shape: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = shape;
    let plane = h * w;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * plane;
            for &p in &pixels[start..start + plane] {
                let v = p as f64 / 255.0;
                mean[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let count = (n * plane) as f64;
    let std = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, &s)| {
            *m /= count;
            (s / count - *m * *m).max(1e-12).sqrt()
        })
        .collect();
    (mean, std)
}

/// Indices of the first `size / classes` examples of every class, in file order.
pub fn first_k_per_class(labels: &[usize], classes: usize, size: usize) -> Result<Vec<usize>> {
    if !size.is_multiple_of(classes) {
        return Err(Error::invalid(
            "subset",
            format!("subset size {size} is not a multiple of {classes} classes"),
        ));
    }
    let per = size / classes;
    let mut taken = vec![0; classes];
    let mut out = Vec::with_capacity(size);
    for (i, &l) in labels.iter().enumerate() {
        if taken[l] < per {
            taken[l] += 1;
            out.push(i);
        }
    }
    if let Some(c) = taken.iter().position(|&t| t < per) {
        return Err(Error::invalid(
            "subset",
            format!("class {c} has only {} examples, need {per}", taken[c]),
        ));
    }
    Ok(out)
}

fn finish(
    raw: Raw,
    split: Split,
    mean: &[f64],
    std: &[f64],
    subset: Option<usize>,
    augment: bool,
) -> Result<Dataset> {
    let labels: Vec<usize> = raw.labels.iter().map(|&l| l as usize).collect();
    let [n, c, h, w] = raw.shape;
    let plane = h * w;
    let keep: Vec<usize> = match subset {
        Some(size) => first_k_per_class(&labels, 10, size)?,
        None => (0..n).collect(),
    };
    let mut images = Vec::with_capacity(keep.len() * c * plane);
    for &i in &keep {
        for ch in 0..c {
            let start = (i * c + ch) * plane;
            images.extend(
                raw.pixels[start..start + plane]
                    .iter()
                    .map(|&p| ((p as f64 / 255.0 - mean[ch]) / std[ch]) as f32),
            );
        }
    }
    Ok(Dataset {
        images,
        shape: [keep.len(), c, h, w],
        labels: keep.iter().map(|&i| labels[i]).collect(),
        num_classes: 10,
        split,
        augment: augment && split == Split::Train,
    })
}

/// Loads the train and test splits, normalized with statistics of the full
/// training split. Subsets take the first `k / 10` examples of each class.
pub fn load_dataset(
    name: DatasetName,
    dir: &Path,
    train_subset: Option<usize>,
    test_subset: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    let (train, test, augment) = match name {
        DatasetName::Mnist => (
            load_mnist_split(dir, Split::Train)?,
            load_mnist_split(dir, Split::Test)?,
            false,
        ),
        DatasetName::Cifar10 => (
            load_cifar_split(dir, Split::Train)?,
            load_cifar_split(dir, Split::Test)?,
            true,
        ),
    };
    let (mean, std) = channel_stats(&train.pixels, train.shape);
    Ok((
        finish(train, Split::Train, &mean, &std, train_subset, augment)?,
        finish(test, Split::Test, &mean, &std, test_subset, false)?,
    ))
}

/// `CONDENSE_DATA_DIR/<dataset>` unless overridden.
pub fn default_data_dir(name: DatasetName) -> PathBuf {
    let root = std::env::var_os("CONDENSE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"));
    root.join(name.to_string())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn resolution(&self) -> usize {
        self.shape[2]
    }

    /// Gathers `indices` into a batch. Augments when the dataset is flagged
    /// and an RNG is supplied.
    pub fn batch<T: Element, R: Rng + ?Sized>(
        &self,
        indices: &[usize],
        mut rng: Option<&mut R>,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let [_, c, h, w] = self.shape;
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            let img = &self.images[i * per..(i + 1) * per];
            match rng.as_deref_mut() {
                Some(r) if self.augment => {
                    let dy = r.random_range(0..=8) as isize - 4;
                    let dx = r.random_range(0..=8) as isize - 4;
                    let flip = r.random_bool(0.5);
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let sx = if flip { w - 1 - x } else { x } as isize + dx;
                                let sy = y as isize + dy;
                                let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize
                                {
                                    0.0
                                } else {
                                    img[(ch * h + sy as usize) * w + sx as usize]
                                };
                                data.push(T::from_f64_lossy(v as f64));
                            }
                        }
                    }
                }
                _ => data.extend(img.iter().map(|&v| T::from_f64_lossy(v as f64))),
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::from_vec(&[indices.len(), c, h, w], data)?, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idx_images(n: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend((0..n * rows * cols).map(|i| i as u8));
        b
    }

    #[test]
    fn idx_images_roundtrip() {
        let (n, r, c, px) = parse_idx_images(&idx_images(2, 3, 4), Path::new("x")).unwrap();
        assert_eq!((n, r, c, px.len()), (2, 3, 4, 24));
    }

    #[test]
    fn idx_bad_magic_and_truncation() {
        let mut b = idx_images(2, 3, 4);
        b[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&b, Path::new("x")),
            Err(Error::Format { offset: 0, .. })
        ));
        let b = idx_images(2, 3, 4);
        match parse_idx_images(&b[..20], Path::new("x")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_idx_images(&b[..6], Path::new("x")),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn idx_labels_checked() {
        let mut b = Vec::new();
        b.extend(IDX_LABELS_MAGIC.to_be_bytes());
        b.extend(3u32.to_be_bytes());
        b.extend([1, 2, 12]);
        assert!(matches!(
            parse_idx_labels(&b, Path::new("x")),
            Err(Error::Format { offset: 10, .. })
        ));
    }

    #[test]
    fn cifar_record_length_checked() {
        let rec = vec![3u8; CIFAR_RECORD];
        let (p, l) = parse_cifar(&rec, Path::new("x")).unwrap();
        assert_eq!((p.len(), l), (3072, vec![3]));
        assert!(parse_cifar(&rec[..100], Path::new("x")).is_err());
    }

    #[test]
    fn subset_takes_first_per_class() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let idx = first_k_per_class(&labels, 10, 20).unwrap();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
        assert!(first_k_per_class(&labels, 10, 15).is_err());
        assert!(first_k_per_class(&labels, 10, 110).is_err());
    }

    #[test]
    fn stats_of_constant_image() {
        let (m, s) = channel_stats(&[255; 8], [2, 1, 2, 2]);
        assert!((m[0] - 1.0).abs() < 1e-12 && s[0] < 1e-5);
    }

    #[test]
    fn augmentation_is_deterministic_and_train_only() {
        let ds = Dataset {
            images: (0..2 * 3 * 8 * 8).map(|i| i as f32).collect(),
            shape: [2, 3, 8, 8],
            labels: vec![0, 1],
            num_classes: 10,
            split: Split::Train,
            augment: true,
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let (a, _) = ds.batch::<f64, _>(&[0, 1], Some(&mut r1)).unwrap();
        let (b, _) = ds.batch::<f64, _>(&[0, 1], Some(&mut r2)).unwrap();
        assert_eq!(a, b);
        let plain = Dataset {
            augment: false,
            ..ds.clone()
        };
        let (c, _) = plain.batch::<f64, _>(&[0, 1], Some(&mut r1)).unwrap();
        assert_eq!(c.data()[5], 5.0);
    }
}
