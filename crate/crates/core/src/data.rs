//! Image datasets in the `[0, 1]` pixel domain.
//!
//! Pixels are kept as the source bytes and scaled by `1/255` on access, which
//! makes writing a record back out byte-exact. Attack-facing images therefore
//! always hold values `k / 255`.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR10_PER_BATCH: usize = 10_000;
pub const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR10_TEST_FILE: &str = "test_batch.bin";

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    image_shape: [usize; 3],
    num_classes: usize,
    split: Split,
    reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            pixels: self.pixels.clone(),
            labels: self.labels.clone(),
            image_shape: self.image_shape,
            num_classes: self.num_classes,
            split: self.split,
            reads: AtomicUsize::new(0),
        }
    }
}

impl Dataset {
    /// Build from raw bytes: `pixels` holds `labels.len()` images of
    /// `image_shape` each, channels-first.
    pub fn from_bytes(
        pixels: Vec<u8>,
        labels: Vec<u8>,
        image_shape: [usize; 3],
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::shape(format!(
                "{} pixel bytes for {} images of {image_shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::usage(format!("unsupported class count {num_classes}")));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::format(
                "labels",
                format!("label {bad} outside [0, {num_classes})"),
            ));
        }
        Ok(Self {
            pixels,
            labels,
            image_shape,
            num_classes,
            split,
            reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index] as usize
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().map(|&l| l as usize)
    }

    fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn raw_image(&self, index: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[index * n..(index + 1) * n]
    }

    /// Image `index` as a `[C, H, W]` tensor in `[0, 1]`.
    pub fn image(&self, index: usize) -> Tensor {
        self.reads.fetch_add(1, Ordering::Relaxed);
        let data = self.raw_image(index).iter().map(|&b| b as f32 / 255.0).collect();
        Tensor::new(&self.image_shape, data).expect("shape checked at construction")
    }

    /// Number of image reads served so far.
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    /// First `n` examples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            image_shape: self.image_shape,
            num_classes: self.num_classes,
            split: self.split,
            reads: AtomicUsize::new(0),
        }
    }

    /// Stack the given examples into a `[B, C, H, W]` batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        self.reads.fetch_add(indices.len(), Ordering::Relaxed);
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.raw_image(i).iter().map(|&b| b as f32 / 255.0));
        }
        let [c, h, w] = self.image_shape;
        let t = Tensor::new(&[indices.len(), c, h, w], data).expect("non-empty batch");
        (t, indices.iter().map(|&i| self.label(i)).collect())
    }

    /// Serialise examples in CIFAR-10 record layout (label byte + planes).
    pub fn to_cifar10_bytes(&self) -> Result<Vec<u8>> {
        if self.image_shape != [3, 32, 32] {
            return Err(Error::shape("CIFAR-10 records hold 3x32x32 images"));
        }
        let mut out = Vec::with_capacity(self.len() * CIFAR10_RECORD);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.raw_image(i));
        }
        Ok(out)
    }

    /// Serialise as an MNIST-style IDX image file and label file.
    pub fn to_idx_bytes(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let [c, h, w] = self.image_shape;
        if c != 1 {
            return Err(Error::shape("IDX image files hold single-channel images"));
        }
        let mut images = Vec::with_capacity(16 + self.pixels.len());
        images.extend_from_slice(&MNIST_IMAGE_MAGIC.to_be_bytes());
        for d in [self.len(), h, w] {
            images.extend_from_slice(&(d as u32).to_be_bytes());
        }
        images.extend_from_slice(&self.pixels);
        let mut labels = Vec::with_capacity(8 + self.len());
        labels.extend_from_slice(&MNIST_LABEL_MAGIC.to_be_bytes());
        labels.extend_from_slice(&(self.len() as u32).to_be_bytes());
        labels.extend_from_slice(&self.labels);
        Ok((images, labels))
    }
}

/// Parse a CIFAR-10 binary batch. `context` names the source in errors.
pub fn parse_cifar10_batch(bytes: &[u8], context: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR10_RECORD) {
        return Err(Error::format(
            context,
            format!(
                "{} bytes is not a whole number of {CIFAR10_RECORD}-byte records",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR10_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR10_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(
                context,
                format!("record {i} has label {} (expected < 10)", rec[0]),
            ));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn cifar_root(dir: &Path) -> std::path::PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(CIFAR10_TEST_FILE).exists() && nested.join(CIFAR10_TEST_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn load_cifar_files(root: &Path, files: &[&str], per_file: Option<usize>, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = root.join(name);
        let bytes = read_file(&path)?;
        let ctx = path.display().to_string();
        let (p, l) = parse_cifar10_batch(&bytes, &ctx)?;
        if let Some(expected) = per_file {
            if l.len() != expected {
                return Err(Error::format(ctx, format!("{} records, expected {expected}", l.len())));
            }
        }
        pixels.extend(p);
        labels.extend(l);
    }
    Dataset::from_bytes(pixels, labels, [3, 32, 32], 10, split)
}

/// Load the canonical CIFAR-10 binary distribution (5 × 10000 train records,
/// 10000 test records). Accepts either the batch directory itself or its
/// parent containing `cifar-10-batches-bin/`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    load_cifar10_with(dir, Some(CIFAR10_PER_BATCH))
}

/// As [`load_cifar10`], optionally without the per-file record count check
/// (for reduced copies of the dataset).
pub fn load_cifar10_with(dir: impl AsRef<Path>, records_per_file: Option<usize>) -> Result<(Dataset, Dataset)> {
    let root = cifar_root(dir.as_ref());
    let train = load_cifar_files(&root, &CIFAR10_TRAIN_FILES, records_per_file, Split::Train)?;
    let test = load_cifar_files(&root, &[CIFAR10_TEST_FILE], records_per_file, Split::Test)?;
    Ok((train, test))
}

fn be_u32(bytes: &[u8], at: usize, context: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(context, "truncated header"))
}

/// Parse an IDX3 image file into (`pixels`, `[1, rows, cols]`, count).
pub fn parse_idx_images(bytes: &[u8], context: &str) -> Result<(Vec<u8>, [usize; 3], usize)> {
    let magic = be_u32(bytes, 0, context)?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(Error::format(
            context,
            format!("bad magic {magic:#010x}, expected {MNIST_IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, context)? as usize;
    let rows = be_u32(bytes, 8, context)? as usize;
    let cols = be_u32(bytes, 12, context)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(context, "zero-sized image file"));
    }
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(context, "image dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::format(
            context,
            format!("expected {need} pixel bytes, found {}", body.len()),
        ));
    }
    Ok((body.to_vec(), [1, rows, cols], n))
}

/// Parse an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], context: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, context)?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(Error::format(
            context,
            format!("bad magic {magic:#010x}, expected {MNIST_LABEL_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, context)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(
            context,
            format!("header declares {n} labels, found {}", body.len()),
        ));
    }
    if let Some(bad) = body.iter().find(|&&l| l >= 10) {
        return Err(Error::format(context, format!("label {bad} outside [0, 10)")));
    }
    Ok(body.to_vec())
}

fn load_idx_pair(dir: &Path, images: &str, labels: &str, split: Split) -> Result<Dataset> {
    let ipath = dir.join(images);
    let lpath = dir.join(labels);
    let (pixels, shape, n) = parse_idx_images(&read_file(&ipath)?, &ipath.display().to_string())?;
    let labels = parse_idx_labels(&read_file(&lpath)?, &lpath.display().to_string())?;
    if labels.len() != n {
        return Err(Error::format(
            lpath.display().to_string(),
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    Dataset::from_bytes(pixels, labels, shape, 10, split)
}

/// Load uncompressed MNIST IDX files.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", Split::Train)?;
    let test = load_idx_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::Test)?;
    Ok((train, test))
}

/// Write `train` / `test` as CIFAR-10 binary batches: train split evenly over
/// the five `data_batch_*.bin` files.
pub fn write_cifar10(dir: impl AsRef<Path>, train: &Dataset, test: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = train.to_cifar10_bytes()?;
    let per = train.len() / CIFAR10_TRAIN_FILES.len();
    if per == 0 || !train.len().is_multiple_of(CIFAR10_TRAIN_FILES.len()) {
        return Err(Error::usage("train split must divide evenly into five batches"));
    }
    for (i, name) in CIFAR10_TRAIN_FILES.iter().enumerate() {
        let chunk = &bytes[i * per * CIFAR10_RECORD..(i + 1) * per * CIFAR10_RECORD];
        let path = dir.join(name);
        fs::write(&path, chunk).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(CIFAR10_TEST_FILE);
    fs::write(&path, test.to_cifar10_bytes()?).map_err(|e| Error::io(&path, e))
}

/// Mini-batches over a dataset. Each epoch visits every example once; the
/// shuffled order is a pure function of the seed.
pub struct BatchIter<'d> {
    ds: &'d Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iter(ds: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::usage("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

impl<'d> BatchIter<'d> {
    /// Indices of the upcoming batches, without reading pixels.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.ds.gather(idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, shape: [usize; 3]) -> Dataset {
        let per: usize = shape.iter().product();
        let pixels = (0..n * per).map(|i| (i * 31 % 256) as u8).collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::from_bytes(pixels, labels, shape, 10, Split::Train).unwrap()
    }

    #[test]
    fn cifar_record_parsing() {
        let mut rec = vec![6u8];
        rec.extend(std::iter::repeat_n(255u8, 3072));
        let (pixels, labels) = parse_cifar10_batch(&rec, "mem").unwrap();
        assert_eq!(labels, vec![6]);
        let ds = Dataset::from_bytes(pixels, labels, [3, 32, 32], 10, Split::Test).unwrap();
        assert_eq!(ds.label(0), 6);
        assert!(ds.image(0).data().iter().all(|&v| v == 1.0));
        assert!(parse_cifar10_batch(&rec[..100], "mem").is_err());
    }

    #[test]
    fn cifar_roundtrip_is_byte_exact() {
        let ds = tiny(5, [3, 32, 32]);
        let bytes = ds.to_cifar10_bytes().unwrap();
        let (p, l) = parse_cifar10_batch(&bytes, "mem").unwrap();
        let back = Dataset::from_bytes(p, l, [3, 32, 32], 10, Split::Train).unwrap();
        assert_eq!(back.to_cifar10_bytes().unwrap(), bytes);
    }

    #[test]
    fn idx_parsing_and_scaling() {
        let ds = tiny(3, [1, 4, 4]);
        let (mut images, labels) = ds.to_idx_bytes().unwrap();
        images[16] = 0;
        images[17] = 128;
        let (pixels, shape, n) = parse_idx_images(&images, "mem").unwrap();
        assert_eq!((shape, n), ([1, 4, 4], 3));
        let back = Dataset::from_bytes(
            pixels,
            parse_idx_labels(&labels, "mem").unwrap(),
            shape,
            10,
            Split::Test,
        )
        .unwrap();
        let img = back.image(0);
        assert_eq!(img.data()[0], 0.0);
        assert!((img.data()[1] - 0.50196).abs() < 1e-5);
        let mut bad = images.clone();
        bad[3] = 0x02;
        assert!(matches!(parse_idx_images(&bad, "mem"), Err(Error::Format { .. })));
        assert!(parse_idx_labels(&images, "mem").is_err());
    }

    #[test]
    fn batches_cover_each_example_once() {
        let ds = tiny(10, [1, 2, 2]);
        let sizes: Vec<usize> = batch_iter(&ds, 3, 0, false).unwrap().map(|(_, l)| l.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let plain: Vec<usize> = batch_iter(&ds, 4, 0, false).unwrap().flat_map(|(_, l)| l).collect();
        assert_eq!(plain, ds.labels().collect::<Vec<_>>());
        let a = batch_iter(&ds, 3, 9, true).unwrap().order().to_vec();
        let b = batch_iter(&ds, 3, 9, true).unwrap().order().to_vec();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert!(batch_iter(&ds, 0, 0, false).is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(err.to_string().contains("data_batch_1.bin"), "{err}");
    }

    #[test]
    fn write_then_load_with_reduced_counts() {
        let dir = tempfile::tempdir().unwrap();
        let train = tiny(10, [3, 32, 32]);
        let test = tiny(4, [3, 32, 32]);
        write_cifar10(dir.path(), &train, &test).unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::Format { .. })));
        let (tr, te) = load_cifar10_with(dir.path(), None).unwrap();
        assert_eq!((tr.len(), te.len()), (10, 4));
        assert_eq!(tr.to_cifar10_bytes().unwrap(), train.to_cifar10_bytes().unwrap());
    }
}
