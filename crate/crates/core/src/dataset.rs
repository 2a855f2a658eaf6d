//! MNIST ingestion from the IDX binary format.
//!
//! Images are scaled to `[0, 1]` and zero-padded from 28x28 to 32x32 so the
//! LeNet convolution schedule ends on a 1x1 map.

use std::collections::HashSet;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const NUM_CLASSES: usize = 10;
pub const IMAGE_SIDE: usize = 32;
pub const MNIST_SIDE: usize = 28;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled images `[N, 32, 32, 1]` with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for images {:?}", labels.len(), shape),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::OutOfRange {
                what: "class label",
                index: bad,
                len: NUM_CLASSES,
            });
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let len = self.image_len();
        &self.images.data()[index * len..(index + 1) * len]
    }

    /// Copies the listed examples, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.gather(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset { images, labels })
    }

    pub fn slice(&self, range: Range<usize>) -> Result<Dataset> {
        if range.start > range.end || range.end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "slice {range:?} outside dataset of {}",
                self.len()
            )));
        }
        let indices: Vec<usize> = range.collect();
        self.subset(&indices)
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        histogram(self.labels.iter().copied())
    }
}

pub fn histogram(labels: impl IntoIterator<Item = usize>) -> [usize; NUM_CLASSES] {
    let mut h = [0; NUM_CLASSES];
    for l in labels {
        h[l] += 1;
    }
    h
}

/// Cuts several slices that must not share any index.
pub fn split_disjoint(dataset: &Dataset, ranges: &[Range<usize>]) -> Result<Vec<Dataset>> {
    let mut seen = HashSet::new();
    for r in ranges {
        for i in r.clone() {
            if !seen.insert(i) {
                return Err(Error::InvalidArgument(format!(
                    "index {i} appears in more than one slice"
                )));
            }
        }
    }
    ranges.iter().map(|r| dataset.slice(r.clone())).collect()
}

/// Centers a square `side x side` image inside a 32x32 zero canvas. An
/// image that is already 32x32 is returned unchanged.
pub fn pad_to_32(pixels: &[f32], side: usize) -> Result<Vec<f32>> {
    if side > IMAGE_SIDE || pixels.len() != side * side {
        return Err(Error::shape(
            "pad",
            format!("{} pixels for a {side}x{side} image", pixels.len()),
        ));
    }
    let offset = (IMAGE_SIDE - side) / 2;
    let mut out = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    for (r, row) in pixels.chunks_exact(side).enumerate() {
        let start = (r + offset) * IMAGE_SIDE + offset;
        out[start..start + side].copy_from_slice(row);
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn format_err(kind: &'static str, path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        kind,
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses an IDX3 image file into padded, normalized `[N, 32, 32, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let err = |d: String| format_err("IDX image", path, d);
    let magic = read_u32(bytes, 0).ok_or_else(|| err("truncated header".into()))?;
    if magic != IMAGES_MAGIC {
        return Err(err(format!("bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")));
    }
    let (n, rows, cols) = match (read_u32(bytes, 4), read_u32(bytes, 8), read_u32(bytes, 12)) {
        (Some(n), Some(r), Some(c)) => (n as usize, r as usize, c as usize),
        _ => return Err(err("truncated header".into())),
    };
    if rows != cols || rows == 0 || rows > IMAGE_SIDE {
        return Err(err(format!("unsupported image size {rows}x{cols}")));
    }
    let body = &bytes[16..];
    let expected = n * rows * cols;
    if body.len() != expected {
        return Err(err(format!(
            "header declares {n} images ({expected} bytes), file holds {} bytes",
            body.len()
        )));
    }
    let mut data = Vec::with_capacity(n * IMAGE_SIDE * IMAGE_SIDE);
    let mut scaled = vec![0.0f32; rows * cols];
    for raw in body.chunks_exact(rows * cols) {
        for (s, &b) in scaled.iter_mut().zip(raw) {
            *s = b as f32 / 255.0;
        }
        data.extend(pad_to_32(&scaled, rows)?);
    }
    Ok(Tensor::from_parts(vec![n, IMAGE_SIDE, IMAGE_SIDE, 1], data))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let err = |d: String| format_err("IDX label", path, d);
    let magic = read_u32(bytes, 0).ok_or_else(|| err("truncated header".into()))?;
    if magic != LABELS_MAGIC {
        return Err(err(format!("bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")));
    }
    let n = read_u32(bytes, 4).ok_or_else(|| err("truncated header".into()))? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(err(format!("header declares {n} labels, file holds {}", body.len())));
    }
    if let Some(&bad) = body.iter().find(|&&b| b as usize >= NUM_CLASSES) {
        return Err(err(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let images = parse_idx_images(&image_bytes, images_path)?;
    let labels = parse_idx_labels(&label_bytes, labels_path)?;
    if images.shape()[0] != labels.len() {
        return Err(format_err(
            "IDX",
            labels_path,
            format!("{} images but {} labels", images.shape()[0], labels.len()),
        ));
    }
    Ok(Dataset { images, labels })
}

/// The standard train/test pair.
#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

/// Resolves the MNIST directory: explicit path, then `MNIST_DIR`, then
/// `./data/mnist`.
pub fn mnist_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os("MNIST_DIR") {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => PathBuf::from("data/mnist"),
    }
}

pub fn load_mnist(dir: &Path) -> Result<Mnist> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok(Mnist { train, test })
}
