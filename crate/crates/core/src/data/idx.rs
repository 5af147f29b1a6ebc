//! IDX container (big-endian header, unsigned byte payload).

use std::fs;
use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Validate magic and size of an IDX file, returning header dims and payload.
fn read_idx(path: &Path, magic: u32, ndims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let header = 4 + 4 * ndims;
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected: expected as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(header));
    }
    let found = be_u32(&bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = (0..ndims).map(|d| be_u32(&bytes, 4 + 4 * d) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(Error::Parse(format!(
            "{}: {} trailing bytes after the declared payload",
            path.display(),
            bytes.len() - expected
        )));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Load an image/label IDX pair. Pixels are scaled to `[0, 1]`; class count
/// is 10 or one more than the largest label, whichever is larger.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images_path, IMAGE_MAGIC, 3)?;
    let (ldims, labels) = read_idx(labels_path, LABEL_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let class_count = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(
        pixels.into_iter().map(|b| f64::from(b) / 255.0).collect(),
        vec![idims[1], idims[2], 1],
        labels,
        class_count,
        images_path.display().to_string(),
    )
}

/// Write a single-channel image dataset back to IDX. Feature values must be
/// exact multiples of 1/255 in `[0, 1]`, as produced by [`load_idx`].
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let &[rows, cols, 1] = dataset.feature_shape() else {
        return Err(Error::dim(format!(
            "IDX images must be rows × cols × 1, got {:?}",
            dataset.feature_shape()
        )));
    };
    let mut images = Vec::with_capacity(16 + dataset.features().len());
    images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [dataset.len(), rows, cols] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in dataset.features() {
        let b = (v * 255.0).round();
        if !(0.0..=255.0).contains(&b) || (b / 255.0 - v).abs() > 1e-12 {
            return Err(Error::domain(format!("feature value {v} is not a byte/255 pixel")));
        }
        images.push(b as u8);
    }
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &y in dataset.labels() {
        labels.push(u8::try_from(y).map_err(|_| Error::domain(format!("label {y} exceeds a byte")))?);
    }
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}

/// Standard MNIST file names inside a directory.
#[derive(Debug, Clone)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn in_dir(dir: &Path) -> Self {
        MnistFiles {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn exist(&self) -> bool {
        [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ]
        .iter()
        .all(|p| p.is_file())
    }
}

/// `(train, test)` from a directory holding the four MNIST IDX files.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let f = MnistFiles::in_dir(dir);
    Ok((
        load_idx(&f.train_images, &f.train_labels)?,
        load_idx(&f.test_images, &f.test_labels)?,
    ))
}
