//! The IDX container used by MNIST and Fashion-MNIST: a big-endian `u32`
//! magic (`0x0803` for 3-D unsigned-byte images, `0x0801` for 1-D labels),
//! one big-endian `u32` per dimension, then the raw `u8` payload.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        needed: offset + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

/// Parse an IDX buffer, checking the magic. Returns the dimensions and the
/// payload slice.
pub fn parse_idx<'a>(bytes: &'a [u8], expected_magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != expected_magic {
        return Err(Error::Magic {
            path: path.to_path_buf(),
            found: magic,
            expected: expected_magic,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|i| read_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let needed = header + dims.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..needed]))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Load an image/label file pair. Pixels are scaled to `[0, 1]` and a
/// channel axis is inserted, giving `N×1×rows×cols`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read(ip)?;
    let label_bytes = read(lp)?;
    let (dims, pixels) = parse_idx(&image_bytes, IMAGES_MAGIC, ip)?;
    let (ldims, labels) = parse_idx(&label_bytes, LABELS_MAGIC, lp)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: ldims[0],
        });
    }
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let images = Tensor::new(vec![n, 1, rows, cols], data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let names = (0..classes).map(|c| c.to_string()).collect();
    Dataset::new(images, labels, names)
}

/// Standard train/test file names inside a dataset directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Image and label file paths of this split inside `dir`.
    pub fn files(self, dir: &Path) -> (PathBuf, PathBuf) {
        let prefix = match self {
            Split::Train => "train",
            Split::Test => "t10k",
        };
        (
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            dir.join(format!("{prefix}-labels-idx1-ubyte")),
        )
    }
}

pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (images, labels) = split.files(dir.as_ref());
    load_idx(images, labels)
}

/// Encode images back to IDX. Pixels are mapped to `round(255·p)`.
pub fn encode_images(ds: &Dataset) -> Vec<u8> {
    let shape = ds.images.shape();
    let mut out = Vec::with_capacity(16 + ds.images.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for &d in &[shape[0], shape[2], shape[3]] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(ds.images.data().iter().map(|&p| (p * 255.0).round() as u8));
    out
}

pub fn encode_labels(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + ds.labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.labels.len() as u32).to_be_bytes());
    out.extend(ds.labels.iter().map(|&l| l as u8));
    out
}

pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, encode_images(ds)).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, encode_labels(ds)).map_err(|e| Error::io(lp, e))?;
    Ok(())
}
