//! IDX dataset files: a big-endian magic number, big-endian `u32` extents,
//! then unsigned bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Tensor, TensorShape};
use crate::train::{Dataset, Split};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Extents and payload of one IDX file.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

pub fn read_idx(path: impl AsRef<Path>, expected_magic: u32) -> Result<IdxFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(&bytes, 0)
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))?;
    if magic != expected_magic {
        return Err(Error::IdxMagic {
            path: path.into(),
            expected: expected_magic,
            found: magic,
        });
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for k in 0..rank {
        let d = be_u32(&bytes, 4 + 4 * k)
            .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))?;
        dims.push(d as usize);
    }
    let header = 4 + 4 * rank;
    let expected: usize = dims.iter().product();
    let found = bytes.len() - header.min(bytes.len());
    if found != expected {
        return Err(Error::ByteLength {
            path: path.into(),
            expected,
            found,
        });
    }
    Ok(IdxFile {
        magic,
        dims,
        payload: bytes[header..].to_vec(),
    })
}

/// Loads an image/label pair. Pixels are scaled by `1/255` and each image
/// becomes a flat vector.
pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset> {
    let img = read_idx(images, IMAGES_MAGIC)?;
    let lab = read_idx(labels, LABELS_MAGIC)?;
    let n = img.dims[0];
    if n != lab.dims[0] {
        return Err(Error::Shape(format!(
            "{n} images but {} labels",
            lab.dims[0]
        )));
    }
    let per: usize = img.dims[1..].iter().product();
    let shape = TensorShape::new(vec![per])?;
    let inputs = img
        .payload
        .chunks_exact(per.max(1))
        .take(n)
        .map(|c| Tensor::new(shape.clone(), c.iter().map(|&p| p as f64 / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    let labels = lab.payload.iter().map(|&y| y as usize).collect();
    Dataset::new(inputs, labels, split)
}
