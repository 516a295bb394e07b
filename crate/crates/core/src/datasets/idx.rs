//! IDX container parsing (the format MNIST ships in).

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::DataError;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Grayscale images scaled to `[0, 1]`, row-major per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
}

impl ImageSet {
    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Images `range` as a new set.
    pub fn slice(&self, range: std::ops::Range<usize>) -> ImageSet {
        let n = self.rows * self.cols;
        ImageSet {
            count: range.len(),
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels[range.start * n..range.end * n].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    Images(ImageSet),
    Labels(Vec<u8>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: [usize; 3],
    pub rank: usize,
    pub header_len: usize,
}

impl IdxHeader {
    pub fn payload_len(&self) -> Option<usize> {
        self.dims[..self.rank]
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            expected: at + 4,
            got: bytes.len(),
        })
}

/// Reads the magic number and dimensions without touching the payload.
pub fn parse_idx_header(bytes: &[u8]) -> Result<IdxHeader, DataError> {
    let magic = be_u32(bytes, 0)?;
    let rank = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        other => return Err(DataError::BadMagic(other)),
    };
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().take(rank).enumerate() {
        *d = be_u32(bytes, 4 + 4 * i)? as usize;
    }
    let header = IdxHeader {
        magic,
        dims,
        rank,
        header_len: 4 + 4 * rank,
    };
    if header.payload_len().is_none() {
        return Err(DataError::DimOverflow);
    }
    Ok(header)
}

/// Decodes an uncompressed IDX image (`0x803`) or label (`0x801`) file.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData, DataError> {
    let header = parse_idx_header(bytes)?;
    let payload = header.payload_len().ok_or(DataError::DimOverflow)?;
    let end = header
        .header_len
        .checked_add(payload)
        .ok_or(DataError::DimOverflow)?;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            expected: end,
            got: bytes.len(),
        });
    }
    let body = &bytes[header.header_len..end];
    Ok(match header.magic {
        IMAGES_MAGIC => IdxData::Images(ImageSet {
            count: header.dims[0],
            rows: header.dims[1],
            cols: header.dims[2],
            pixels: body.iter().map(|&b| b as f32 / 255.0).collect(),
        }),
        _ => IdxData::Labels(body.to_vec()),
    })
}

/// Reads an IDX file from disk, transparently gunzipping `.gz` files.
pub fn load_idx_file(path: &Path) -> Result<IdxData, DataError> {
    let raw = std::fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| DataError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        out
    } else {
        raw
    };
    parse_idx(&bytes)
}

/// Loads the training images from an MNIST directory.
///
/// Looks for `train-images-idx3-ubyte` with or without a `.gz` suffix.
pub fn load_mnist_images(dir: &Path) -> Result<ImageSet, DataError> {
    for name in ["train-images-idx3-ubyte", "train-images-idx3-ubyte.gz", "train-images.idx3-ubyte"] {
        let path = dir.join(name);
        if path.exists() {
            return match load_idx_file(&path)? {
                IdxData::Images(set) => Ok(set),
                IdxData::Labels(_) => Err(DataError::BadMagic(LABELS_MAGIC)),
            };
        }
    }
    Err(DataError::Missing(dir.join("train-images-idx3-ubyte").display().to_string()))
}
