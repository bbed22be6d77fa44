//! Bag (`TGFB`) and text-embedding (`TGTE`) files.
//!
//! Both share one little-endian layout:
//!
//! | offset | size    | field                          |
//! |--------|---------|--------------------------------|
//! | 0      | 4       | magic                          |
//! | 4      | 4       | version (`u32`, = 1)           |
//! | 8      | 4       | rows `T` (`u32`)               |
//! | 12     | 4       | feature dim `d` (`u32`)        |
//! | 16     | 4       | label (`u32`; 0 for `TGTE`)    |
//! | 20     | 4       | id length in bytes (`u32`)     |
//! | 24     | id_len  | id (UTF-8)                     |
//! | …      | 4·T·d   | `f32` values, row-major        |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BAG_MAGIC: [u8; 4] = *b"TGFB";
pub const TEXT_MAGIC: [u8; 4] = *b"TGTE";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BagSource {
    Mock,
    Imported,
}

/// One video: `T` frame feature vectors and a single class label.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBag {
    pub bag_id: String,
    pub features: Tensor,
    pub label: usize,
    pub source: BagSource,
}

impl FrameBag {
    pub fn new(bag_id: impl Into<String>, features: Tensor, label: usize, source: BagSource) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "frame_bag",
                shape: features.shape().to_vec(),
                reason: "features must be T×d".into(),
            });
        }
        if !features.is_finite() {
            return Err(Error::InvalidShape {
                op: "frame_bag",
                shape: features.shape().to_vec(),
                reason: "non-finite feature".into(),
            });
        }
        Ok(Self {
            bag_id: bag_id.into(),
            features,
            label,
            source,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rounds features through `f32`, matching what a file round trip yields.
    pub fn quantized(mut self) -> Self {
        for v in self.features.data_mut() {
            *v = f64::from(*v as f32);
        }
        self
    }
}

/// Class-wise text embeddings, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    pub name: String,
    pub rows: Tensor,
}

fn encode(magic: [u8; 4], id: &str, label: u32, values: &Tensor) -> Vec<u8> {
    let (rows, cols) = (values.rows(), values.cols());
    let mut out = Vec::with_capacity(HEADER_LEN + id.len() + 4 * values.len());
    out.extend_from_slice(&magic);
    for field in [FORMAT_VERSION, rows as u32, cols as u32, label, id.len() as u32] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    out.extend_from_slice(id.as_bytes());
    for v in values.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

struct Decoded {
    id: String,
    label: u32,
    values: Tensor,
}

fn decode(path: &Path, magic: [u8; 4], bytes: &[u8]) -> Result<Decoded> {
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    let found: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = field(0);
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let (rows, cols, label, id_len) = (field(1) as usize, field(2) as usize, field(3), field(4) as usize);
    if rows == 0 || cols == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("empty payload ({rows}×{cols})"),
        });
    }
    let payload_len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| truncated("payload size overflows".into()))?;
    let expected = HEADER_LEN + id_len + payload_len;
    if bytes.len() < expected {
        return Err(truncated(format!("{} bytes, expected {expected}", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let id = std::str::from_utf8(&bytes[HEADER_LEN..HEADER_LEN + id_len])
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("id is not UTF-8: {e}"),
        })?
        .to_string();
    let data: Vec<f64> = bytes[HEADER_LEN + id_len..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "non-finite value".into(),
        });
    }
    Ok(Decoded {
        id,
        label,
        values: Tensor::new(vec![rows, cols], data)?,
    })
}

pub fn encode_bag(bag: &FrameBag) -> Vec<u8> {
    encode(BAG_MAGIC, &bag.bag_id, bag.label as u32, &bag.features)
}

pub fn decode_bag(path: &Path, bytes: &[u8]) -> Result<FrameBag> {
    let d = decode(path, BAG_MAGIC, bytes)?;
    FrameBag::new(d.id, d.values, d.label as usize, BagSource::Imported)
}

pub fn write_bag(path: impl AsRef<Path>, bag: &FrameBag) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_bag(bag)).map_err(|e| Error::io(path, e))
}

pub fn read_bag(path: impl AsRef<Path>) -> Result<FrameBag> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bag(path, &bytes)
}

/// Reads a bag and checks it against the manifest's dimension and class count.
pub fn read_bag_checked(path: impl AsRef<Path>, dim: usize, classes: usize) -> Result<FrameBag> {
    let path = path.as_ref();
    let bag = read_bag(path)?;
    if bag.dim() != dim {
        return Err(Error::DimensionMismatch {
            path: path.to_path_buf(),
            found: bag.dim(),
            expected: dim,
        });
    }
    if bag.label >= classes {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("label {} out of range for {classes} classes", bag.label),
        });
    }
    Ok(bag)
}

pub fn write_text_embeddings(path: impl AsRef<Path>, emb: &TextEmbeddings) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(TEXT_MAGIC, &emb.name, 0, &emb.rows)).map_err(|e| Error::io(path, e))
}

pub fn read_text_embeddings(path: impl AsRef<Path>) -> Result<TextEmbeddings> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let d = decode(path, TEXT_MAGIC, &bytes)?;
    Ok(TextEmbeddings {
        name: d.id,
        rows: d.values,
    })
}
