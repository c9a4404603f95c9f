//! Raw per-item modality features and their `CRSF` file format.
//!
//! Layout (little-endian): magic `CRSF`, version `u32`, item_count `u32`,
//! token_count `u32`, feat_dim `u32`, then `item_count × token_count ×
//! feat_dim` `f32` values, row-major, items ordered by id.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CRSF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub item_count: usize,
    pub token_count: usize,
    pub feat_dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(item_count: usize, token_count: usize, feat_dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != item_count * token_count * feat_dim {
            return Err(Error::Shape {
                op: "feature matrix",
                left: vec![item_count, token_count, feat_dim],
                right: vec![data.len()],
            });
        }
        Ok(Self {
            item_count,
            token_count,
            feat_dim,
            data,
        })
    }

    pub fn item_slice(&self, item: usize) -> &[f32] {
        let n = self.token_count * self.feat_dim;
        &self.data[item * n..(item + 1) * n]
    }

    /// One item's `token_count × feat_dim` feature matrix.
    pub fn item(&self, item: usize) -> Result<Tensor> {
        if item >= self.item_count {
            return Err(Error::OutOfRange {
                what: "item",
                index: item,
                len: self.item_count,
            });
        }
        let data = self.item_slice(item).iter().map(|&x| f64::from(x)).collect();
        Tensor::from_vec(self.token_count, self.feat_dim, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut buf = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        buf.extend_from_slice(FEATURE_MAGIC);
        for v in [FEATURE_VERSION, self.item_count as u32, self.token_count as u32, self.feat_dim as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(f).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() < HEADER_LEN || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::format(path, "missing CRSF magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != FEATURE_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let (items, tokens, dim) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let expected = items * tokens * dim * 4;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::format(
                path,
                format!(
                    "header declares {items}x{tokens}x{dim} floats ({expected} bytes) but payload has {} bytes",
                    payload.len()
                ),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(items, tokens, dim, data)
    }
}
