//! Image latents and the binary matrix file format.
//!
//! Matrix file layout (little-endian): 4-byte magic `DMAT`, `u32` version (1),
//! `u32` rows, `u32` cols, then `rows · cols` `f32` values row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: [u8; 4] = *b"DMAT";
pub const MATRIX_VERSION: u32 = 1;
pub const MATRIX_HEADER_BYTES: usize = 16;

/// Row-major `f32` matrix as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix32 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix32 {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MATRIX_HEADER_BYTES + 4 * self.data.len());
        out.extend_from_slice(&MATRIX_MAGIC);
        out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MATRIX_HEADER_BYTES {
            return Err(Error::format("matrix file", "shorter than its header"));
        }
        if bytes[..4] != MATRIX_MAGIC {
            return Err(Error::format("matrix file", "bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != MATRIX_VERSION {
            return Err(Error::format(
                "matrix file",
                format!("unsupported version {version}"),
            ));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        let payload = &bytes[MATRIX_HEADER_BYTES..];
        if payload.len() != rows * cols * 4 {
            return Err(Error::format(
                "matrix file",
                format!(
                    "{rows}×{cols} needs {} payload bytes, found {}",
                    rows * cols * 4,
                    payload.len()
                ),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { rows, cols, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Key-value image store: image id → latent vector. Ids are dense in `[0, len)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureStore {
    latents: Matrix32,
}

impl ImageFeatureStore {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Dimension {
                op: "image store",
                left: vec![dim],
                right: vec![data.len()],
            });
        }
        Ok(Self {
            latents: Matrix32 {
                rows: data.len() / dim,
                cols: dim,
                data,
            },
        })
    }

    pub fn from_matrix(latents: Matrix32) -> Self {
        Self { latents }
    }

    pub fn matrix(&self) -> &Matrix32 {
        &self.latents
    }

    pub fn len(&self) -> usize {
        self.latents.rows
    }

    pub fn is_empty(&self) -> bool {
        self.latents.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.latents.cols
    }

    pub fn contains(&self, image: u32) -> bool {
        (image as usize) < self.latents.rows
    }

    pub fn latent(&self, image: u32) -> Result<&[f32]> {
        let i = image as usize;
        if i >= self.latents.rows {
            return Err(Error::UnknownImage(u64::from(image)));
        }
        let d = self.latents.cols;
        Ok(&self.latents.data[i * d..(i + 1) * d])
    }
}
