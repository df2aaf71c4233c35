//! Reader and writer for `UFT1` feature files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "UFT1" | version (=1) | dim | record_count
//! per record: id_len | id (UTF-8) | rows | rows × dim f32
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::Conversation;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"UFT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a feature file (bad magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("feature file is truncated")]
    Truncated,
    #[error("record id is not valid UTF-8")]
    BadId,
    #[error("duplicate record {0}")]
    Duplicate(String),
    #[error("record {id} has {found} values, expected a multiple of dimension {dim}")]
    BadRecord { id: String, dim: usize, found: usize },
    #[error("no features for {0}")]
    Missing(String),
    #[error("feature dimension {found} does not match expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("{id}: expected {expected} rows, found {found}")]
    Rows {
        id: String,
        expected: usize,
        found: usize,
    },
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// One row block keyed by `"<conversation>_<utterance>"`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub rows: usize,
    pub values: Vec<f32>,
}

impl FeatureRecord {
    /// Hex SHA-256 of the values as little-endian `f32` bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_tensor(&self, dim: usize) -> Tensor {
        let data = self.values.iter().map(|&v| v as f64).collect();
        Tensor::new(vec![self.rows, dim], data).expect("record validated on insert")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    dim: usize,
    records: Vec<FeatureRecord>,
    index: HashMap<String, usize>,
}

impl FeatureFile {
    pub fn new(dim: usize) -> Self {
        FeatureFile {
            dim,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&FeatureRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    /// Record `id` as an `r × dim` tensor.
    pub fn tensor(&self, id: &str) -> Result<Tensor> {
        self.get(id)
            .map(|r| r.to_tensor(self.dim))
            .ok_or_else(|| FeatureError::Missing(id.to_string()))
    }

    pub fn push(&mut self, id: impl Into<String>, values: Vec<f32>) -> Result<()> {
        let id = id.into();
        if self.dim == 0 || !values.len().is_multiple_of(self.dim) {
            return Err(FeatureError::BadRecord {
                id,
                dim: self.dim,
                found: values.len(),
            });
        }
        if self.index.contains_key(&id) {
            return Err(FeatureError::Duplicate(id));
        }
        let rows = values.len() / self.dim;
        self.index.insert(id.clone(), self.records.len());
        self.records.push(FeatureRecord { id, rows, values });
        Ok(())
    }

    pub fn push_tensor(&mut self, id: impl Into<String>, t: &Tensor) -> Result<()> {
        if t.ndim() != 2 || t.cols() != self.dim {
            return Err(FeatureError::Dimension {
                expected: self.dim,
                found: t.shape().last().copied().unwrap_or(0),
            });
        }
        self.push(id, t.data().iter().map(|&v| v as f32).collect())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&MAGIC)?;
        for n in [VERSION, self.dim as u32, self.records.len() as u32] {
            w.write_all(&n.to_le_bytes())?;
        }
        for r in &self.records {
            w.write_all(&(r.id.len() as u32).to_le_bytes())?;
            w.write_all(r.id.as_bytes())?;
            w.write_all(&(r.rows as u32).to_le_bytes())?;
            for v in &r.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if magic != MAGIC {
            return Err(FeatureError::BadMagic(magic));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(FeatureError::UnsupportedVersion(version));
        }
        let dim = read_u32(&mut r)? as usize;
        let count = read_u32(&mut r)? as usize;
        let mut file = FeatureFile::new(dim);
        let mut buf = Vec::new();
        for _ in 0..count {
            let id_len = read_u32(&mut r)? as usize;
            let mut id = vec![0u8; id_len];
            read_exact(&mut r, &mut id)?;
            let id = String::from_utf8(id).map_err(|_| FeatureError::BadId)?;
            let rows = read_u32(&mut r)? as usize;
            buf.resize(rows * dim * 4, 0);
            read_exact(&mut r, &mut buf)?;
            let values = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if dim == 0 {
                return Err(FeatureError::BadRecord { id, dim, found: 0 });
            }
            file.push(id, values)?;
        }
        Ok(file)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FeatureError::Truncated,
        _ => FeatureError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Per-utterance word features `W_i` (`(ℓ_i + 1) × d`, summary row first)
/// for every utterance of `c`.
pub fn load_text_features(
    file: &FeatureFile,
    c: &Conversation,
    d_text: usize,
) -> Result<Vec<Tensor>> {
    if file.dim() != d_text {
        return Err(FeatureError::Dimension {
            expected: d_text,
            found: file.dim(),
        });
    }
    c.utterances
        .iter()
        .map(|u| {
            let id = c.utterance_key(u.index);
            let t = file.tensor(&id)?;
            if t.rows() != u.len() + 1 {
                return Err(FeatureError::Rows {
                    id,
                    expected: u.len() + 1,
                    found: t.rows(),
                });
            }
            Ok(t)
        })
        .collect()
}

/// Per-utterance frame sequences of one non-text modality for every
/// utterance of `c`. Each record must hold at least one row.
pub fn load_sequence_features(file: &FeatureFile, c: &Conversation) -> Result<Vec<Tensor>> {
    c.utterances
        .iter()
        .map(|u| {
            let id = c.utterance_key(u.index);
            let t = file.tensor(&id)?;
            if t.rows() == 0 {
                return Err(FeatureError::Rows {
                    id,
                    expected: 1,
                    found: 0,
                });
            }
            Ok(t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let mut f = FeatureFile::new(2);
        f.push("1_1", vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        f.push("1_2", vec![-0.5, 0.25]).unwrap();
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..4], &[0x55, 0x46, 0x54, 0x31]);
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let back = FeatureFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.get("1_1").unwrap().rows, 2);
        assert_eq!(back.tensor("1_2").unwrap().data(), &[-0.5, 0.25]);
    }

    #[test]
    fn corrupt_inputs() {
        let mut f = FeatureFile::new(3);
        f.push("a", vec![0.0; 6]).unwrap();
        let bytes = f.to_bytes();
        assert!(matches!(
            FeatureFile::from_bytes(&bytes[..bytes.len() - 1]),
            Err(FeatureError::Truncated)
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            FeatureFile::from_bytes(&bad),
            Err(FeatureError::BadMagic(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            FeatureFile::from_bytes(&bad),
            Err(FeatureError::UnsupportedVersion(2))
        ));
        assert!(matches!(
            f.push("a", vec![0.0; 3]),
            Err(FeatureError::Duplicate(_))
        ));
        assert!(f.push("b", vec![0.0; 4]).is_err());
    }

    #[test]
    fn missing_record_is_named() {
        let f = FeatureFile::new(4);
        let err = f.tensor("7_3").unwrap_err();
        assert!(err.to_string().contains("7_3"));
    }

    #[test]
    fn checksum_of_known_bytes() {
        let r = FeatureRecord {
            id: "x".into(),
            rows: 0,
            values: vec![],
        };
        assert_eq!(
            r.checksum(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
