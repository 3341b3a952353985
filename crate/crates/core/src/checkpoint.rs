//! Checkpoint container shared by the Q-network and the segmenter.
//!
//! Layout: magic `PSCK`, u32 schema version, u32 header length, a
//! plain-text header, then every tensor's values as little-endian f32 in
//! declared order. Header lines are either `field <key>=<value>` or
//! `tensor <name> <d0>x<d1>x...`; tensor lines appear in payload order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor_nn::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PSCK";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected {CHECKPOINT_MAGIC:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported schema version {0}")]
    UnsupportedVersion(u32),
    #[error("header is not valid utf-8")]
    HeaderNotUtf8,
    #[error("cannot parse header line: {0:?}")]
    HeaderParse(String),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: u64, got: u64 },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: u64 },
    #[error("checkpoint has no tensor named {0:?}")]
    MissingTensor(String),
    #[error("checkpoint has no header field {0:?}")]
    MissingField(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid name or value: {0}")]
    InvalidEntry(String),
}

/// In-memory checkpoint: ordered header fields plus ordered named tensors.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    fields: Vec<(String, String)>,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_field(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        if let Some(slot) = self.fields.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value;
        } else {
            self.fields.push((key.to_string(), value));
        }
    }

    pub fn field(&self, key: &str) -> Result<&str, CheckpointError> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CheckpointError::MissingField(key.to_string()))
    }

    pub fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        self.field(key)?
            .parse()
            .map_err(|_| CheckpointError::HeaderParse(format!("field {key}")))
    }

    pub fn fields(&self) -> &[(String, String)] {
        &self.fields
    }

    pub fn push_tensor(&mut self, name: &str, t: Tensor<f32>) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn tensor_with_shape(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f32>, CheckpointError> {
        let t = self.tensor(name)?;
        if t.shape() != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                got: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    pub fn tensors(&self) -> &[(String, Tensor<f32>)] {
        &self.tensors
    }

    fn header_text(&self) -> Result<String, CheckpointError> {
        let mut header = String::new();
        for (k, v) in &self.fields {
            if k.contains([' ', '\n', '=']) || v.contains('\n') {
                return Err(CheckpointError::InvalidEntry(format!("field {k}={v}")));
            }
            header.push_str(&format!("field {k}={v}\n"));
        }
        for (name, t) in &self.tensors {
            if name.contains([' ', '\n']) {
                return Err(CheckpointError::InvalidEntry(format!("tensor {name}")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {name} {}\n", dims.join("x")));
        }
        Ok(header)
    }

    pub fn write_to<P: AsRef<Path>>(&self, path: P) -> Result<(), CheckpointError> {
        let header = self.header_text()?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&CHECKPOINT_MAGIC)?;
        out.write_all(&SCHEMA_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(header.as_bytes())?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<P: AsRef<Path>>(path: P) -> Result<Self, CheckpointError> {
        let mut inp = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        inp.read_exact(&mut magic).map_err(map_eof)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let mut word = [0u8; 4];
        inp.read_exact(&mut word).map_err(map_eof)?;
        let version = u32::from_le_bytes(word);
        if version != SCHEMA_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        inp.read_exact(&mut word).map_err(map_eof)?;
        let header_len = u32::from_le_bytes(word) as usize;
        let mut header_bytes = vec![0u8; header_len];
        inp.read_exact(&mut header_bytes).map_err(map_eof)?;
        let header = String::from_utf8(header_bytes).map_err(|_| CheckpointError::HeaderNotUtf8)?;

        let mut fields = Vec::new();
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        for line in header.lines() {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("field ") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| CheckpointError::HeaderParse(line.to_string()))?;
                fields.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| CheckpointError::HeaderParse(line.to_string()))?;
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| d.parse().map_err(|_| CheckpointError::HeaderParse(line.to_string())))
                    .collect::<Result<_, _>>()?;
                specs.push((name.to_string(), shape));
            } else {
                return Err(CheckpointError::HeaderParse(line.to_string()));
            }
        }

        let expected: u64 = specs.iter().map(|(_, s)| 4 * s.iter().product::<usize>() as u64).sum();
        let mut payload = Vec::new();
        inp.read_to_end(&mut payload)?;
        let got = payload.len() as u64;
        if got < expected {
            return Err(CheckpointError::Truncated { expected, got });
        }
        if got > expected {
            return Err(CheckpointError::TrailingBytes { extra: got - expected });
        }

        let mut tensors = Vec::with_capacity(specs.len());
        let mut cursor = 0usize;
        for (name, shape) in specs {
            let n = shape.iter().product::<usize>();
            let data: Vec<f32> = payload[cursor..cursor + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            cursor += 4 * n;
            tensors.push((name, Tensor::from_vec(&shape, data).expect("length matches shape")));
        }
        Ok(Self { fields, tensors })
    }
}

fn map_eof(e: std::io::Error) -> CheckpointError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CheckpointError::Truncated { expected: 12, got: 0 }
    } else {
        CheckpointError::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_field("view_axis", "axial");
        ck.set_field("config_hash", "deadbeef");
        ck.push_tensor("layer0.weight", Tensor::from_vec(&[2, 3], vec![1.5, -2.0, 0.25, 4.0, 5.0, -6.5]).unwrap());
        ck.push_tensor("layer0.bias", Tensor::from_vec(&[2], vec![0.125, -0.5]).unwrap());
        ck
    }

    #[test]
    fn roundtrip_preserves_fields_and_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.psck");
        let ck = sample();
        ck.write_to(&p).unwrap();
        let back = Checkpoint::read_from(&p).unwrap();
        assert_eq!(back.field("view_axis").unwrap(), "axial");
        assert_eq!(back.tensor("layer0.weight").unwrap(), ck.tensor("layer0.weight").unwrap());
        assert_eq!(back.tensors().len(), 2);
    }

    #[test]
    fn second_write_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.psck");
        let p2 = dir.path().join("b.psck");
        sample().write_to(&p1).unwrap();
        Checkpoint::read_from(&p1).unwrap().write_to(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_and_version_are_typed_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.psck");
        sample().write_to(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[2] = b'!';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(Checkpoint::read_from(&p).unwrap_err(), CheckpointError::BadMagic(_)));

        sample().write_to(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 99;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::read_from(&p).unwrap_err(),
            CheckpointError::UnsupportedVersion(_)
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.psck");
        sample().write_to(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::read_from(&p).unwrap_err(), CheckpointError::Truncated { .. }));
    }

    #[test]
    fn missing_tensor_and_shape_mismatch() {
        let ck = sample();
        assert!(matches!(ck.tensor("nope"), Err(CheckpointError::MissingTensor(_))));
        assert!(matches!(
            ck.tensor_with_shape("layer0.bias", &[3]),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }
}
