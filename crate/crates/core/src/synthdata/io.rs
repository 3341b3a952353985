//! Volume file format.
//!
//! Little-endian layout: magic `PSV1`, one dtype byte (1 = signed 16-bit
//! intensity, 2 = unsigned 8-bit label), three u32 dims (W, H, D), then
//! W*H*D raw voxels in x-fastest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{LabelVolume, SynthDataError, Volume};

pub const VOLUME_MAGIC: [u8; 4] = *b"PSV1";
pub const DTYPE_INTENSITY: u8 = 1;
pub const DTYPE_LABEL: u8 = 2;

#[derive(Debug, Error)]
pub enum VolumeFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected {VOLUME_MAGIC:?}")]
    BadMagic([u8; 4]),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("dtype code {got} does not match expected {expected}")]
    DtypeMismatch { expected: u8, got: u8 },
    #[error("dims {w}x{h}x{d} overflow the addressable payload size")]
    DimOverflow { w: u32, h: u32, d: u32 },
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: u64, got: u64 },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: u64 },
    #[error("payload invalid: {0}")]
    Payload(#[from] SynthDataError),
}

fn checked_voxel_count(w: u32, h: u32, d: u32, elem: u64) -> Result<u64, VolumeFileError> {
    let n = (w as u64)
        .checked_mul(h as u64)
        .and_then(|v| v.checked_mul(d as u64))
        .and_then(|v| v.checked_mul(elem))
        .ok_or(VolumeFileError::DimOverflow { w, h, d })?;
    if n > usize::MAX as u64 {
        return Err(VolumeFileError::DimOverflow { w, h, d });
    }
    Ok(n / elem)
}

fn write_header<W: Write>(out: &mut W, dtype: u8, dims: (u32, u32, u32)) -> Result<(), VolumeFileError> {
    out.write_all(&VOLUME_MAGIC)?;
    out.write_all(&[dtype])?;
    out.write_all(&dims.0.to_le_bytes())?;
    out.write_all(&dims.1.to_le_bytes())?;
    out.write_all(&dims.2.to_le_bytes())?;
    Ok(())
}

fn read_header<R: Read>(inp: &mut R, expected_dtype: u8) -> Result<(u32, u32, u32), VolumeFileError> {
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic).map_err(map_eof)?;
    if magic != VOLUME_MAGIC {
        return Err(VolumeFileError::BadMagic(magic));
    }
    let mut dtype = [0u8; 1];
    inp.read_exact(&mut dtype).map_err(map_eof)?;
    if dtype[0] != DTYPE_INTENSITY && dtype[0] != DTYPE_LABEL {
        return Err(VolumeFileError::UnknownDtype(dtype[0]));
    }
    if dtype[0] != expected_dtype {
        return Err(VolumeFileError::DtypeMismatch { expected: expected_dtype, got: dtype[0] });
    }
    let mut dim_bytes = [0u8; 12];
    inp.read_exact(&mut dim_bytes).map_err(map_eof)?;
    Ok((
        u32::from_le_bytes(dim_bytes[0..4].try_into().unwrap()),
        u32::from_le_bytes(dim_bytes[4..8].try_into().unwrap()),
        u32::from_le_bytes(dim_bytes[8..12].try_into().unwrap()),
    ))
}

fn map_eof(e: std::io::Error) -> VolumeFileError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        VolumeFileError::Truncated { expected: 17, got: 0 }
    } else {
        VolumeFileError::Io(e)
    }
}

fn read_payload<R: Read>(inp: &mut R, expected: u64) -> Result<Vec<u8>, VolumeFileError> {
    let mut payload = Vec::new();
    inp.read_to_end(&mut payload)?;
    let got = payload.len() as u64;
    if got < expected {
        return Err(VolumeFileError::Truncated { expected, got });
    }
    if got > expected {
        return Err(VolumeFileError::TrailingBytes { extra: got - expected });
    }
    Ok(payload)
}

pub fn write_volume<P: AsRef<Path>>(path: P, vol: &Volume) -> Result<(), VolumeFileError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_header(&mut out, DTYPE_INTENSITY, vol.dims())?;
    for v in vol.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_volume<P: AsRef<Path>>(path: P) -> Result<Volume, VolumeFileError> {
    let mut inp = BufReader::new(File::open(path)?);
    let (w, h, d) = read_header(&mut inp, DTYPE_INTENSITY)?;
    let n = checked_voxel_count(w, h, d, 2)?;
    let payload = read_payload(&mut inp, n * 2)?;
    let data: Vec<i16> =
        payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
    Ok(Volume::from_raw(w, h, d, data)?)
}

pub fn write_label<P: AsRef<Path>>(path: P, label: &LabelVolume) -> Result<(), VolumeFileError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_header(&mut out, DTYPE_LABEL, label.dims())?;
    out.write_all(label.data())?;
    out.flush()?;
    Ok(())
}

pub fn read_label<P: AsRef<Path>>(path: P) -> Result<LabelVolume, VolumeFileError> {
    let mut inp = BufReader::new(File::open(path)?);
    let (w, h, d) = read_header(&mut inp, DTYPE_LABEL)?;
    let n = checked_voxel_count(w, h, d, 1)?;
    let payload = read_payload(&mut inp, n)?;
    Ok(LabelVolume::from_raw(w, h, d, payload)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_phantom, PhantomConfig};

    #[test]
    fn volume_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let (vol, label) = generate_phantom(&PhantomConfig::default()).unwrap();
        let vp = dir.path().join("v.psv");
        let lp = dir.path().join("l.psv");
        write_volume(&vp, &vol).unwrap();
        write_label(&lp, &label).unwrap();
        assert_eq!(read_volume(&vp).unwrap(), vol);
        assert_eq!(read_label(&lp).unwrap(), label);
    }

    #[test]
    fn second_write_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (vol, _) = generate_phantom(&PhantomConfig::default()).unwrap();
        let p1 = dir.path().join("a.psv");
        let p2 = dir.path().join("b.psv");
        write_volume(&p1, &vol).unwrap();
        write_volume(&p2, &read_volume(&p1).unwrap()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.psv");
        let (vol, _) = generate_phantom(&PhantomConfig::default()).unwrap();
        write_volume(&p, &vol).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_volume(&p).unwrap_err(), VolumeFileError::BadMagic(_)));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.psv");
        let (vol, _) = generate_phantom(&PhantomConfig::default()).unwrap();
        write_volume(&p, &vol).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_volume(&p).unwrap_err(), VolumeFileError::Truncated { .. }));
    }

    #[test]
    fn header_dims_inconsistent_with_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.psv");
        let (vol, _) = generate_phantom(&PhantomConfig::default()).unwrap();
        write_volume(&p, &vol).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        // Bump W in the header so the payload no longer matches.
        bytes[5..9].copy_from_slice(&65u32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_volume(&p).unwrap_err(), VolumeFileError::Truncated { .. }));
    }

    #[test]
    fn dtype_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.psv");
        let (_, label) = generate_phantom(&PhantomConfig::default()).unwrap();
        write_label(&p, &label).unwrap();
        assert!(matches!(read_volume(&p).unwrap_err(), VolumeFileError::DtypeMismatch { .. }));
    }
}
