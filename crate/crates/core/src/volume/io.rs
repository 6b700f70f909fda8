//! VOL3 / LAB3 binary volume files.
//!
//! Little-endian layout: 4-byte magic, `u32` version (1), `u32` nx, ny, nz,
//! channels, then the payload x-fastest and channel-slowest. VOL3 stores
//! `f32` values, LAB3 stores `u16` labels.

use std::fs;
use std::path::Path;

use super::{voxel_count, Dims, LabelVolume, Volume};
use crate::error::{Error, Result};

const VOL3_MAGIC: &[u8; 4] = b"VOL3";
const LAB3_MAGIC: &[u8; 4] = b"LAB3";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

fn header(magic: &[u8; 4], dims: Dims, channels: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(magic);
    for v in [VERSION, dims[0] as u32, dims[1] as u32, dims[2] as u32, channels as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Header {
    dims: Dims,
    channels: usize,
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(Header, &'a [u8])> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let dims = [word(1) as usize, word(2) as usize, word(3) as usize];
    let channels = word(4) as usize;
    Ok((Header { dims, channels }, &bytes[HEADER_LEN..]))
}

fn check_payload(payload: &[u8], elem: usize, declared: usize) -> Result<usize> {
    if !payload.len().is_multiple_of(elem) {
        return Err(Error::Truncated(format!(
            "payload of {} bytes is not a whole number of {elem}-byte values",
            payload.len()
        )));
    }
    let actual = payload.len() / elem;
    if actual != declared {
        return Err(Error::SizeMismatch { declared, actual });
    }
    Ok(actual)
}

pub fn encode_vol3(vol: &Volume) -> Vec<u8> {
    let mut out = header(VOL3_MAGIC, vol.dims(), vol.channels());
    out.reserve(vol.data().len() * 4);
    for &v in vol.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_vol3(bytes: &[u8]) -> Result<Volume> {
    let (h, payload) = parse_header(bytes, VOL3_MAGIC)?;
    check_payload(payload, 4, voxel_count(h.dims) * h.channels)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Volume::new(h.dims, h.channels, data)
}

pub fn encode_lab3(labels: &LabelVolume) -> Vec<u8> {
    let mut out = header(LAB3_MAGIC, labels.dims(), 1);
    for &l in labels.data() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_lab3(bytes: &[u8]) -> Result<LabelVolume> {
    let (h, payload) = parse_header(bytes, LAB3_MAGIC)?;
    if h.channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "label volumes have one channel, header declares {}",
            h.channels
        )));
    }
    check_payload(payload, 2, voxel_count(h.dims))?;
    let data = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelVolume::new(h.dims, data)
}

/// Writes `vol` as VOL3. Values are narrowed to `f32`.
pub fn write_vol3(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_vol3(vol))?;
    Ok(())
}

pub fn read_vol3(path: impl AsRef<Path>) -> Result<Volume> {
    decode_vol3(&fs::read(path)?)
}

pub fn write_lab3(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_lab3(labels))?;
    Ok(())
}

pub fn read_lab3(path: impl AsRef<Path>) -> Result<LabelVolume> {
    decode_lab3(&fs::read(path)?)
}
