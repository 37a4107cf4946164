//! `DAEW` binary format for batches of warp fields.
//!
//! Layout (all little-endian): the magic bytes `DAEW`, then `u32` version,
//! `u32` N, `u32` H, `u32` W, followed by `N*H*W*2` `f32` values in
//! `(n, i, j, xy)` order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::WarpField;
use crate::error::{DaeError, Result};

pub const MAGIC: &[u8; 4] = b"DAEW";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

pub fn write_fields<W: Write>(mut out: W, field: &WarpField) -> Result<()> {
    let (n, h, w) = field.dims();
    let values = field
        .grid
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    out.write_all(MAGIC)?;
    for v in [VERSION, n as u32, h as u32, w as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_fields<R: Read>(mut input: R, dev: &Device) -> Result<WarpField> {
    let mut header = [0u8; HEADER_LEN];
    input
        .read_exact(&mut header)
        .map_err(|e| DaeError::Format(format!("truncated header: {e}")))?;
    if &header[..4] != MAGIC {
        return Err(DaeError::Format("bad magic, expected DAEW".into()));
    }
    let word = |k: usize| u32::from_le_bytes(header[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    let version = word(0);
    if version != VERSION {
        return Err(DaeError::Format(format!(
            "unsupported DAEW version {version} (expected {VERSION})"
        )));
    }
    let (n, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let count = n * h * w * 2;
    let mut bytes = vec![0u8; count * 4];
    input
        .read_exact(&mut bytes)
        .map_err(|e| DaeError::Format(format!("truncated payload: {e}")))?;
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(DaeError::Format("trailing bytes after payload".into()));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    WarpField::new(Tensor::from_vec(values, (n, h, w, 2), dev)?)
}

pub fn save_fields(path: impl AsRef<Path>, field: &WarpField) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_fields(&mut out, field)?;
    out.flush()?;
    Ok(())
}

pub fn load_fields(path: impl AsRef<Path>, dev: &Device) -> Result<WarpField> {
    read_fields(BufReader::new(File::open(path)?), dev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() -> Result<()> {
        let f = WarpField::identity(3, 4, 5, DType::F32, &Device::Cpu)?;
        let mut buf = Vec::new();
        write_fields(&mut buf, &f)?;
        assert_eq!(&buf[..4], b"DAEW");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(&buf[12..16], &4u32.to_le_bytes());
        assert_eq!(&buf[16..20], &5u32.to_le_bytes());
        assert_eq!(buf.len(), HEADER_LEN + 3 * 4 * 5 * 2 * 4);
        // first payload value is the top-left x coordinate, -1
        assert_eq!(&buf[20..24], &(-1.0f32).to_le_bytes());
        Ok(())
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut buf = b"DAEX".to_vec();
        buf.extend_from_slice(&[0u8; 16]);
        assert!(read_fields(&buf[..], &Device::Cpu).is_err());
        let mut buf = b"DAEW".to_vec();
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&[0u8; 12]);
        assert!(matches!(
            read_fields(&buf[..], &Device::Cpu),
            Err(DaeError::Format(_))
        ));
    }

    #[test]
    fn rejects_truncated_payload() -> Result<()> {
        let f = WarpField::identity(1, 2, 2, DType::F32, &Device::Cpu)?;
        let mut buf = Vec::new();
        write_fields(&mut buf, &f)?;
        buf.pop();
        assert!(read_fields(&buf[..], &Device::Cpu).is_err());
        Ok(())
    }
}
