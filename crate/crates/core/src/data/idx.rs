//! Reader for the IDX files used by the MNIST distribution.

use std::path::Path;

use crate::error::{DaeError, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DaeError::Format("truncated IDX header".into()))
}

/// Decodes an image file into `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    if be_u32(bytes, 0)? != IMAGE_MAGIC {
        return Err(DaeError::Format("not an IDX image file".into()));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(DaeError::Format(format!(
            "IDX image body has {} bytes, expected {}",
            body.len(),
            n * rows * cols
        )));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    if be_u32(bytes, 0)? != LABEL_MAGIC {
        return Err(DaeError::Format("not an IDX label file".into()));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(DaeError::Format(format!(
            "IDX label body has {} bytes, expected {n}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

pub fn read_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    parse_images(&std::fs::read(path)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    parse_labels(&std::fs::read(path)?)
}
