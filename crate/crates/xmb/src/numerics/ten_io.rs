//! `.ten` tensor files: magic "TEN1", u32 LE rank, rank u32 LE dims,
//! then raw little-endian IEEE-754 f32 data, row-major. Round-trips are
//! bit-exact.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TEN1";

pub fn write_ten(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(8 + t.rank() * 4 + t.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_ten(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(name.clone(), e))?;
    parse_ten(&bytes).map_err(|detail| Error::Format { path: name, detail })
}

fn parse_ten(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err("missing TEN1 magic".into());
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + rank * 4;
    if bytes.len() < header {
        return Err("truncated dimension header".into());
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + i * 4;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != header + numel * 4 {
        return Err(format!(
            "payload is {} bytes, expected {} for shape {shape:?}",
            bytes.len() - header,
            numel * 4
        ));
    }
    let data: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}
