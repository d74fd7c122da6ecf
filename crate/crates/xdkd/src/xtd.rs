//! XTD: exact little-endian tensor dumps.
//!
//! Layout: the 8 magic bytes `XTDUMP01`, a `u32` rank, `rank` `u64`
//! dimensions, then the row-major `f64` values.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use xdkd_core::Tensor;

pub const MAGIC: &[u8; 8] = b"XTDUMP01";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn decode(mut bytes: &[u8]) -> io::Result<Tensor> {
    let mut magic = [0u8; 8];
    bytes.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid("not an XTD file"));
    }
    let mut word = [0u8; 4];
    bytes.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank == 0 || rank > 8 {
        return Err(invalid(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut quad = [0u8; 8];
    for _ in 0..rank {
        bytes.read_exact(&mut quad)?;
        shape.push(usize::try_from(u64::from_le_bytes(quad)).map_err(|_| invalid("dimension overflow"))?);
    }
    let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| invalid("size overflow"))?;
    if bytes.len() != count * 8 {
        return Err(invalid(format!("expected {} value bytes, found {}", count * 8, bytes.len())));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&shape, data).map_err(|e| invalid(e.to_string()))
}

pub fn write(path: &Path, t: &Tensor) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode(t))?;
    f.flush()
}

pub fn read(path: &Path) -> io::Result<Tensor> {
    decode(&fs::read(path)?)
}
