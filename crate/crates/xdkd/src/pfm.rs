//! Grayscale PFM (`Pf`) export of depth maps. Values are stored as
//! little-endian `f32` (scale `-1.0`), bottom row first, so a round trip is
//! exact only up to `f32` rounding.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use xdkd_core::Tensor;

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

pub fn encode(map: &Tensor) -> io::Result<Vec<u8>> {
    let (c, h, w) = map.chw().map_err(|e| invalid(&e.to_string()))?;
    if c != 1 {
        return Err(invalid("PFM export takes a single-channel map"));
    }
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in (0..h).rev() {
        for &v in &map.data()[row * w..(row + 1) * w] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads one whitespace-delimited header token.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> io::Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| invalid("bad PFM header"))
}

/// Decodes a `Pf` file into an `H x W` tensor.
pub fn decode(bytes: &[u8]) -> io::Result<Tensor> {
    let mut pos = 0;
    if token(bytes, &mut pos)? != "Pf" {
        return Err(invalid("only grayscale `Pf` files are supported"));
    }
    let w: usize = token(bytes, &mut pos)?.parse().map_err(|_| invalid("bad width"))?;
    let h: usize = token(bytes, &mut pos)?.parse().map_err(|_| invalid("bad height"))?;
    let scale: f64 = token(bytes, &mut pos)?.parse().map_err(|_| invalid("bad scale"))?;
    pos += 1;
    let body = bytes.get(pos..).ok_or_else(|| invalid("missing raster"))?;
    if body.len() != 4 * w * h {
        return Err(invalid("raster size does not match header"));
    }
    let value = |c: &[u8]| {
        let b: [u8; 4] = c.try_into().unwrap();
        if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    };
    let mut data = vec![0.0; w * h];
    for (r, chunk) in body.chunks_exact(4 * w).enumerate() {
        let row = h - 1 - r;
        for (x, c) in chunk.chunks_exact(4).enumerate() {
            data[row * w + x] = value(c) as f64;
        }
    }
    Tensor::new(&[h, w], data).map_err(|e| invalid(&e.to_string()))
}

pub fn write(path: &Path, map: &Tensor) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(map)?)
}

pub fn read(path: &Path) -> io::Result<Tensor> {
    decode(&fs::read(path)?)
}
