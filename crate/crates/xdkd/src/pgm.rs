//! 8-bit binary PGM (`P5`) for looking at saliency maps.

use std::fs;
use std::io;
use std::path::Path;

use xdkd_core::Tensor;

/// Scales by the map maximum to `0..=255`; an all-zero map stays black.
pub fn encode(map: &Tensor) -> io::Result<Vec<u8>> {
    let (c, h, w) = map.chw().map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    if c != 1 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "PGM export takes a single-channel map"));
    }
    let max = map.data().iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if max > 0.0 {
            (v.max(0.0) / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write(path: &Path, map: &Tensor) -> io::Result<()> {
    fs::write(path, encode(map)?)
}
