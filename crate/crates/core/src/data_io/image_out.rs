//! Binary PNM output: `P6` for RGB, `P5` for grayscale.

use std::path::Path;

use super::write_atomic;
use crate::error::{JetError, Result};

pub fn write_pnm(
    path: &Path,
    height: usize,
    width: usize,
    channels: usize,
    pixels: &[u8],
) -> Result<()> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(JetError::config(format!(
                "PNM output supports 1 or 3 channels, got {c}"
            )))
        }
    };
    if pixels.len() != height * width * channels {
        return Err(JetError::shape(
            "write_pnm",
            format!("{} bytes for {height}x{width}x{channels}", pixels.len()),
        ));
    }
    let mut bytes = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    write_atomic(path, &bytes)
}
