//! Binary 8-bit portable graymap output for experiment artifacts.
//!
//! Pixel values are linearly mapped from [-1, 1] to [0, 255] with clamping,
//! so any viewer that reads P5 shows the reconstruction directly.

use crate::error::{Error, Result};
use crate::image::Image;
use std::path::Path;

/// Encode as a P5 graymap: text header, then one byte per pixel in row-major
/// order. Values are clamped to [-1, 1] before quantization.
pub fn encode_pgm(image: &Image) -> Result<Vec<u8>> {
    if let Some(bad) = image.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "cannot render a graymap from non-finite pixel {bad}"
        )));
    }
    let header = format!("P5\n{} {}\n255\n", image.width, image.height);
    let mut bytes = Vec::with_capacity(header.len() + image.data.len());
    bytes.extend_from_slice(header.as_bytes());
    for &v in &image.data {
        let unit = (v.clamp(-1.0, 1.0) + 1.0) / 2.0;
        bytes.push((unit * 255.0).round() as u8);
    }
    Ok(bytes)
}

pub fn render_pgm(image: &Image, path: &Path) -> Result<()> {
    let bytes = encode_pgm(image)?;
    std::fs::write(path, bytes)
        .map_err(|e| Error::invalid(format!("writing {}: {e}", path.display())))
}
