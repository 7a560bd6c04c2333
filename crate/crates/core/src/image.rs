//! 8-bit grayscale PGM output and raw float sidecars.

use std::path::Path;

use crate::error::{Error, Result};
use crate::util;

/// Binary PGM (`P5`, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height || pixels.is_empty() {
        return Err(Error::shape("pgm pixels", format!("{width}x{height}"), &[pixels.len()]));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    util::write_atomic(path, &encode_pgm(width, height, pixels)?)
}

/// Maps `[lo, hi]` linearly onto `0..=255`; a constant image maps to 0.
pub fn render_range(values: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    let span = hi - lo;
    values
        .iter()
        .map(|v| {
            if span > 0.0 {
                (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Min-max rendering, for input images and mean images.
pub fn render_minmax(values: &[f32]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    render_range(values, lo, hi)
}

pub fn max_abs(values: &[f32]) -> f32 {
    values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Diverging encoding for signed maps: `v / max|v|` in `[-1, 1]` becomes
/// `128 + 127 v`, so zero is mid-gray. An all-zero map renders flat 128.
pub fn render_signed(values: &[f32]) -> Vec<u8> {
    let m = max_abs(values);
    values
        .iter()
        .map(|v| {
            let n = if m > 0.0 { v / m } else { 0.0 };
            (128.0 + 127.0 * n).round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Raw little-endian `f32` values, no header.
pub fn write_f32_sidecar(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    util::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header() {
        let b = encode_pgm(2, 1, &[0, 255]).unwrap();
        assert_eq!(&b[..11], b"P5\n2 1\n255\n");
        assert_eq!(&b[11..], &[0, 255]);
        assert!(encode_pgm(2, 2, &[0]).is_err());
    }

    #[test]
    fn signed_rendering_centers_zero() {
        assert_eq!(render_signed(&[-2.0, 0.0, 1.0, 2.0]), vec![1, 128, 192, 255]);
        assert_eq!(render_signed(&[0.0, 0.0]), vec![128, 128]);
    }

    #[test]
    fn minmax_rendering() {
        assert_eq!(render_minmax(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
        assert_eq!(render_minmax(&[0.3, 0.3]), vec![0, 0]);
    }
}
