//! Raster export for visual inspection: grayscale PGM slices of value
//! fields and RGB PPM overlays comparing predicted masks against ground
//! truth.

use crate::error::Result;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Maps one value into [0, 255] linearly over `range`. A degenerate range
/// centers everything at 128; values outside the range clamp; non-finite
/// values render as 0.
fn gray(x: f32, range: (f32, f32)) -> u8 {
    if !x.is_finite() {
        return 0;
    }
    let span = range.1 - range.0;
    if !(span > 0.0) {
        return 128;
    }
    let t = ((x - range.0) / span).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// Writes a 2-D field as a binary PGM (P5), mapping `range` linearly to
/// [0, 255].
pub fn write_pgm(path: &Path, field: &[f32], w: usize, h: usize, range: (f32, f32)) -> Result<()> {
    debug_assert_eq!(field.len(), w * h);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = field.iter().map(|x| gray(*x, range)).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Writes a prediction/ground-truth comparison as a binary PPM (P6), one
/// channel per role: red marks false positives, green the prediction,
/// blue the ground truth. Invalid pixels stay black. True positives thus
/// show cyan, false positives yellow, misses blue.
pub fn write_overlay(
    path: &Path,
    pred: &[u8],
    gt: &[u8],
    valid: &[u8],
    w: usize,
    h: usize,
) -> Result<()> {
    debug_assert_eq!(pred.len(), w * h);
    debug_assert_eq!(gt.len(), w * h);
    debug_assert_eq!(valid.len(), w * h);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let mut bytes = Vec::with_capacity(3 * w * h);
    for i in 0..w * h {
        let (p, g) = if valid[i] != 0 {
            (pred[i] != 0, gt[i] != 0)
        } else {
            (false, false)
        };
        bytes.push(if p && !g { 255 } else { 0 });
        bytes.push(if p { 255 } else { 0 });
        bytes.push(if g { 255 } else { 0 });
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split_header(buf: &[u8]) -> (&str, &[u8]) {
        // Header is three newline-terminated lines, then raw pixel bytes.
        let mut seen = 0;
        for (i, b) in buf.iter().enumerate() {
            if *b == b'\n' {
                seen += 1;
                if seen == 3 {
                    return (std::str::from_utf8(&buf[..=i]).unwrap(), &buf[i + 1..]);
                }
            }
        }
        panic!("missing header");
    }

    #[test]
    fn linear_map_spreads_a_ramp_over_the_byte_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.pgm");
        write_pgm(&path, &[0.0, 1.0, 2.0, 3.0], 2, 2, (0.0, 3.0)).unwrap();
        let buf = std::fs::read(&path).unwrap();
        let (header, pixels) = split_header(&buf);
        assert_eq!(header, "P5\n2 2\n255\n");
        assert_eq!(pixels, &[0, 85, 170, 255]);
    }

    #[test]
    fn constant_field_renders_mid_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.pgm");
        write_pgm(&path, &[4.2; 6], 3, 2, (4.2, 4.2)).unwrap();
        let buf = std::fs::read(&path).unwrap();
        let (_, pixels) = split_header(&buf);
        assert!(pixels.iter().all(|b| *b == 128));
    }

    #[test]
    fn binary_mask_uses_only_the_extremes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        write_pgm(&path, &[0.0, 1.0, 1.0, 0.0], 2, 2, (0.0, 1.0)).unwrap();
        let buf = std::fs::read(&path).unwrap();
        let (_, pixels) = split_header(&buf);
        assert_eq!(pixels, &[0, 255, 255, 0]);
    }

    #[test]
    fn out_of_range_and_non_finite_values_are_safe() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edge.pgm");
        write_pgm(&path, &[-1.0, 9.0, f32::NAN, 0.5], 2, 2, (0.0, 1.0)).unwrap();
        let buf = std::fs::read(&path).unwrap();
        let (_, pixels) = split_header(&buf);
        assert_eq!(pixels, &[0, 255, 0, 128]);
    }

    #[test]
    fn overlay_separates_roles_by_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cmp.ppm");
        // Pixel roles: hit, false positive, miss, background, invalid.
        let pred = [1u8, 1, 0, 0, 1];
        let gt = [1u8, 0, 1, 0, 1];
        let valid = [1u8, 1, 1, 1, 0];
        write_overlay(&path, &pred, &gt, &valid, 5, 1).unwrap();
        let buf = std::fs::read(&path).unwrap();
        let (header, pixels) = split_header(&buf);
        assert_eq!(header, "P6\n5 1\n255\n");
        assert_eq!(
            pixels,
            &[
                0, 255, 255, // true positive: green + blue
                255, 255, 0, // false positive: red + green
                0, 0, 255, // miss: blue only
                0, 0, 0, // background
                0, 0, 0, // invalid pixel stays black
            ]
        );
    }
}
