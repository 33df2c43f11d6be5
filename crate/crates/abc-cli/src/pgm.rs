//! Minimal binary PGM (P5) reading and writing.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Reads an 8-bit P5 file; pixels come back in [0, 1], row-major.
pub fn read(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pos = 0usize;

    let mut token = || -> Result<String> {
        // skip whitespace and # comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!("truncated PGM header");
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token()? != "P5" {
        bail!("not a binary PGM (P5) file");
    }
    let w: usize = token()?.parse().context("bad width")?;
    let h: usize = token()?.parse().context("bad height")?;
    let maxval: usize = token()?.parse().context("bad maxval")?;
    if maxval == 0 || maxval > 255 {
        bail!("unsupported maxval {maxval} (8-bit only)");
    }
    pos += 1; // the single whitespace byte after maxval
    if bytes.len() < pos + w * h {
        bail!("PGM data truncated: need {} bytes, have {}", w * h, bytes.len() - pos);
    }
    let pixels = bytes[pos..pos + w * h]
        .iter()
        .map(|&b| b as f32 / maxval as f32)
        .collect();
    Ok((pixels, w, h))
}

/// Writes one plane min-max normalized to 0..255. A constant plane renders
/// as uniform mid-gray.
pub fn write_normalized(path: &Path, plane: &[f32], w: usize, h: usize) -> Result<()> {
    assert_eq!(plane.len(), w * h);
    let lo = plane.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let bytes: Vec<u8> = if hi > lo {
        plane
            .iter()
            .map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128u8; plane.len()]
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&bytes);
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}
