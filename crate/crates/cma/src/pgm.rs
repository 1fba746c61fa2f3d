//! Binary PGM (P5) export for attention-map renders.

use crate::{CmaError, Result};
use std::io::Write;
use std::path::Path;

/// 8-bit grayscale, row-major. Values are normalized to the map's own
/// maximum for visibility; emit the raw weights alongside (CSV) so renders
/// stay auditable.
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    if data.len() != width * height {
        return Err(CmaError::dim(
            "pgm payload",
            &[data.len()],
            &[width * height],
        ));
    }
    if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CmaError::NonFinite(
            "pgm values must be finite and non-negative".into(),
        ));
    }
    let max = data.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut out = Vec::with_capacity(32 + data.len());
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend(data.iter().map(|&v| (v * scale).round() as u8));
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// One row of comma-separated values per grid row.
pub fn write_csv_grid(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    if data.len() != width * height {
        return Err(CmaError::dim(
            "csv payload",
            &[data.len()],
            &[width * height],
        ));
    }
    let mut text = String::new();
    for y in 0..height {
        let row: Vec<String> = (0..width)
            .map(|x| format!("{:.17e}", data[y * width + x]))
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
