//! ASCII PGM (P2) export with a linear 0-255 rescale, for eyeballing maps.

use std::fmt::Write as _;
use std::path::Path;

use tolo_core::Grid2D;

use super::FormatError;

pub fn write_grid(path: &Path, grid: &Grid2D) -> Result<(), FormatError> {
    let min = grid.min_value();
    let max = grid.max_value();
    let span = max - min;
    let scale = if span > 0.0 { 255.0 / span } else { 0.0 };

    let mut out = String::new();
    let _ = writeln!(out, "P2");
    let _ = writeln!(out, "{} {}", grid.width(), grid.height());
    let _ = writeln!(out, "255");
    for r in 0..grid.height() {
        let row: Vec<String> = (0..grid.width())
            .map(|c| {
                let v = ((grid.get(r, c) - min) * scale).round() as i64;
                v.clamp(0, 255).to_string()
            })
            .collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    crate::manifest::atomic_write(path, out.as_bytes())?;
    Ok(())
}
