//! TOLOGRID v1: `TOLG` magic, u32 version, u32 height, u32 width, then
//! height*width little-endian f32 values, row-major.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use tolo_core::Grid2D;

use super::FormatError;

const MAGIC: &[u8; 4] = b"TOLG";
const VERSION: u32 = 1;

pub fn grid_bytes(grid: &Grid2D) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(16 + 4 * grid.data().len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    for &v in grid.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    bytes
}

pub fn write_grid(path: &Path, grid: &Grid2D) -> Result<(), FormatError> {
    crate::manifest::atomic_write(path, &grid_bytes(grid))?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<Grid2D, FormatError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FormatError::malformed(path, "bad magic"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(FormatError::malformed(path, format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let height = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let width = u32::from_le_bytes(word) as usize;
    if height == 0 || width == 0 || height.saturating_mul(width) > (1 << 28) {
        return Err(FormatError::malformed(path, format!("bad size {height}x{width}")));
    }

    let mut data = Vec::with_capacity(height * width);
    for _ in 0..height * width {
        r.read_exact(&mut word)?;
        data.push(f32::from_le_bytes(word) as f64);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(FormatError::malformed(path, "trailing bytes"));
    }
    Grid2D::from_vec(height, width, data)
        .map_err(|e| FormatError::malformed(path, e.to_string()))
}
