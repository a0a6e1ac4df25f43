//! Binary PPM (P6) reader for the color metric.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use tolo_core::metrics::RgbImage;

use super::FormatError;

/// Read the next whitespace-delimited header token, skipping `#` comments.
fn next_token(r: &mut impl Read, path: &Path) -> Result<String, FormatError> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    loop {
        if r.read(&mut byte)? == 0 {
            if token.is_empty() {
                return Err(FormatError::malformed(path, "truncated header"));
            }
            return Ok(token);
        }
        let c = byte[0];
        if in_comment {
            if c == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match c {
            b'#' => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !token.is_empty() {
                    return Ok(token);
                }
            }
            _ => token.push(c as char),
        }
    }
}

pub fn read_image(path: &Path) -> Result<RgbImage, FormatError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let magic = next_token(&mut r, path)?;
    if magic != "P6" {
        return Err(FormatError::malformed(path, format!("expected P6, got {magic}")));
    }
    let parse = |tok: String| -> Result<usize, FormatError> {
        tok.parse()
            .map_err(|_| FormatError::malformed(path, format!("bad header field '{tok}'")))
    };
    let width = parse(next_token(&mut r, path)?)?;
    let height = parse(next_token(&mut r, path)?)?;
    let maxval = parse(next_token(&mut r, path)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(FormatError::malformed(path, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 || width.saturating_mul(height) > (1 << 26) {
        return Err(FormatError::malformed(path, format!("bad size {width}x{height}")));
    }

    let mut pixels = vec![0u8; 3 * width * height];
    r.read_exact(&mut pixels)?;
    if maxval != 255 {
        for p in pixels.iter_mut() {
            *p = ((*p as usize * 255) / maxval) as u8;
        }
    }
    RgbImage::new(width, height, pixels).map_err(|e| FormatError::malformed(path, e.to_string()))
}

/// Write a P6 image (used by tests and fixtures).
pub fn write_image(path: &Path, image: &RgbImage) -> Result<(), FormatError> {
    use std::io::Write;
    let mut file = File::create(path)?;
    write!(file, "P6\n{} {}\n255\n", image.width(), image.height())?;
    file.write_all(image.pixels())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_comment_header() {
        let img = RgbImage::new(2, 2, vec![255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);

        // Insert a comment into the header.
        let bytes = std::fs::read(&path).unwrap();
        let mut with_comment = b"P6\n# a comment\n2 2\n255\n".to_vec();
        with_comment.extend_from_slice(&bytes[bytes.len() - 12..]);
        std::fs::write(&path, with_comment).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn rejects_wrong_magic_and_short_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P3\n1 1\n255\n1 2 3\n").unwrap();
        assert!(read_image(&path).is_err());
        std::fs::write(&path, b"P6\n2 2\n255\nxx").unwrap();
        assert!(read_image(&path).is_err());
    }
}
