//! Portable image formats used on disk: PPM (P6) color, PGM (P5) masks and
//! single-channel little-endian PFM float maps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let img = image::load(BufReader::new(file), ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))?;
    match img {
        image::DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        other => Err(Error::format(
            path,
            format!("expected 8-bit RGB pixmap, found {:?}", other.color()),
        )),
    }
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    img.save_with_format(path, ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let img = image::load(BufReader::new(file), ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(Error::format(
            path,
            format!("expected 8-bit graymap, found {:?}", other.color()),
        )),
    }
}

/// Writes a single-channel PFM (`Pf`, scale `-1.0`, rows bottom to top).
/// `values` is row-major, top row first.
pub fn write_pfm(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut body = Vec::with_capacity(4 * values.len() + 32);
    write!(body, "Pf\n{width} {height}\n-1.0\n").expect("write to vec");
    for row in values.chunks(width).rev() {
        for v in row {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&body).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a single-channel PFM written by [`write_pfm`] (either endianness).
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<File>| -> Result<String> {
        line.clear();
        reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        Ok(line.trim().to_string())
    };
    let magic = next_line(&mut reader)?;
    if magic != "Pf" {
        return Err(Error::format(path, format!("expected single-channel PFM, got {magic:?}")));
    }
    let dims = next_line(&mut reader)?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (width, height) = match (it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h))) => (w, h),
        _ => return Err(Error::format(path, format!("bad PFM dimensions {dims:?}"))),
    };
    let scale: f64 = next_line(&mut reader)?
        .parse()
        .map_err(|_| Error::format(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() != 4 * width * height {
        return Err(Error::format(
            path,
            format!("PFM payload has {} bytes, expected {}", raw.len(), 4 * width * height),
        ));
    }
    let mut values = vec![0f32; width * height];
    for (row_idx, row) in raw.chunks(4 * width).enumerate() {
        let y = height - 1 - row_idx;
        for (x, b) in row.chunks(4).enumerate() {
            let bytes = [b[0], b[1], b[2], b[3]];
            values[y * width + x] = if little {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
        }
    }
    Ok((width, height, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let values: Vec<f32> = (0..12).map(|i| i as f32 * 0.37 - 1.0).chain([f32::NAN]).take(12).collect();
        write_pfm(&path, 4, 3, &values).unwrap();
        let (w, h, back) = read_pfm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"Pf\n4 3\n-1.0\n"));
    }

    #[test]
    fn truncated_pfm_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        std::fs::write(&path, b"Pf\n4 3\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(read_pfm(&path), Err(Error::Format { .. })));
    }
}
