//! Image file I/O. Everything is read into `[0, 1]` floating point; writes
//! are always 16-bit.

use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::grid::Grid;

const MAX16: f64 = 65535.0;

#[inline]
pub fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * MAX16).round() as u16
}

#[inline]
pub fn dequantize16(q: u16) -> f64 {
    q as f64 / MAX16
}

/// Rounds every value onto the 16-bit grid that file storage uses.
pub fn quantize_grid(g: &Grid) -> Grid {
    g.mapv(|v| dequantize16(quantize16(v)))
}

/// Image contents as either a single luminance plane or RGB planes.
pub enum Planes {
    Gray(Grid),
    Rgb([Grid; 3]),
}

pub fn read_planes(path: &Path) -> Result<Planes> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes = match img {
        DynamicImage::ImageLuma8(b) => {
            Planes::Gray(Grid::from_shape_fn((h, w), |(y, x)| b.get_pixel(x as u32, y as u32)[0] as f64 / 255.0))
        }
        DynamicImage::ImageLuma16(b) => {
            Planes::Gray(Grid::from_shape_fn((h, w), |(y, x)| dequantize16(b.get_pixel(x as u32, y as u32)[0])))
        }
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => {
            let b = img.to_luma16();
            Planes::Gray(Grid::from_shape_fn((h, w), |(y, x)| dequantize16(b.get_pixel(x as u32, y as u32)[0])))
        }
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            let b = img.to_rgb8();
            Planes::Rgb(std::array::from_fn(|c| {
                Grid::from_shape_fn((h, w), |(y, x)| b.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
            }))
        }
        other => {
            let b = other.to_rgb16();
            Planes::Rgb(std::array::from_fn(|c| {
                Grid::from_shape_fn((h, w), |(y, x)| dequantize16(b.get_pixel(x as u32, y as u32)[c]))
            }))
        }
    };
    Ok(planes)
}

pub fn write_png16(g: &Grid, path: &Path) -> Result<()> {
    let (h, w) = g.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([quantize16(g[[y as usize, x as usize]])]));
    buf.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Binary 16-bit PGM (`P5`, maxval 65535, big-endian samples).
pub fn write_pgm16(g: &Grid, path: &Path) -> Result<()> {
    let (h, w) = g.dim();
    let mut out = Vec::with_capacity(32 + 2 * w * h);
    write!(out, "P5\n{w} {h}\n65535\n").expect("writing to a Vec cannot fail");
    for v in g.iter() {
        out.extend_from_slice(&quantize16(*v).to_be_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png16_and_pgm16_round_trip_exactly_on_the_16bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let g = quantize_grid(&Grid::from_shape_fn((5, 7), |(y, x)| (x as f64 * 0.13 + y as f64 * 0.07) % 1.0));
        for name in ["a.png", "a.pgm"] {
            let p = dir.path().join(name);
            if name.ends_with("png") {
                write_png16(&g, &p).unwrap();
            } else {
                write_pgm16(&g, &p).unwrap();
            }
            match read_planes(&p).unwrap() {
                Planes::Gray(r) => assert_eq!(r, g),
                Planes::Rgb(_) => panic!("expected a grey image"),
            }
        }
    }

    #[test]
    fn quantisation_error_is_bounded() {
        for i in 0..1000 {
            let v = i as f64 / 999.0;
            assert!((dequantize16(quantize16(v)) - v).abs() <= 0.5 / 65535.0 + 1e-15);
        }
    }
}
