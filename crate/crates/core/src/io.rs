//! PFM images and 8-bit grayscale PNG export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::percept::{luma, SpectrumImage};
use crate::sequence::FrameSequence;

/// A single-channel image, rows top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }
}

/// Writes grayscale little-endian PFM (`Pf`, scale -1, rows bottom to top).
pub fn write_pfm<W: Write>(img: &GrayImage, sink: W) -> Result<()> {
    let mut w = BufWriter::new(sink);
    write!(w, "Pf\n{} {}\n-1.0\n", img.width, img.height)?;
    for row in img.values.chunks(img.width).rev() {
        for &v in row {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(byte[0]);
    }
    if token.is_empty() {
        return Err(Error::InvalidInput("truncated PFM header".into()));
    }
    String::from_utf8(token).map_err(|_| Error::InvalidInput("non-ASCII PFM header".into()))
}

/// Reads `Pf` or `PF` (reduced to luma) in either byte order.
pub fn read_pfm<R: Read>(source: R) -> Result<GrayImage> {
    let mut r = BufReader::new(source);
    let channels = match header_token(&mut r)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::InvalidInput(format!("not a PFM file (magic `{other}`)"))),
    };
    let parse = |s: String, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::InvalidInput(format!("bad PFM {what} `{s}`")))
    };
    let width = parse(header_token(&mut r)?, "width")? as usize;
    let height = parse(header_token(&mut r)?, "height")? as usize;
    let scale = parse(header_token(&mut r)?, "scale")?;
    if width == 0 || height == 0 || scale == 0.0 {
        return Err(Error::InvalidInput("PFM dimensions and scale must be nonzero".into()));
    }
    let mut raw = vec![0u8; width * height * channels * 4];
    r.read_exact(&mut raw)
        .map_err(|_| Error::InvalidInput("truncated PFM payload".into()))?;
    let floats: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if scale < 0.0 {
                f32::from_le_bytes(b) as f64
            } else {
                f32::from_be_bytes(b) as f64
            }
        })
        .collect();
    let pixels: Vec<f64> = if channels == 1 {
        floats
    } else {
        floats.chunks_exact(3).map(|c| luma([c[0], c[1], c[2]])).collect()
    };
    let mut values = Vec::with_capacity(width * height);
    for row in pixels.chunks(width).rev() {
        values.extend_from_slice(row);
    }
    GrayImage::new(width, height, values)
}

pub fn write_pfm_file(path: &Path, img: &GrayImage) -> Result<()> {
    write_pfm(img, File::create(path)?)
}

pub fn read_pfm_file(path: &Path) -> Result<GrayImage> {
    read_pfm(File::open(path)?)
}

/// Stacks equally sized PFM frames into a sequence.
pub fn read_pfm_sequence(paths: &[impl AsRef<Path>]) -> Result<FrameSequence> {
    let first = paths
        .first()
        .ok_or_else(|| Error::InvalidInput("no frames given".into()))?;
    let first = read_pfm_file(first.as_ref())?;
    let (w, h) = (first.width, first.height);
    let mut values = first.values;
    for p in &paths[1..] {
        let img = read_pfm_file(p.as_ref())?;
        if (img.width, img.height) != (w, h) {
            return Err(Error::InvalidInput(format!(
                "{}: {}x{} does not match {w}x{h}",
                p.as_ref().display(),
                img.width,
                img.height
            )));
        }
        values.extend(img.values);
    }
    FrameSequence::from_values([w, h, paths.len()], values)
}

/// Writes values clamped to `[0, 1]` as 8-bit grayscale.
pub fn write_gray_png<W: Write>(img: &GrayImage, sink: W) -> Result<()> {
    let mut enc = png::Encoder::new(BufWriter::new(sink), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img
        .values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&bytes).map_err(png_err)?;
    w.finish().map_err(png_err)?;
    Ok(())
}

fn png_err(e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::Io(io),
        other => Error::InvalidInput(format!("PNG encoding failed: {other}")),
    }
}

/// Log-scaled power spectrum, `log(1 + p / mean)` mapped to `[0, 1]`.
pub fn spectrum_to_image(spec: &SpectrumImage) -> Result<GrayImage> {
    let n = spec.values.len() as f64;
    let mean = spec.total() / n;
    let logged: Vec<f64> = if mean > 0.0 {
        spec.values.iter().map(|p| (1.0 + p / mean).ln()).collect()
    } else {
        vec![0.0; spec.values.len()]
    };
    let max = logged.iter().cloned().fold(0.0, f64::max);
    let values = if max > 0.0 {
        logged.iter().map(|v| v / max).collect()
    } else {
        logged
    };
    GrayImage::new(spec.width, spec.height, values)
}

pub fn write_spectrum_png(path: &Path, spec: &SpectrumImage) -> Result<()> {
    write_gray_png(&spectrum_to_image(spec)?, File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GrayImage {
        GrayImage::new(3, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, -2.5]).unwrap()
    }

    #[test]
    fn pfm_round_trip() {
        let mut buf = Vec::new();
        write_pfm(&sample(), &mut buf).unwrap();
        assert!(buf.starts_with(b"Pf\n3 2\n-1.0\n"));
        assert_eq!(buf.len(), 12 + 6 * 4);
        // Bottom row first.
        assert_eq!(&buf[12..16], &0.75f32.to_le_bytes());
        assert_eq!(read_pfm(&buf[..]).unwrap(), sample());
    }

    #[test]
    fn reads_big_endian_color() {
        let mut buf = b"PF\n1 1\n1.0\n".to_vec();
        for c in [1.0f32, 0.0, 0.0] {
            buf.extend_from_slice(&c.to_be_bytes());
        }
        let img = read_pfm(&buf[..]).unwrap();
        assert!((img.values[0] - 0.2126).abs() < 1e-7);
    }

    #[test]
    fn rejects_truncated_pfm() {
        assert!(read_pfm(&b"Pf\n4 4\n-1.0\n\0\0\0\0"[..]).is_err());
        assert!(read_pfm(&b"P6\n1 1\n255\n"[..]).is_err());
    }

    #[test]
    fn png_has_signature() {
        let mut buf = Vec::new();
        write_gray_png(&sample(), &mut buf).unwrap();
        assert_eq!(&buf[..8], b"\x89PNG\r\n\x1a\n");
    }

    #[test]
    fn spectrum_image_is_normalized() {
        let spec = SpectrumImage {
            width: 2,
            height: 2,
            values: vec![0.0, 1.0, 3.0, 0.0],
        };
        let img = spectrum_to_image(&spec).unwrap();
        assert_eq!(img.values.iter().cloned().fold(0.0, f64::max), 1.0);
        assert_eq!(img.values[0], 0.0);
    }
}
