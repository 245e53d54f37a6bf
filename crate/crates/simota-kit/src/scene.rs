//! Scenes (RGB image + ground-truth boxes) and binary PPM (P6) I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::LabeledBox;

/// Interleaved RGB8 image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` bytes, row-major, RGB.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new_filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Fill the intersection of the rectangle (corner coords, pixels) with
    /// the canvas.
    pub fn fill_rect(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, rgb: [u8; 3]) {
        let xa = x1.max(0.0).floor() as usize;
        let ya = y1.max(0.0).floor() as usize;
        let xb = (x2.min(self.width as f64).ceil() as usize).min(self.width);
        let yb = (y2.min(self.height as f64).ceil() as usize).min(self.height);
        for y in ya..yb {
            for x in xa..xb {
                self.set(x, y, rgb);
            }
        }
    }
}

/// A synthetic or loaded image with its ground-truth boxes.
///
/// Invariants: every gt box intersects the canvas; both sides are at least
/// 32 px.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: Image,
    pub gts: Vec<LabeledBox>,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width() < 32 || self.height() < 32 {
            return Err(Error::invalid(format!(
                "scene {} smaller than 32x32",
                self.id
            )));
        }
        let (w, h) = (self.width() as f64, self.height() as f64);
        for (i, gt) in self.gts.iter().enumerate() {
            if !gt.bbox.is_valid() {
                return Err(Error::invalid(format!("scene {}: gt {i} invalid", self.id)));
            }
            let (x1, y1, x2, y2) = gt.bbox.corners();
            if x2 <= 0.0 || y2 <= 0.0 || x1 >= w || y1 >= h {
                return Err(Error::invalid(format!(
                    "scene {}: gt {i} outside canvas",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Write a binary PPM (P6, maxval 255).
pub fn write_ppm(img: &Image, w: &mut impl Write) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

pub fn write_ppm_file(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_ppm(img, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Read a binary PPM (P6, maxval 255). `#` comments in the header are
/// skipped.
pub fn read_ppm(r: &mut impl Read) -> Result<Image> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(Error::invalid("not a P6 ppm"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::invalid("malformed ppm header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::invalid("malformed ppm header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::invalid(format!("unsupported ppm maxval {maxval}")));
    }
    // Single whitespace byte separates header and data.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::invalid("malformed ppm header"));
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::invalid("truncated ppm payload"));
    }
    Ok(Image {
        width,
        height,
        data: bytes[pos..pos + need].to_vec(),
    })
}

pub fn read_ppm_file(path: impl AsRef<Path>) -> Result<Image> {
    let mut f = BufReader::new(File::open(path)?);
    read_ppm(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    #[test]
    fn ppm_round_trip() {
        let mut img = Image::new_filled(5, 3, [10, 20, 30]);
        img.set(2, 1, [200, 100, 0]);
        let mut buf = Vec::new();
        write_ppm(&img, &mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n5 3\n255\n"));
        let back = read_ppm(&mut buf.as_slice()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_with_comment() {
        let mut buf: Vec<u8> = b"P6\n# a comment\n2 1\n255\n".to_vec();
        buf.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = read_ppm(&mut buf.as_slice()).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.get(1, 0), [4, 5, 6]);
    }

    #[test]
    fn ppm_rejects_bad_input() {
        assert!(read_ppm(&mut b"P5\n1 1\n255\nx".as_slice()).is_err());
        assert!(read_ppm(&mut b"P6\n2 2\n255\n".as_slice()).is_err());
    }

    #[test]
    fn scene_validation() {
        let mut s = Scene {
            id: "t".into(),
            image: Image::new_filled(64, 64, [0, 0, 0]),
            gts: vec![LabeledBox::new(BBox::new(10.0, 10.0, 5.0, 5.0), 0)],
        };
        assert!(s.validate().is_ok());
        s.gts.push(LabeledBox::new(BBox::new(100.0, 100.0, 5.0, 5.0), 0));
        assert!(s.validate().is_err());
    }
}
