//! Dense single-channel images with values in `[0, 1]` and binary PGM (P5) I/O.

use crate::error::{Error, Result};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        Image {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w, "image data length must be h*w");
        Image { h, w, data }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.w + col]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        &mut self.data[row * self.w + col]
    }

    /// Bilinear sample at fractional (row, col); `None` outside the grid.
    pub fn sample_bilinear(&self, row: f64, col: f64) -> Option<f64> {
        if row < 0.0 || col < 0.0 || row > (self.h - 1) as f64 || col > (self.w - 1) as f64 {
            return None;
        }
        let r0 = row.floor() as usize;
        let c0 = col.floor() as usize;
        let r1 = (r0 + 1).min(self.h - 1);
        let c1 = (c0 + 1).min(self.w - 1);
        let fr = row - r0 as f64;
        let fc = col - c0 as f64;
        let v00 = self.at(r0, c0);
        let v01 = self.at(r0, c1);
        let v10 = self.at(r1, c0);
        let v11 = self.at(r1, c1);
        Some(v00 * (1.0 - fr) * (1.0 - fc) + v01 * (1.0 - fr) * fc + v10 * fr * (1.0 - fc) + v11 * fr * fc)
    }

    /// Center crop to `(ch, cw)`.
    pub fn center_crop(&self, ch: usize, cw: usize) -> (Image, usize, usize) {
        assert!(ch <= self.h && cw <= self.w, "crop larger than image");
        let r0 = (self.h - ch) / 2;
        let c0 = (self.w - cw) / 2;
        let mut out = Image::new(ch, cw);
        for r in 0..ch {
            let src = (r0 + r) * self.w + c0;
            out.data[r * cw..(r + 1) * cw].copy_from_slice(&self.data[src..src + cw]);
        }
        (out, r0, c0)
    }

    /// Write as binary PGM (P5), 8-bit, values clamped to `[0, 1]`.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = BufWriter::new(f);
        write!(w, "P5\n{} {}\n255\n", self.w, self.h)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    /// Read a binary PGM (P5); 8-bit values are scaled to `[0, 1]`.
    pub fn read_pgm(path: &Path) -> Result<Image> {
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        let bad = |msg: &str| Error::FileFormat {
            path: path.display().to_string(),
            msg: msg.to_string(),
        };
        // Header: magic, width, height, maxval, single whitespace, then payload.
        let mut pos = 0usize;
        let mut token = |raw: &[u8]| -> std::result::Result<String, Error> {
            while pos < raw.len() {
                if raw[pos] == b'#' {
                    while pos < raw.len() && raw[pos] != b'\n' {
                        pos += 1;
                    }
                } else if raw[pos].is_ascii_whitespace() {
                    pos += 1;
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
        };
        if token(&raw)? != "P5" {
            return Err(bad("not a binary PGM (expected magic P5)"));
        }
        let w: usize = token(&raw)?.parse().map_err(|_| bad("bad width"))?;
        let h: usize = token(&raw)?.parse().map_err(|_| bad("bad height"))?;
        let maxval: usize = token(&raw)?.parse().map_err(|_| bad("bad maxval"))?;
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        pos += 1; // single whitespace after maxval
        if raw.len() < pos + w * h {
            return Err(bad("truncated pixel payload"));
        }
        let data = raw[pos..pos + w * h].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Image { h, w, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_lossless_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let mut img = Image::new(5, 7);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 11.0 % 256.0) / 255.0;
        }
        img.write_pgm(&path).unwrap();
        let back = Image::read_pgm(&path).unwrap();
        assert_eq!(back.h, 5);
        assert_eq!(back.w, 7);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P2\n2 2\n255\n0 0 0 0").unwrap();
        assert!(Image::read_pgm(&path).is_err());
    }

    #[test]
    fn bilinear_sampling_matches_corners_and_midpoints() {
        let img = Image::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(img.sample_bilinear(0.0, 0.0), Some(0.0));
        assert_eq!(img.sample_bilinear(1.0, 1.0), Some(3.0));
        assert_eq!(img.sample_bilinear(0.5, 0.5), Some(1.5));
        assert_eq!(img.sample_bilinear(-0.1, 0.0), None);
    }
}
