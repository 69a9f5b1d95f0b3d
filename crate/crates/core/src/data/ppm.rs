use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Non-overlapping `patch × patch` tiles flattened to rows of `patch² · 3`
    /// values in `[0, 1]`, tiles in raster order.
    pub fn patches(&self, patch: usize) -> Matrix {
        let (nx, ny) = (self.width / patch, self.height / patch);
        let dim = patch * patch * 3;
        let mut out = Matrix::zeros(nx * ny, dim);
        for ty in 0..ny {
            for tx in 0..nx {
                let row = out.row_mut(ty * nx + tx);
                let mut k = 0;
                for y in 0..patch {
                    for x in 0..patch {
                        for c in self.get(tx * patch + x, ty * patch + y) {
                            row[k] = f64::from(c) / 255.0;
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Parse("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::Parse(format!("expected P6 magic, found `{}`", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad PPM header field `{s}`")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Parse("only 8-bit PPM is supported".into()));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(Error::Parse("truncated PPM raster".into()));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..pos + need].to_vec(),
        })
    }
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    std::fs::write(path, image.to_ppm_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    RgbImage::from_ppm_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_and_patch_layout() {
        let mut img = RgbImage::new(4, 4);
        img.put(3, 0, [255, 0, 0]);
        img.put(0, 2, [0, 0, 255]);
        let back = RgbImage::from_ppm_bytes(&img.to_ppm_bytes()).unwrap();
        assert_eq!(back, img);
        let p = img.patches(2);
        assert_eq!(p.shape(), (4, 12));
        // pixel (3,0) is the top-right pixel of tile 1
        assert_eq!(p.get(1, 3), 1.0);
        // pixel (0,2) is the top-left pixel of tile 2, blue channel
        assert_eq!(p.get(2, 2), 1.0);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(RgbImage::from_ppm_bytes(&bytes).unwrap().get(0, 0), [1, 2, 3]);
        assert!(RgbImage::from_ppm_bytes(b"P3\n1 1\n255\n").is_err());
    }
}
