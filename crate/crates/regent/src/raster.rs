//! Grayscale raster images: in-memory `[0, 1]` intensities plus binary PGM (P5) persistence.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

/// Smallest image edge the pipeline supports.
pub const MIN_IMAGE_SIZE: usize = 16;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image {width}x{height} is smaller than the supported minimum {MIN_IMAGE_SIZE}")]
    TooSmall { width: usize, height: usize },
    #[error("pixel buffer has {got} values, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("pixel value {value} at index {index} is outside [0, 1]")]
    OutOfRange { value: f64, index: usize },
    #[error("{path}: {reason}")]
    CorruptPgm { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major grayscale image. Intensities stay in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    /// All-zero image. Panics if either edge is below [`MIN_IMAGE_SIZE`].
    pub fn new(width: usize, height: usize) -> Image {
        assert!(
            width >= MIN_IMAGE_SIZE && height >= MIN_IMAGE_SIZE,
            "image {width}x{height} below minimum {MIN_IMAGE_SIZE}"
        );
        Image { width, height, data: vec![0.0; width * height] }
    }

    /// Builds an image from a row-major buffer, validating size and range.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Image, RasterError> {
        if width < MIN_IMAGE_SIZE || height < MIN_IMAGE_SIZE {
            return Err(RasterError::TooSmall { width, height });
        }
        if data.len() != width * height {
            return Err(RasterError::LengthMismatch { got: data.len(), expected: width * height });
        }
        for (index, &value) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(RasterError::OutOfRange { value, index });
            }
        }
        Ok(Image { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// Bilinear sample at a continuous pixel coordinate; out-of-bounds reads are 0.
    #[inline]
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let dx = x - x0;
        let dy = y - y0;
        let ix = x0 as i64;
        let iy = y0 as i64;
        let at = |px: i64, py: i64| -> f64 {
            if px < 0 || py < 0 || px >= self.width as i64 || py >= self.height as i64 {
                0.0
            } else {
                self.data[py as usize * self.width + px as usize]
            }
        };
        let top = at(ix, iy) * (1.0 - dx) + at(ix + 1, iy) * dx;
        let bottom = at(ix, iy + 1) * (1.0 - dx) + at(ix + 1, iy + 1) * dx;
        top * (1.0 - dy) + bottom * dy
    }

    /// Bilinear resize using the pixel-center convention; same-size resize is exact.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        let mut out = Image::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                // Clamp-free sampling: interior maps stay interior, border rows read the
                // zero fill with near-zero weight only when upscaling past the edge.
                out.set(x, y, self.sample_bilinear(src_x.max(0.0).min(self.width as f64 - 1.0),
                                                   src_y.max(0.0).min(self.height as f64 - 1.0)));
            }
        }
        out
    }

    /// Snaps every intensity to the nearest k/255 level (the on-disk lattice).
    pub fn quantize_to_u8_lattice(mut self) -> Image {
        for v in &mut self.data {
            *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
        }
        self
    }

    /// Mean intensity.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation of intensities.
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / self.data.len() as f64;
        var.sqrt()
    }

    /// Writes the image as binary PGM (P5), 8-bit, maxval 255.
    pub fn save_pgm(&self, path: &Path) -> Result<(), RasterError> {
        let mut bytes = Vec::with_capacity(self.data.len() + 32);
        write!(bytes, "P5\n{} {}\n255\n", self.width, self.height)
            .expect("in-memory write cannot fail");
        bytes.extend(self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        fs::write(path, bytes).map_err(|source| RasterError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Reads a binary PGM (P5) file written by [`Image::save_pgm`] (maxval must be 255).
    pub fn load_pgm(path: &Path) -> Result<Image, RasterError> {
        let bytes = fs::read(path).map_err(|source| RasterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let corrupt = |reason: &str| RasterError::CorruptPgm {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };

        let mut pos = 0usize;
        let mut next_token = |bytes: &[u8]| -> Option<String> {
            // Skip whitespace and '#' comments, then take one token.
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos > start {
                Some(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
            } else {
                None
            }
        };

        let magic = next_token(&bytes).ok_or_else(|| corrupt("empty file"))?;
        if magic != "P5" {
            return Err(corrupt(&format!("bad magic {magic:?}, expected \"P5\"")));
        }
        let width: usize = next_token(&bytes)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| corrupt("missing or non-numeric width"))?;
        let height: usize = next_token(&bytes)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| corrupt("missing or non-numeric height"))?;
        let maxval: usize = next_token(&bytes)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| corrupt("missing or non-numeric maxval"))?;
        if maxval != 255 {
            return Err(corrupt(&format!("unsupported maxval {maxval}, expected 255")));
        }
        // Exactly one whitespace byte separates the header from the payload.
        pos += 1;
        let expected = width.checked_mul(height).ok_or_else(|| corrupt("dimension overflow"))?;
        let payload = bytes.get(pos..).unwrap_or(&[]);
        if payload.len() < expected {
            return Err(corrupt(&format!(
                "truncated payload: {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let data = payload[..expected].iter().map(|&b| b as f64 / 255.0).collect();
        Image::from_vec(width, height, data)
    }
}
