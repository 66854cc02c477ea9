//! Minimal raster containers plus the binary PPM and `.f32` depth formats.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const DEPTH_MAGIC: &[u8; 4] = b"VLDP";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed {kind} data: {reason}")]
    Malformed { kind: &'static str, reason: String },
    #[error("buffer has {got} elements, expected {expected}")]
    SizeMismatch { expected: usize, got: usize },
}

fn malformed(kind: &'static str, reason: impl Into<String>) -> ImageError {
    ImageError::Malformed {
        kind,
        reason: reason.into(),
    }
}

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize * 3],
        }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImageError> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(ImageError::SizeMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luma in [0, 1], row-major.
    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
            .collect();
        GrayImage {
            width: self.width as usize,
            height: self.height as usize,
            data,
        }
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<(), ImageError> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_ppm<R: Read>(mut r: R) -> Result<Self, ImageError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(malformed("ppm", "truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(malformed("ppm", format!("unsupported magic {}", fields[0])));
        }
        let parse = |s: &str| s.parse::<u32>().map_err(|_| malformed("ppm", format!("bad header field {s:?}")));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(malformed("ppm", "only 8-bit images are supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let expected = width as usize * height as usize * 3;
        if bytes.len() < pos + expected {
            return Err(malformed("ppm", "truncated raster"));
        }
        Self::from_raw(width, height, bytes[pos..pos + expected].to_vec())
    }
}

/// Single-channel float image, used internally by the feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Reads with coordinates clamped to the image.
    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }
}

/// Metric depth along the optical axis; `0.0` marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<f32>) -> Result<Self, ImageError> {
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(ImageError::SizeMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_raw(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn put(&mut self, x: u32, y: u32, d: f32) {
        self.data[y as usize * self.width as usize + x as usize] = d;
    }

    pub fn is_valid_at(&self, x: u32, y: u32) -> bool {
        self.get(x, y) > 0.0
    }

    /// Depth at a sub-pixel position.
    ///
    /// Inverse depth is bilinearly interpolated (exact on planar surfaces) when
    /// the four neighbours are valid and agree within `max_rel_spread`;
    /// otherwise the nearest pixel is used. Returns `None` for invalid depth or
    /// positions outside the image.
    pub fn sample(&self, x: f64, y: f64, max_rel_spread: f64) -> Option<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= -0.5 && y >= -0.5 && x < w - 0.5 && y < h - 0.5) {
            return None;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        if x0 >= 0.0 && y0 >= 0.0 && x0 + 1.0 < w && y0 + 1.0 < h {
            let (ix, iy) = (x0 as u32, y0 as u32);
            let d = [
                self.get(ix, iy),
                self.get(ix + 1, iy),
                self.get(ix, iy + 1),
                self.get(ix + 1, iy + 1),
            ];
            if d.iter().all(|&v| v > 0.0) {
                let lo = d.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
                let hi = d.iter().cloned().fold(0.0, f32::max) as f64;
                if hi - lo <= max_rel_spread * lo {
                    let (fx, fy) = (x - x0, y - y0);
                    let inv = (1.0 - fx) * (1.0 - fy) / d[0] as f64
                        + fx * (1.0 - fy) / d[1] as f64
                        + (1.0 - fx) * fy / d[2] as f64
                        + fx * fy / d[3] as f64;
                    return Some(1.0 / inv);
                }
            }
        }
        let (nx, ny) = (x.round() as u32, y.round() as u32);
        let d = self.get(nx.min(self.width - 1), ny.min(self.height - 1));
        (d > 0.0).then_some(d as f64)
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().filter(|&&d| d > 0.0).count() as f64 / self.data.len() as f64
    }

    /// `VLDP` container: magic, u32 width, u32 height, u32 reserved, then
    /// row-major little-endian f32.
    pub fn write_f32<W: Write>(&self, w: W) -> Result<(), ImageError> {
        write_f32_grid(w, self.width, self.height, &self.data)
    }

    pub fn read_f32<R: Read>(r: R) -> Result<Self, ImageError> {
        let (width, height, data) = read_f32_grid(r)?;
        Self::from_raw(width, height, data)
    }
}

pub fn write_f32_grid<W: Write>(mut w: W, width: u32, height: u32, data: &[f32]) -> Result<(), ImageError> {
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&width.to_le_bytes())?;
    w.write_all(&height.to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f32_grid<R: Read>(mut r: R) -> Result<(u32, u32, Vec<f32>), ImageError> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|_| malformed("depth", "truncated header"))?;
    if &header[..4] != DEPTH_MAGIC {
        return Err(malformed("depth", "bad magic"));
    }
    let width = u32::from_le_bytes(header[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let n = width as usize * height as usize;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw).map_err(|_| malformed("depth", "truncated data"))?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((width, height, data))
}
