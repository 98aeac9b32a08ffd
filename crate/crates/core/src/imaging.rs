//! Grayscale images, bilinear sampling, central-difference gradients,
//! pyramids, the pinhole camera, and PGM I/O.

use crate::geometry::Vec3;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Points closer than this to the camera plane cannot be projected.
pub const EPS_DEPTH: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("sample ({x}, {y}) outside image of {width}x{height}")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("image {width}x{height} too small for {levels} pyramid levels")]
    TooSmall {
        width: usize,
        height: usize,
        levels: usize,
    },
    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("malformed PGM: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major grayscale image with intensities normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::from_raw(width, height, data)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Bilinear interpolation of the four neighbors of `(x, y)`.
    pub fn bilinear(&self, x: f64, y: f64) -> Result<f64, ImagingError> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64)
        {
            return Err(ImagingError::OutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        // Clamp the cell so samples exactly on the far edge stay valid.
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let (x1, y1) = (
            (x0 + 1).min(self.width - 1),
            (y0 + 1).min(self.height - 1),
        );
        let v00 = self.get(x0, y0);
        let v10 = self.get(x1, y0);
        let v01 = self.get(x0, y1);
        let v11 = self.get(x1, y1);
        Ok(v00 * (1.0 - fx) * (1.0 - fy)
            + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v11 * fx * fy)
    }

    /// Central-difference gradient `([-1 0 1]/2 kernel)` evaluated through
    /// bilinear samples; needs one pixel of margin.
    pub fn gradient(&self, x: f64, y: f64) -> Result<(f64, f64), ImagingError> {
        if !(x >= 1.0
            && y >= 1.0
            && x <= (self.width - 2) as f64
            && y <= (self.height - 2) as f64)
        {
            return Err(ImagingError::OutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        let gx = (self.bilinear(x + 1.0, y)? - self.bilinear(x - 1.0, y)?) / 2.0;
        let gy = (self.bilinear(x, y + 1.0)? - self.bilinear(x, y - 1.0)?) / 2.0;
        Ok((gx, gy))
    }

    /// 2x2 box filter + 2x downsample; output dimensions are rounded up.
    fn halve(&self) -> GrayImage {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let x0 = 2 * x;
                let y0 = 2 * y;
                let x1 = (x0 + 1).min(self.width - 1);
                let y1 = (y0 + 1).min(self.height - 1);
                data.push(
                    0.25 * (self.get(x0, y0) + self.get(x1, y0) + self.get(x0, y1) + self.get(x1, y1)),
                );
            }
        }
        GrayImage::from_raw(w, h, data)
    }
}

/// Multi-scale image stack; level 0 is the finest.
#[derive(Debug, Clone)]
pub struct ImagePyramid {
    levels: Vec<GrayImage>,
}

impl ImagePyramid {
    pub fn build(image: GrayImage, levels: usize) -> Result<Self, ImagingError> {
        let min_dim = 1usize << (levels.saturating_sub(1));
        if levels < 1 || image.width < min_dim || image.height < min_dim {
            return Err(ImagingError::TooSmall {
                width: image.width,
                height: image.height,
                levels,
            });
        }
        let mut out = Vec::with_capacity(levels);
        out.push(image);
        for _ in 1..levels {
            let next = out.last().unwrap().halve();
            out.push(next);
        }
        Ok(ImagePyramid { levels: out })
    }

    pub fn level(&self, l: usize) -> &GrayImage {
        &self.levels[l]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0);
        Intrinsics { fx, fy, cx, cy }
    }

    /// Intrinsics of pyramid level `l`: focal lengths and principal point
    /// scaled by `2^-l`.
    pub fn at_level(&self, l: usize) -> Intrinsics {
        let s = 1.0 / (1u64 << l) as f64;
        Intrinsics {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
        }
    }

    /// Project a camera-frame point to pixel coordinates.
    pub fn project(&self, xc: &Vec3) -> Result<(f64, f64), ImagingError> {
        if xc.z <= EPS_DEPTH {
            return Err(ImagingError::BehindCamera { z: xc.z });
        }
        Ok((
            self.fx * xc.x / xc.z + self.cx,
            self.fy * xc.y / xc.z + self.cy,
        ))
    }

    /// Pixel to normalized retina coordinates (inverse of `project` at unit
    /// depth).
    pub fn normalized(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.cx) / self.fx, (y - self.cy) / self.fy)
    }

    /// Back-project a pixel to the camera-frame point at depth `z`.
    pub fn unproject(&self, x: f64, y: f64, z: f64) -> Vec3 {
        let (xn, yn) = self.normalized(x, y);
        Vec3::new(xn * z, yn * z, z)
    }

    /// Derivative of `project` with respect to the camera-frame point.
    pub fn projection_jacobian(
        &self,
        xc: &Vec3,
    ) -> Result<nalgebra::Matrix2x3<f64>, ImagingError> {
        if xc.z <= EPS_DEPTH {
            return Err(ImagingError::BehindCamera { z: xc.z });
        }
        let iz = 1.0 / xc.z;
        Ok(nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * xc.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * xc.y * iz * iz,
        ))
    }
}

/// Depth image in scene units with a validity mask.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    depths: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Option<f64>) -> Self {
        let mut depths = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                match f(x, y) {
                    Some(d) if d > 0.0 && d.is_finite() => {
                        depths.push(d);
                        valid.push(true);
                    }
                    _ => {
                        depths.push(0.0);
                        valid.push(false);
                    }
                }
            }
        }
        DepthMap {
            width,
            height,
            depths,
            valid,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        if x >= self.width || y >= self.height || !self.valid[y * self.width + x] {
            None
        } else {
            Some(self.depths[y * self.width + x])
        }
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], ImagingError> {
    // Skip whitespace and '#' comment lines.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImagingError::Malformed("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_usize(tok: &[u8]) -> Result<usize, ImagingError> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ImagingError::Malformed("bad integer in header".into()))
}

/// Raw PGM contents: dimensions, maxval, and one sample per pixel.
pub struct PgmData {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub samples: Vec<u32>,
}

/// Parse an 8- or 16-bit PGM in either the binary (P5) or ASCII (P2) flavor.
pub fn parse_pgm(bytes: &[u8]) -> Result<PgmData, ImagingError> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        _ => return Err(ImagingError::Malformed("not a PGM (want P2/P5)".into())),
    };
    let width = parse_usize(next_token(bytes, &mut pos)?)?;
    let height = parse_usize(next_token(bytes, &mut pos)?)?;
    let maxval = parse_usize(next_token(bytes, &mut pos)?)? as u32;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(ImagingError::Malformed("bad dimensions or maxval".into()));
    }
    let count = width * height;
    let mut samples = Vec::with_capacity(count);
    if binary {
        pos += 1; // single whitespace after maxval
        if maxval > 255 {
            if bytes.len() < pos + 2 * count {
                return Err(ImagingError::Malformed("truncated P5 payload".into()));
            }
            for i in 0..count {
                let hi = bytes[pos + 2 * i] as u32;
                let lo = bytes[pos + 2 * i + 1] as u32;
                samples.push(hi << 8 | lo);
            }
        } else {
            if bytes.len() < pos + count {
                return Err(ImagingError::Malformed("truncated P5 payload".into()));
            }
            samples.extend(bytes[pos..pos + count].iter().map(|&b| b as u32));
        }
    } else {
        for _ in 0..count {
            samples.push(parse_usize(next_token(bytes, &mut pos)?)? as u32);
        }
    }
    if samples.iter().any(|&s| s > maxval) {
        return Err(ImagingError::Malformed("sample exceeds maxval".into()));
    }
    Ok(PgmData {
        width,
        height,
        maxval,
        samples,
    })
}

/// Load a grayscale PGM, normalizing intensities to [0, 1].
pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage, ImagingError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let pgm = parse_pgm(&bytes)?;
    let scale = 1.0 / pgm.maxval as f64;
    let data = pgm.samples.iter().map(|&s| s as f64 * scale).collect();
    Ok(GrayImage::from_raw(pgm.width, pgm.height, data))
}

/// Write an 8-bit binary PGM; intensities are clamped to [0, 1].
pub fn save_pgm(image: &GrayImage, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    let mut out = Vec::with_capacity(image.width * image.height + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", image.width, image.height).as_bytes());
    for v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Load a 16-bit depth PGM; `scale` is scene units per count and a zero count
/// marks an invalid sample.
pub fn load_depth_pgm(path: impl AsRef<Path>, scale: f64) -> Result<DepthMap, ImagingError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let pgm = parse_pgm(&bytes)?;
    let samples = pgm.samples;
    let width = pgm.width;
    Ok(DepthMap::from_fn(width, pgm.height, |x, y| {
        let s = samples[y * width + x];
        if s == 0 {
            None
        } else {
            Some(s as f64 * scale)
        }
    }))
}

/// Write a 16-bit binary depth PGM with the given scene-units-per-count
/// scale; invalid samples become zero counts.
pub fn save_depth_pgm(
    depth: &DepthMap,
    path: impl AsRef<Path>,
    scale: f64,
) -> Result<(), ImagingError> {
    let mut out = Vec::with_capacity(2 * depth.width * depth.height + 32);
    out.extend_from_slice(format!("P5\n{} {}\n65535\n", depth.width, depth.height).as_bytes());
    for y in 0..depth.height {
        for x in 0..depth.width {
            let count = match depth.get(x, y) {
                Some(d) => ((d / scale).round() as i64).clamp(1, 65535) as u16,
                None => 0,
            };
            out.extend_from_slice(&count.to_be_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}
